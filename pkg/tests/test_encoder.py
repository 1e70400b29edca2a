import numpy as np
import pytest

from eventcap import autodiff as ad
from eventcap import encoder as enc
from eventcap.autodiff import ShapeError
from eventcap.model import ModelConfig, FULL_SCALE, init_params


def make_params(channels, seed=0):
    return enc.init_encoder_params(channels, np.random.default_rng(seed))


class TestVideoTensor:
    def test_duration_and_conversions(self):
        v = enc.VideoTensor(np.zeros((3, 96, 16, 16)), frame_rate=8.0, video_id="v0")
        assert v.duration == 12.0
        assert v.seconds_to_timesteps(4.0) == 4.0
        assert v.timesteps_to_seconds(3.0) == 3.0

    def test_conversions_non_unit_rate(self):
        v = enc.VideoTensor(np.zeros((3, 96, 16, 16)), frame_rate=16.0, video_id="v0")
        assert v.seconds_to_timesteps(1.0) == 2.0
        assert v.timesteps_to_seconds(2.0) == 1.0

    def test_bad_shape_rejected(self):
        with pytest.raises(ShapeError):
            enc.VideoTensor(np.zeros((1, 96, 16, 16)), 8.0, "v")


class TestEncode:
    def test_desk_scale_shape(self):
        params = make_params([16, 32, 32, 32])
        v = enc.VideoTensor(np.random.default_rng(0).uniform(size=(3, 96, 16, 16)), 8.0, "v")
        out = enc.encode(v, params)
        assert out.shape == (32, 12, 1, 1)

    def test_full_scale_shape(self):
        # Only the downsampling schedule matters here; thin channels keep it fast.
        params = make_params([1, 1, 1, 512])
        v = enc.VideoTensor(np.zeros((3, 768, 112, 112)), 3.0, "paperscale")
        out = enc.encode(v, params)
        assert out.shape == (512, 96, 7, 7)

    def test_zero_video_zero_weights_gives_zero_features(self):
        params = make_params([4, 4, 4, 4])
        for p in params.values():
            p.data[:] = 0.0
        v = enc.VideoTensor(np.zeros((3, 16, 16, 16)), 8.0, "v")
        out = enc.encode(v, params)
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_indivisible_dims_rejected(self):
        params = make_params([4, 4, 4, 4])
        with pytest.raises(ShapeError):
            enc.encode(enc.VideoTensor(np.zeros((3, 20, 16, 16)), 8.0, "v"), params)
        with pytest.raises(ShapeError):
            enc.encode(enc.VideoTensor(np.zeros((3, 16, 24, 16)), 8.0, "v"), params)

    def test_gradient_reaches_first_conv(self):
        params = make_params([2, 2, 2, 2], seed=3)
        v = enc.VideoTensor(np.random.default_rng(1).uniform(size=(3, 16, 16, 16)), 8.0, "v")
        loss = ad.mean(enc.encode(v, params))
        ad.backward(loss)
        assert params["enc/conv1/w"].grad is not None
        assert np.any(params["enc/conv1/w"].grad != 0)

    def test_deterministic_init(self):
        a = make_params([4, 4, 4, 4], seed=9)
        b = make_params([4, 4, 4, 4], seed=9)
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()


def test_full_scale_preset_dimensions():
    assert len(FULL_SCALE.anchor_scales) == 36
    assert FULL_SCALE.encoder_channels[-1] == 512
    assert FULL_SCALE.max_caption_len == 30
    assert FULL_SCALE.controller_dim == 20
