"""Convolutional video encoder.

Input videos are (3, L, H, W) volumes with raw values in [0, 1]; the encoder
rescales them to [-1, 1] and applies four conv+relu+maxpool stages whose
pooling schedule downsamples time by 8 and space by 16, so a feature
timestep spans temporal_stride = 8 input frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

TEMPORAL_STRIDE = 8
SPATIAL_STRIDE = 16
_POOLS = [(1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2)]


@dataclass
class VideoTensor:
    """Raw video volume plus the metadata needed to map timesteps to seconds."""

    data: np.ndarray  # (3, L, H, W), float64 in [0, 1]
    frame_rate: float
    video_id: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ShapeError(f"video must be (3, L, H, W), got {self.data.shape}")
        if self.frame_rate <= 0:
            raise ad.ContractError("frame_rate must be positive")

    @property
    def duration(self) -> float:
        return self.data.shape[1] / self.frame_rate

    def seconds_to_timesteps(self, sec: float) -> float:
        return sec * self.frame_rate / TEMPORAL_STRIDE

    def timesteps_to_seconds(self, ts: float) -> float:
        return ts * TEMPORAL_STRIDE / self.frame_rate


def init_encoder_params(channels, rng: np.random.Generator) -> dict[str, Tensor]:
    from .model import conv_init
    params = {}
    chain = [3] + list(channels)
    for i in range(len(channels)):
        params[f"enc/conv{i + 1}/w"], params[f"enc/conv{i + 1}/b"] = conv_init(
            chain[i + 1], chain[i], 3, rng)
    return params


def encode(video: VideoTensor, params: dict[str, Tensor]) -> Tensor:
    """Feature volume (C_feat, L/8, H/16, W/16) for one video."""
    _, length, h, w = video.data.shape
    if length % TEMPORAL_STRIDE or h % SPATIAL_STRIDE or w % SPATIAL_STRIDE:
        raise ShapeError(
            f"video dims {(length, h, w)} must be multiples of "
            f"({TEMPORAL_STRIDE}, {SPATIAL_STRIDE}, {SPATIAL_STRIDE})")
    x = Tensor(video.data * 2.0 - 1.0)
    for i, pool in enumerate(_POOLS):
        x = ad.relu(ad.conv3d(x, params[f"enc/conv{i + 1}/w"], params[f"enc/conv{i + 1}/b"],
                              padding=1))
        x = ad.maxpool3d(x, pool)
    return x
