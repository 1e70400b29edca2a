import math

import numpy as np
import pytest

from eventcap import autodiff as ad
from eventcap import captioner, pooling, training
from eventcap.autodiff import ContractError, Tensor
from eventcap.model import JointModel, ModelConfig, is_caption_param
from eventcap.synthetic import Dataset, GenConfig, generate
from eventcap.training import (Checkpoint, DivergenceError, TrainConfig, build_vocab,
                               clip_gradients, extract_gt_features, load_checkpoint,
                               pretrain_captioner, pretrain_spn, save_checkpoint,
                               sgd_step, train_joint)

TINY = dict(videos=4, duration_frames=96, height=16, width=16, num_motifs=3,
            min_events=2, max_events=2, seed=77)


@pytest.fixture(scope="module")
def tiny_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate(GenConfig(**TINY), root)
    return Dataset.open(root)


def tiny_model_cfg(**overrides):
    base = dict(encoder_channels=[4, 4, 4, 8], anchor_scales=[1, 2, 4],
                proposal_hidden=8, pool_bins=2, fc_dim=16, embed_dim=8,
                controller_dim=4, captioner_hidden=12, max_caption_len=12)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_cfg(**overrides):
    base = dict(seed=5, spn_steps=3, captioner_epochs=1, joint_steps=3,
                minibatch_anchors=8, caption_batch=4)
    base.update(overrides)
    return TrainConfig(**base)


def params_equal(a: dict, b: dict) -> bool:
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


class TestOptimizer:
    def test_sgd_matches_hand_rolled_momentum(self):
        # two steps of v = mu v + g; p -= lr v, tracked by hand
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        params = {"w": p}
        vel = {"w": np.zeros(2)}
        p.grad = np.array([0.5, 1.0])
        sgd_step(params, vel, lambda n: 0.1, momentum=0.9)
        assert np.allclose(p.data, [1.0 - 0.05, -2.0 - 0.1])
        p.grad = np.array([-1.0, 0.0])
        sgd_step(params, vel, lambda n: 0.1, momentum=0.9)
        # v2 = 0.9*[0.5,1.0] + [-1,0] = [-0.55, 0.9]
        assert np.allclose(vel["w"], [-0.55, 0.9])
        assert np.allclose(p.data, [0.95 + 0.055, -2.1 - 0.09])

    def test_sgd_skips_gradless_and_skipped(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        b.grad = np.ones(2)
        params = {"enc/w": b, "free": a}
        vel = {"enc/w": np.zeros(2), "free": np.zeros(2)}
        sgd_step(params, vel, lambda n: 1.0, 0.9, skip=lambda n: n.startswith("enc/"))
        assert np.array_equal(a.data, np.ones(2))   # no grad
        assert np.array_equal(b.data, np.ones(2))   # skipped

    def test_clip_rescales_to_max_norm(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 3.0)   # norm 6
        norm = clip_gradients({"p": p}, 1.5)
        assert math.isclose(norm, 6.0)
        assert math.isclose(float(np.linalg.norm(p.grad)), 1.5)

    def test_clip_leaves_small_gradients_alone(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 0.1)
        g0 = p.grad.copy()
        clip_gradients({"p": p}, 5.0)
        assert np.array_equal(p.grad, g0)


class TestCheckpointFormat:
    def _roundtrip(self, tmp_path, ckpt):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, ckpt)
        return path, load_checkpoint(path)

    def test_roundtrip_preserves_everything(self, tmp_path):
        rng = np.random.default_rng(0)
        mcfg = tiny_model_cfg(vocab_size=6)
        ckpt = Checkpoint("spn", 17, mcfg, tiny_train_cfg(),
                          ["cat", "dog"],
                          {"a/w": rng.normal(size=(3, 2)), "b": rng.normal(size=(4,))},
                          {"a/w": rng.normal(size=(3, 2)), "b": np.zeros(4)})
        _, back = self._roundtrip(tmp_path, ckpt)
        assert back.stage == "spn" and back.step == 17
        assert back.model_config == mcfg
        assert back.train_config == ckpt.train_config
        assert back.vocab_tokens == ["cat", "dog"]
        assert params_equal(back.params, ckpt.params)
        assert params_equal(back.velocities, ckpt.velocities)

    def test_serialization_is_byte_deterministic(self, tmp_path):
        rng = np.random.default_rng(1)
        ckpt = Checkpoint("joint", 3, tiny_model_cfg(vocab_size=5), tiny_train_cfg(),
                          ["x"], {"w": rng.normal(size=(2, 2))}, {"w": np.zeros((2, 2))})
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        save_checkpoint(tmp_path / "b.ckpt", ckpt)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_rejects_garbage(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ContractError):
            load_checkpoint(bad)


class TestProposalPretraining:
    def test_loss_decreases_and_log_written(self, tiny_ds, tmp_path):
        tcfg = tiny_train_cfg(spn_steps=30, lr_spn=0.05)
        ckpt = pretrain_spn(tiny_ds, tiny_model_cfg(), tcfg, tmp_path)
        rows = (tmp_path / "train_log.csv").read_text().strip().splitlines()
        assert rows[0] == "stage,step,loss_proposal,loss_caption,loss_total"
        losses = [float(r.split(",")[2]) for r in rows[1:]]
        assert len(losses) == 30
        assert losses[-1] < losses[0]
        assert ckpt.stage == "spn" and ckpt.step == 30

    def test_two_runs_bitwise_identical(self, tiny_ds, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(), out1)
        pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(), out2)
        assert (out1 / "spn.ckpt").read_bytes() == (out2 / "spn.ckpt").read_bytes()
        assert (out1 / "train_log.csv").read_text() == (out2 / "train_log.csv").read_text()

    def test_resume_equals_uninterrupted(self, tiny_ds, tmp_path):
        full = pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(spn_steps=6),
                            tmp_path / "full")
        pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(spn_steps=6, checkpoint_every=3),
                     tmp_path / "half")
        mid = load_checkpoint(tmp_path / "half" / "spn_step000003.ckpt")
        assert mid.step == 3
        resumed = pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(spn_steps=6),
                               tmp_path / "resumed", resume=mid)
        assert params_equal(resumed.params, full.params)
        assert params_equal(resumed.velocities, full.velocities)

    def test_caption_weight_does_not_touch_spn_stage(self, tiny_ds, tmp_path):
        a = pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(caption_weight=1.0),
                         tmp_path / "a")
        b = pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(caption_weight=0.25),
                         tmp_path / "b")
        assert params_equal(a.params, b.params)

    def test_nonfinite_loss_aborts_run(self, tiny_ds, tmp_path, monkeypatch):
        # a NaN loss at any step must kill the run before a checkpoint lands
        real = JointModel.proposal_loss_for
        calls = {"n": 0}

        def poisoned(self, features, gts, rng, batch_size):
            calls["n"] += 1
            if calls["n"] == 3:
                return Tensor(np.array(float("nan")))
            return real(self, features, gts, rng, batch_size)

        monkeypatch.setattr(JointModel, "proposal_loss_for", poisoned)
        with pytest.raises(DivergenceError):
            pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(spn_steps=10), tmp_path)
        assert not (tmp_path / "spn.ckpt").exists()
        rows = (tmp_path / "train_log.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 2   # header + the two healthy steps

    def test_nonfinite_loss_detected(self):
        with pytest.raises(DivergenceError):
            training._check_finite(float("nan"), "spn", 3)
        with pytest.raises(DivergenceError):
            training._check_finite(float("inf"), "joint", 0)
        training._check_finite(1.25, "spn", 0)


@pytest.fixture(scope="module")
def spn_ckpt(tiny_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("spn")
    return pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(), out)


@pytest.fixture(scope="module")
def stage2(tiny_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage2")
    spn = pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(), out)
    dump = extract_gt_features(spn, tiny_ds, out / "feat.bin")
    vocab = build_vocab(tiny_ds, 1)
    return spn, dump, vocab, out


@pytest.fixture(scope="module")
def pretrained(tiny_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("joint_setup")
    spn = pretrain_spn(tiny_ds, tiny_model_cfg(), tiny_train_cfg(spn_steps=8), out)
    dump = extract_gt_features(spn, tiny_ds, out / "feat.bin")
    vocab = build_vocab(tiny_ds, 1)
    capt = pretrain_captioner(dump, vocab, tiny_model_cfg(),
                              tiny_train_cfg(captioner_epochs=2), out)
    return spn, capt


class TestFeatureExtraction:
    def test_dump_covers_every_gt_segment(self, spn_ckpt, tiny_ds, tmp_path):
        dump = extract_gt_features(spn_ckpt, tiny_ds, tmp_path / "feat.bin")
        n_gt = sum(len(tiny_ds.segments(v)) for v in tiny_ds.video_ids)
        assert len(dump.records) == n_gt
        assert set(dump.contexts) == set(tiny_ds.video_ids)
        assert all(r.vector.shape == (spn_ckpt.model_config.fc_dim,) for r in dump.records)

    def test_records_sorted_by_end_within_video(self, spn_ckpt, tiny_ds, tmp_path):
        dump = extract_gt_features(spn_ckpt, tiny_ds, tmp_path / "feat.bin")
        for vid in tiny_ds.video_ids:
            ends = [r.segment.end for r in dump.records if r.video_id == vid]
            assert ends == sorted(ends)

    def test_dump_roundtrips_through_disk(self, spn_ckpt, tiny_ds, tmp_path):
        dump = extract_gt_features(spn_ckpt, tiny_ds, tmp_path / "feat.bin")
        back = pooling.load_dump(tmp_path / "feat.bin")
        assert back.vocab_crc == dump.vocab_crc
        assert len(back.records) == len(dump.records)
        assert all(np.array_equal(a.vector, b.vector)
                   for a, b in zip(back.records, dump.records))
        assert all(a.token_ids == b.token_ids for a, b in zip(back.records, dump.records))


class TestCaptionPretraining:
    def test_loss_decreases(self, stage2, tmp_path):
        _, dump, vocab, _ = stage2
        tcfg = tiny_train_cfg(captioner_epochs=100, lr_captioner=0.7)
        ckpt = pretrain_captioner(dump, vocab, tiny_model_cfg(), tcfg, tmp_path)
        rows = (tmp_path / "train_log.csv").read_text().strip().splitlines()[1:]
        losses = [float(r.split(",")[3]) for r in rows]
        assert losses[-1] < 0.5 * losses[0]
        assert ckpt.stage == "captioner"

    def test_vocab_crc_mismatch_rejected(self, stage2, tmp_path):
        _, dump, _, _ = stage2
        other = captioner.Vocabulary(["zzz"])
        with pytest.raises(ContractError):
            pretrain_captioner(dump, other, tiny_model_cfg(), tiny_train_cfg(), tmp_path)

    def test_epoch_covers_every_record_once(self, stage2, monkeypatch, tmp_path):
        _, dump, vocab, _ = stage2
        seen: list[int] = []
        real = training._caption_batch_loss

        def spy(dump_, chosen, by_video, position, contexts, model):
            seen.extend(chosen)
            return real(dump_, chosen, by_video, position, contexts, model)

        monkeypatch.setattr(training, "_caption_batch_loss", spy)
        pretrain_captioner(dump, vocab, tiny_model_cfg(), tiny_train_cfg(captioner_epochs=1),
                           tmp_path)
        assert sorted(seen) == list(range(len(dump.records)))

    def test_shuffle_changes_batch_order_but_not_coverage(self, stage2, monkeypatch, tmp_path):
        _, dump, vocab, _ = stage2
        orders = {}
        real = training._caption_batch_loss
        for flag in (True, False):
            seen: list[int] = []
            monkeypatch.setattr(
                training, "_caption_batch_loss",
                lambda d, chosen, bv, pos, ctx, m, _s=seen: (_s.extend(chosen),
                                                             real(d, chosen, bv, pos, ctx, m))[1])
            pretrain_captioner(dump, vocab, tiny_model_cfg(),
                               tiny_train_cfg(captioner_epochs=1, shuffle_captions=flag),
                               tmp_path / f"s{flag}")
            orders[flag] = list(seen)
        assert sorted(orders[True]) == sorted(orders[False])
        assert orders[False] == list(range(len(dump.records)))
        assert orders[True] != orders[False]

    def test_ablated_config_trains_without_controller(self, stage2, tmp_path):
        _, dump, vocab, _ = stage2
        mcfg = tiny_model_cfg(use_context=False)
        ckpt = pretrain_captioner(dump, vocab, mcfg, tiny_train_cfg(), tmp_path)
        base = pretrain_captioner(dump, vocab, tiny_model_cfg(use_context=False),
                                  tiny_train_cfg(), tmp_path / "again")
        # controller weights exist but stay at init when context is off
        init = JointModel.init(ckpt.model_config, tiny_train_cfg().seed)
        for name in ckpt.params:
            if name.startswith("ctrl/"):
                assert np.array_equal(ckpt.params[name], init.params[name].data)
        assert params_equal(ckpt.params, base.params)


class TestJointTraining:
    def test_requires_matching_stages(self, pretrained, tiny_ds, tmp_path):
        spn, capt = pretrained
        with pytest.raises(ContractError):
            train_joint(capt, capt, tiny_ds, tiny_train_cfg(), tmp_path)
        with pytest.raises(ContractError):
            train_joint(spn, spn, tiny_ds, tiny_train_cfg(), tmp_path)

    def test_starts_from_merged_parameters(self, pretrained, tiny_ds, tmp_path,
                                           monkeypatch):
        spn, capt = pretrained
        captured = {}
        orig_init = training.JointModel.__init__

        def spy(self, cfg, params):
            if not captured:
                captured.update({k: v.data.copy() for k, v in params.items()})
            orig_init(self, cfg, params)

        monkeypatch.setattr(training.JointModel, "__init__", spy)
        train_joint(spn, capt, tiny_ds, tiny_train_cfg(joint_steps=1), tmp_path)
        for name, arr in captured.items():
            src = capt.params if is_caption_param(name) else spn.params
            assert np.array_equal(arr, src[name]), name

    def test_both_loss_terms_logged_and_finite(self, pretrained, tiny_ds, tmp_path):
        spn, capt = pretrained
        train_joint(spn, capt, tiny_ds, tiny_train_cfg(joint_steps=4), tmp_path)
        rows = (tmp_path / "train_log.csv").read_text().strip().splitlines()[1:]
        assert len(rows) == 4
        for r in rows:
            stage, step, lp, lc, lt = r.split(",")
            assert stage == "joint"
            assert math.isfinite(float(lp)) and math.isfinite(float(lc))
            assert math.isclose(float(lt), float(lp) + float(lc), rel_tol=1e-12)

    def test_resume_equals_uninterrupted(self, pretrained, tiny_ds, tmp_path):
        spn, capt = pretrained
        full = train_joint(spn, capt, tiny_ds, tiny_train_cfg(joint_steps=4),
                           tmp_path / "full")
        train_joint(spn, capt, tiny_ds, tiny_train_cfg(joint_steps=4, checkpoint_every=2),
                    tmp_path / "half")
        mid = load_checkpoint(tmp_path / "half" / "joint_step000002.ckpt")
        resumed = train_joint(spn, capt, tiny_ds, tiny_train_cfg(joint_steps=4),
                              tmp_path / "resumed", resume=mid)
        assert params_equal(resumed.params, full.params)

    def test_freeze_encoder_keeps_conv_weights(self, pretrained, tiny_ds, tmp_path):
        spn, capt = pretrained
        ckpt = train_joint(spn, capt, tiny_ds,
                           tiny_train_cfg(joint_steps=3, freeze_encoder=True), tmp_path)
        for name in ckpt.params:
            if name.startswith("enc/"):
                assert np.array_equal(ckpt.params[name], spn.params[name]), name
            elif name.startswith("prop/"):
                assert not np.array_equal(ckpt.params[name], spn.params[name]), name

    def test_caption_gradient_reaches_first_conv(self, pretrained, tiny_ds):
        # the joint graph backpropagates the caption loss into the encoder
        spn, capt = pretrained
        mcfg = capt.model_config
        merged = {name: Tensor((capt.params if is_caption_param(name)
                                else spn.params)[name].copy(), requires_grad=True)
                  for name in spn.params}
        model = JointModel(mcfg, merged)
        vid = tiny_ds.video_ids[0]
        video = tiny_ds.load_video(vid)
        ann = training.annotation_for(tiny_ds, vid, capt.vocabulary(), mcfg.max_caption_len)
        features = model.encode(video)
        loss = model.caption_loss_for(features, ann, video)
        ad.backward(loss)
        g = model.params["enc/conv1/w"].grad
        assert g is not None and float(np.abs(g).max()) > 0

    def test_joint_lr_scale_bound(self):
        with pytest.raises(ContractError):
            TrainConfig(joint_lr_scale=1.0)

    def test_vocab_disagreement_rejected(self, pretrained, tiny_ds, tmp_path):
        spn, capt = pretrained
        hacked = Checkpoint(capt.stage, capt.step, capt.model_config, capt.train_config,
                            capt.vocab_tokens[:-1], capt.params, capt.velocities)
        with pytest.raises(ContractError):
            train_joint(spn, hacked, tiny_ds, tiny_train_cfg(), tmp_path)
