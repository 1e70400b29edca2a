"""Staged training: proposal pretraining, caption pretraining on frozen
segment features, then joint fine-tuning of the whole graph.

Every random draw comes from a generator derived from (seed, stage, purpose,
step), so any step's behavior is a pure function of the config; resuming
from a checkpoint therefore reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import captioner as cap
from . import encoder, pooling
from .autodiff import ContractError, Tensor
from .model import JointModel, ModelConfig, VideoAnnotation, is_caption_param, sort_by_end_time
from .proposals import Segment
from .store import atomic_write
from .synthetic import Dataset

STAGE_SPN = "spn"
STAGE_CAPTIONER = "captioner"
STAGE_JOINT = "joint"
_STAGE_CODE = {STAGE_SPN: 1, STAGE_CAPTIONER: 2, STAGE_JOINT: 3}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    seed: int = 0
    minibatch_anchors: int = 32
    caption_batch: int = 32
    spn_steps: int = 240
    captioner_epochs: int = 40
    joint_steps: int = 120
    lr_spn: float = 0.05
    lr_captioner: float = 0.2
    joint_lr_scale: float = 0.1      # joint rate = pretrain rate * this
    momentum: float = 0.9
    grad_clip: float = 5.0
    caption_weight: float = 1.0
    vocab_min_count: int = 1
    freeze_encoder: bool = False
    shuffle_captions: bool = True
    checkpoint_every: int = 0        # extra snapshots; final is always written

    def __post_init__(self):
        if not 0 < self.joint_lr_scale < 1:
            raise ContractError("joint_lr_scale must keep the joint rate below pretraining")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _stream(seed: int, stage: str, purpose: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STAGE_CODE[stage], purpose, step]))


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def sgd_step(params: dict[str, Tensor], velocities: dict[str, np.ndarray],
             lr_for, momentum: float, skip=lambda name: False) -> None:
    """Classical momentum: v <- mu*v + g, p <- p - lr*v.

    ``lr_for(name)`` supplies the per-parameter rate; parameters without a
    gradient this step or matching ``skip`` are untouched.
    """
    for name, p in params.items():
        if p.grad is None or skip(name):
            continue
        v = velocities[name]
        v *= momentum
        v += p.grad
        p.data -= lr_for(name) * v


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"JEDN"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    step: int
    model_config: ModelConfig
    train_config: TrainConfig
    vocab_tokens: list[str]
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def vocabulary(self) -> cap.Vocabulary:
        return cap.Vocabulary(self.vocab_tokens)

    def tensors_for_training(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}

    def tensors_for_inference(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "rng": {"scheme": "derived", "seed": ckpt.train_config.seed, "step": ckpt.step},
        "config": {"model": ckpt.model_config.to_dict(),
                   "train": ckpt.train_config.to_dict()},
        "vocab": ckpt.vocab_tokens,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    entries = list(ckpt.params.items()) + [("opt/" + k, v) for k, v in ckpt.velocities.items()]
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.asarray(arr, dtype=np.float64).astype("<f8").tobytes())
    atomic_write(path, out.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    off = 16 + hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
        if name.startswith("opt/"):
            velocities[name[4:]] = arr
        else:
            params[name] = arr
    return Checkpoint(
        stage=header["stage"],
        step=header["step"],
        model_config=ModelConfig.from_dict(header["config"]["model"]),
        train_config=TrainConfig.from_dict(header["config"]["train"]),
        vocab_tokens=header["vocab"],
        params=params,
        velocities=velocities,
    )


def _snapshot(model: JointModel, velocities, stage, step, tcfg, vocab_tokens) -> Checkpoint:
    return Checkpoint(stage, step, model.cfg, tcfg, vocab_tokens,
                      {k: v.data.copy() for k, v in model.params.items()},
                      {k: v.copy() for k, v in velocities.items()})


class TrainLog:
    """CSV log of per-step losses: stage, step, proposal, caption, total."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh)
        if fresh:
            self._w.writerow(["stage", "step", "loss_proposal", "loss_caption", "loss_total"])

    def row(self, stage, step, l_prop, l_cap, l_total):
        fmt = lambda v: "" if v is None else repr(float(v))
        self._w.writerow([stage, step, fmt(l_prop), fmt(l_cap), fmt(l_total)])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _check_finite(value: float, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{stage} step {step}: loss is {value}")


def build_vocab(ds: Dataset, min_count: int) -> cap.Vocabulary:
    sentences = [s for vid in ds.video_ids for s in ds.sentences(vid)]
    return cap.Vocabulary.build(sentences, min_count)


def annotation_for(ds: Dataset, vid: str, vocab: cap.Vocabulary,
                   max_len: int) -> VideoAnnotation:
    segs = ds.segments(vid)
    caps = [cap.pad_caption(vocab.encode(cap.tokenize(s)), max_len)
            for s in ds.sentences(vid)]
    return VideoAnnotation(vid, ds.annotations[vid]["duration"], segs, caps)


# ---------------------------------------------------------------------------
# stage 1: proposal pretraining


def pretrain_spn(ds: Dataset, mcfg: ModelConfig, tcfg: TrainConfig, out_dir,
                 resume: Checkpoint | None = None) -> Checkpoint:
    out = Path(out_dir)
    vocab = build_vocab(ds, tcfg.vocab_min_count)
    mcfg.vocab_size = len(vocab)
    if resume is not None:
        if resume.stage != STAGE_SPN:
            raise ContractError(f"cannot resume {STAGE_SPN} from a {resume.stage} checkpoint")
        model = JointModel(resume.model_config, resume.tensors_for_training())
        velocities = {k: v.copy() for k, v in resume.velocities.items()}
        start = resume.step
        vocab = resume.vocabulary()
    else:
        model = JointModel.init(mcfg, tcfg.seed)
        velocities = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        start = 0
    log = TrainLog(out / "train_log.csv")
    ids = list(ds.video_ids)
    per_sec = ds.frame_rate / encoder.TEMPORAL_STRIDE
    gts_cache = {vid: [Segment.from_bounds(s.start * per_sec, s.end * per_sec)
                       for s in ds.segments(vid)] for vid in ids}
    try:
        for step in range(start, tcfg.spn_steps):
            epoch, pos = divmod(step, len(ids))
            perm = _stream(tcfg.seed, STAGE_SPN, 2, epoch).permutation(len(ids))
            vid = ids[int(perm[pos])]
            video = ds.load_video(vid)
            features = model.encode(video)
            rng = _stream(tcfg.seed, STAGE_SPN, 3, step)
            loss = model.proposal_loss_for(features, gts_cache[vid], rng,
                                           tcfg.minibatch_anchors)
            value = loss.item()
            _check_finite(value, STAGE_SPN, step)
            ad.zero_grad(model.params.values())
            ad.backward(loss)
            clip_gradients(model.params, tcfg.grad_clip)
            sgd_step(model.params, velocities, lambda name: tcfg.lr_spn, tcfg.momentum)
            log.row(STAGE_SPN, step, value, None, value)
            if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(out / f"spn_step{step + 1:06d}.ckpt",
                                _snapshot(model, velocities, STAGE_SPN, step + 1, tcfg,
                                          vocab.tokens[len(cap.RESERVED):]))
    finally:
        log.close()
    final = _snapshot(model, velocities, STAGE_SPN, tcfg.spn_steps, tcfg, vocab.tokens[len(cap.RESERVED):])
    save_checkpoint(out / "spn.ckpt", final)
    return final


# ---------------------------------------------------------------------------
# stage 2: frozen feature extraction + caption pretraining


def extract_gt_features(ckpt: Checkpoint, ds: Dataset, path) -> pooling.FeatureDump:
    model = JointModel(ckpt.model_config, ckpt.tensors_for_inference())
    vocab = ckpt.vocabulary()
    max_len = ckpt.model_config.max_caption_len
    records: list[pooling.FeatureRecord] = []
    contexts: dict[str, np.ndarray] = {}
    for vid in ds.video_ids:
        video = ds.load_video(vid)
        features = model.encode(video)
        ann = annotation_for(ds, vid, vocab, max_len)
        contexts[vid] = model.context(features).data[0].copy()
        for i in sort_by_end_time(ann.segments):
            seg = ann.segments[i]
            seg_ts = Segment.from_bounds(video.seconds_to_timesteps(seg.start),
                                         video.seconds_to_timesteps(seg.end))
            vec = model.segment_feature(features, seg_ts).data[0].copy()
            records.append(pooling.FeatureRecord(vid, seg_ts, vec, tuple(ann.captions[i])))
    dump = pooling.FeatureDump(records, contexts,
                               pooling.vocab_crc(vocab.tokens), ckpt.model_config.fc_dim)
    pooling.save_dump(path, dump)
    return dump


def _dump_batches(n_records: int, batch: int):
    spans = []
    for lo in range(0, n_records, batch):
        spans.append(range(lo, min(lo + batch, n_records)))
    return spans


def pretrain_captioner(dump: pooling.FeatureDump, vocab: cap.Vocabulary,
                       mcfg: ModelConfig, tcfg: TrainConfig, out_dir,
                       resume: Checkpoint | None = None) -> Checkpoint:
    if pooling.vocab_crc(vocab.tokens) != dump.vocab_crc:
        raise ContractError("feature dump was extracted under a different vocabulary")
    if dump.fc_dim != mcfg.fc_dim:
        raise ContractError(f"feature dump width {dump.fc_dim} does not match "
                            f"the configured fc_dim {mcfg.fc_dim}")
    out = Path(out_dir)
    mcfg.vocab_size = len(vocab)
    if resume is not None:
        if resume.stage != STAGE_CAPTIONER:
            raise ContractError(
                f"cannot resume {STAGE_CAPTIONER} from a {resume.stage} checkpoint")
        model = JointModel(resume.model_config, resume.tensors_for_training())
        velocities = {k: v.copy() for k, v in resume.velocities.items()}
        start = resume.step
    else:
        model = JointModel.init(mcfg, tcfg.seed)
        velocities = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        start = 0
    params = model.params

    # group records per video to rebuild ground-truth histories
    by_video: dict[str, list[int]] = {}
    for i, rec in enumerate(dump.records):
        by_video.setdefault(rec.video_id, []).append(i)
    position = {}
    for vid, idxs in by_video.items():
        for t, i in enumerate(idxs):
            position[i] = t
    contexts = {vid: Tensor(vec[None, :]) for vid, vec in dump.contexts.items()}

    n = len(dump.records)
    batches = _dump_batches(n, tcfg.caption_batch)
    total_steps = tcfg.captioner_epochs * len(batches)
    log = TrainLog(out / "train_log.csv")
    try:
        for step in range(start, total_steps):
            epoch, b = divmod(step, len(batches))
            if tcfg.shuffle_captions:
                perm = _stream(tcfg.seed, STAGE_CAPTIONER, 2, epoch).permutation(n)
            else:
                perm = np.arange(n)
            chosen = [int(perm[i]) for i in batches[b]]
            loss = _caption_batch_loss(dump, chosen, by_video, position, contexts, model)
            value = loss.item()
            _check_finite(value, STAGE_CAPTIONER, step)
            ad.zero_grad(params.values())
            ad.backward(loss)
            clip_gradients(params, tcfg.grad_clip)
            sgd_step(params, velocities, lambda name: tcfg.lr_captioner, tcfg.momentum)
            log.row(STAGE_CAPTIONER, step, None, value, value)
    finally:
        log.close()
    final = _snapshot(model, velocities, STAGE_CAPTIONER, total_steps, tcfg, vocab.tokens[len(cap.RESERVED):])
    save_checkpoint(out / "captioner.ckpt", final)
    return final


def _caption_batch_loss(dump: pooling.FeatureDump, chosen: list[int], by_video: dict,
                        position: dict, contexts: dict, model: JointModel) -> Tensor:
    params = model.params
    if model.cfg.use_context:
        needed: dict[str, int] = {}
        for i in chosen:
            vid = dump.records[i].video_id
            needed[vid] = max(needed.get(vid, -1), position[i])
        states: dict[str, list[Tensor]] = {}
        for vid, max_t in needed.items():
            idxs = by_video[vid]
            histories = [None] + [list(dump.records[j].token_ids) for j in idxs[:max_t]]
            states[vid] = cap.controller_states(histories, contexts[vid], params)
        rows = [states[dump.records[i].video_id][position[i]] for i in chosen]
        ctrl = ad.concat(rows, axis=0)
    else:
        ctrl = Tensor(np.zeros((len(chosen), model.cfg.controller_dim)))
    feats = Tensor(np.stack([dump.records[i].vector for i in chosen]))
    captions = np.array([dump.records[i].token_ids for i in chosen], dtype=np.int64)
    return cap.caption_loss(feats, ctrl, captions, params)


# ---------------------------------------------------------------------------
# stage 3: joint fine-tuning


def train_joint(spn_ckpt: Checkpoint, cap_ckpt: Checkpoint, ds: Dataset,
                tcfg: TrainConfig, out_dir, resume: Checkpoint | None = None) -> Checkpoint:
    if spn_ckpt.stage != STAGE_SPN or cap_ckpt.stage != STAGE_CAPTIONER:
        raise ContractError("joint training needs one proposal and one captioner checkpoint")
    if spn_ckpt.vocab_tokens != cap_ckpt.vocab_tokens:
        raise ContractError("pretraining checkpoints disagree on the vocabulary")
    out = Path(out_dir)
    if resume is not None:
        if resume.stage != STAGE_JOINT:
            raise ContractError(f"cannot resume {STAGE_JOINT} from a {resume.stage} checkpoint")
        mcfg = resume.model_config
        model = JointModel(mcfg, resume.tensors_for_training())
        velocities = {k: v.copy() for k, v in resume.velocities.items()}
        start = resume.step
    else:
        mcfg = cap_ckpt.model_config   # carries use_context for ablated runs
        merged = {name: Tensor((cap_ckpt.params if is_caption_param(name)
                                else spn_ckpt.params)[name].copy(), requires_grad=True)
                  for name in spn_ckpt.params}
        model = JointModel(mcfg, merged)
        velocities = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        start = 0
    vocab = cap_ckpt.vocabulary()
    log = TrainLog(out / "train_log.csv")
    ids = list(ds.video_ids)
    anns = {vid: annotation_for(ds, vid, vocab, mcfg.max_caption_len) for vid in ids}

    def lr_for(name: str) -> float:
        base = tcfg.lr_captioner if is_caption_param(name) else tcfg.lr_spn
        return base * tcfg.joint_lr_scale

    skip = (lambda name: name.startswith("enc/")) if tcfg.freeze_encoder else (lambda name: False)
    try:
        for step in range(start, tcfg.joint_steps):
            epoch, pos = divmod(step, len(ids))
            perm = _stream(tcfg.seed, STAGE_JOINT, 2, epoch).permutation(len(ids))
            vid = ids[int(perm[pos])]
            video = ds.load_video(vid)
            rng = _stream(tcfg.seed, STAGE_JOINT, 3, step)
            loss, l_prop, l_cap = model.total_loss(video, anns[vid], rng,
                                                   tcfg.minibatch_anchors, tcfg.caption_weight)
            value = loss.item()
            _check_finite(value, STAGE_JOINT, step)
            ad.zero_grad(model.params.values())
            ad.backward(loss)
            clip_gradients(model.params, tcfg.grad_clip)
            sgd_step(model.params, velocities, lr_for, tcfg.momentum, skip)
            log.row(STAGE_JOINT, step, l_prop, l_cap, value)
            if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(out / f"joint_step{step + 1:06d}.ckpt",
                                _snapshot(model, velocities, STAGE_JOINT, step + 1, tcfg,
                                          vocab.tokens[len(cap.RESERVED):]))
    finally:
        log.close()
    final = _snapshot(model, velocities, STAGE_JOINT, tcfg.joint_steps, tcfg, vocab.tokens[len(cap.RESERVED):])
    save_checkpoint(out / "joint.ckpt", final)
    return final
