"""Whole-model assembly: configuration, parameter init, and loss wiring."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import captioner, encoder, pooling, proposals
from .autodiff import ContractError, Tensor
from .proposals import AnchorGrid, Segment


def dense_init(in_dim: int, out_dim: int, rng: np.random.Generator):
    """Uniform fan-in weight matrix (in, out) and zero bias."""
    bound = 1.0 / np.sqrt(in_dim)
    w = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True)
    return w, b


def conv_init(out_ch: int, in_ch: int, kernel: int, rng: np.random.Generator):
    """Uniform fan-in conv kernel (out, in, k, k, k) and zero bias."""
    fan_in = in_ch * kernel ** 3
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel, kernel)),
               requires_grad=True)
    b = Tensor(np.zeros(out_ch), requires_grad=True)
    return w, b


@dataclass
class ModelConfig:
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 32, 32])
    anchor_scales: list[float] = field(default_factory=lambda: [1, 2, 3, 4, 6, 8, 12, 16])
    proposal_hidden: int = 32
    pool_bins: int = 4
    fc_dim: int = 128
    embed_dim: int = 32
    controller_dim: int = 8
    captioner_hidden: int = 64
    max_caption_len: int = 16
    vocab_size: int = 0  # filled in once the vocabulary is built
    use_context: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Full-scale preset: 36 anchor scales and the wide layer sizes used for real
# footage (3 fps features over 768-frame windows at 112x112).
FULL_SCALE = ModelConfig(
    encoder_channels=[16, 32, 32, 512],
    anchor_scales=[1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32, 40, 48, 56, 64,
                   66, 68, 70, 72, 74, 76, 78, 80, 82, 84, 86, 88, 90, 92, 94, 96],
    proposal_hidden=512,
    pool_bins=4,
    fc_dim=4096,
    embed_dim=512,
    controller_dim=20,
    captioner_hidden=512,
    max_caption_len=30,
)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Every trainable tensor, keyed by name, in a fixed creation order."""
    if cfg.vocab_size < len(captioner.RESERVED):
        raise ContractError("model config needs vocab_size set before init")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    params.update(encoder.init_encoder_params(cfg.encoder_channels, rng))
    params.update(proposals.init_proposal_params(
        cfg.encoder_channels[-1], cfg.proposal_hidden, len(cfg.anchor_scales), rng))
    params.update(pooling.init_pool_params(cfg.encoder_channels[-1], cfg.pool_bins,
                                           cfg.fc_dim, rng))
    params.update(captioner.init_caption_params(
        cfg.vocab_size, cfg.embed_dim, cfg.fc_dim, cfg.controller_dim,
        cfg.captioner_hidden, rng))
    return params


CAPTION_PARAM_PREFIXES = ("cap/", "ctrl/", "dec")


def is_caption_param(name: str) -> bool:
    return name.startswith(CAPTION_PARAM_PREFIXES)


def sort_by_end_time(segments: list[Segment]) -> list[int]:
    """Indices of segments in the decode order: ascending end, then start."""
    return sorted(range(len(segments)), key=lambda i: (segments[i].end, segments[i].start, i))


@dataclass
class VideoAnnotation:
    video_id: str
    duration: float
    segments: list[Segment]            # seconds
    captions: list[list[int]]          # padded token ids, aligned with segments


class JointModel:
    """Binds parameters to the forward paths used in training and inference."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "JointModel":
        return cls(cfg, init_params(cfg, seed))

    def encode(self, video: encoder.VideoTensor) -> Tensor:
        return encoder.encode(video, self.params)

    def grid_for(self, features: Tensor) -> AnchorGrid:
        return AnchorGrid(self.cfg.anchor_scales, features.shape[1])

    def proposal_outputs(self, features: Tensor):
        return proposals.proposal_forward(features, self.params)

    def segment_feature(self, features: Tensor, segment: Segment) -> Tensor:
        return pooling.pooled_feature(features, segment, self.cfg.pool_bins, self.params)

    def context(self, features: Tensor) -> Tensor:
        return pooling.context_feature(features, self.cfg.pool_bins, self.params)

    def proposal_loss_for(self, features: Tensor, gts: list[Segment],
                          rng: np.random.Generator, batch_size: int) -> Tensor:
        grid = self.grid_for(features)
        labels = proposals.assign_labels(grid, gts)
        batch = proposals.sample_minibatch(labels, batch_size, rng)
        scores, offsets = self.proposal_outputs(features)
        return proposals.proposal_loss(scores, offsets, grid, batch)

    def caption_loss_for(self, features: Tensor, ann: VideoAnnotation,
                         video: encoder.VideoTensor) -> Tensor:
        """Teacher-forced caption loss over the video's ground-truth segments."""
        order = sort_by_end_time(ann.segments)
        feats = []
        for i in order:
            seg = ann.segments[i]
            seg_ts = Segment.from_bounds(video.seconds_to_timesteps(seg.start),
                                         video.seconds_to_timesteps(seg.end))
            feats.append(self.segment_feature(features, seg_ts))
        stacked = ad.concat(feats, axis=0)
        caps = np.array([ann.captions[i] for i in order], dtype=np.int64)
        if self.cfg.use_context:
            ctx = self.context(features)
            histories = [None] + [ann.captions[i] for i in order[:-1]]
            states = captioner.controller_states(histories, ctx, self.params)
            ctrl = ad.concat(states, axis=0)
        else:
            ctrl = Tensor(np.zeros((len(order), self.cfg.controller_dim)))
        return captioner.caption_loss(stacked, ctrl, caps, self.params)

    def total_loss(self, video: encoder.VideoTensor, ann: VideoAnnotation,
                   rng: np.random.Generator, batch_size: int,
                   caption_weight: float) -> tuple[Tensor, float, float]:
        """Joint objective on one video; returns (loss, proposal part, caption part)."""
        features = self.encode(video)
        gts_ts = [Segment.from_bounds(video.seconds_to_timesteps(s.start),
                                      video.seconds_to_timesteps(s.end))
                  for s in ann.segments]
        l_prop = self.proposal_loss_for(features, gts_ts, rng, batch_size)
        l_cap = self.caption_loss_for(features, ann, video)
        total = l_prop + l_cap * caption_weight
        return total, l_prop.item(), l_cap.item()

    def propose(self, features: Tensor, nms_threshold: float,
                keep_top: int | None) -> list[Segment]:
        """Decoded, clipped, suppressed proposals in feature timesteps."""
        scores, offsets = self.proposal_outputs(features)
        grid = self.grid_for(features)
        cands = proposals.predicted_segments(scores, offsets, grid, float(features.shape[1]))
        return proposals.nms(cands, nms_threshold, keep_top)

    def describe(self, features: Tensor, segs: list[Segment]) -> list[list[int]]:
        """Greedy captions for proposals given in feature timesteps.

        Returns captions aligned with the input order, decoded in ascending
        end-time order so each sentence sees the previously decoded one.
        """
        order = sort_by_end_time(segs)
        feats = [self.segment_feature(features, segs[i]) for i in order]
        ctx = self.context(features)
        decoded = captioner.decode_greedy(feats, ctx, self.params, self.cfg.max_caption_len,
                                          use_context=self.cfg.use_context)
        out: list[list[int]] = [[] for _ in segs]
        for pos, i in enumerate(order):
            out[i] = decoded[pos]
        return out
