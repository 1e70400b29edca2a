"""Temporal segment geometry and the segment proposal head.

Segments live on the feature-timestep axis (one timestep = temporal_stride
input frames).  Anchors are placed at every feature timestep, centered on
the timestep midpoint, one per configured scale; the head predicts an
actionness score and a (center, log-length) offset pair per anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

POSITIVE_TIOU = 0.7
NEGATIVE_TIOU = 0.3


@dataclass(frozen=True)
class Segment:
    """Closed interval on the temporal axis, kept as center + length."""

    center: float
    length: float
    score: float | None = None

    def __post_init__(self):
        if not self.length > 0:
            raise ContractError(f"segment length must be positive, got {self.length}")

    @property
    def start(self) -> float:
        return self.center - self.length / 2.0

    @property
    def end(self) -> float:
        return self.center + self.length / 2.0

    @staticmethod
    def from_bounds(start: float, end: float, score: float | None = None) -> "Segment":
        return Segment((start + end) / 2.0, end - start, score)


def tiou(a: Segment, b: Segment) -> float:
    """Temporal intersection over union of two segments."""
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


def encode_offsets(anchor: Segment, target: Segment) -> tuple[float, float]:
    """Relative offsets that map ``anchor`` onto ``target``."""
    dc = (target.center - anchor.center) / anchor.length
    dl = math.log(target.length / anchor.length)
    return dc, dl


def decode_offsets(anchor: Segment, dc: float, dl: float,
                   score: float | None = None) -> Segment:
    """Inverse of encode_offsets."""
    return Segment(anchor.center + dc * anchor.length, anchor.length * math.exp(dl), score)


class AnchorGrid:
    """All anchors for a feature map of ``num_steps`` timesteps.

    Anchor index r * num_steps + tau denotes scale r at timestep tau; each
    anchor is centered on the timestep midpoint tau + 0.5.
    """

    def __init__(self, scales, num_steps: int):
        self.scales = [float(s) for s in scales]
        if not self.scales or min(self.scales) <= 0:
            raise ContractError("anchor scales must be positive")
        if num_steps < 1:
            raise ContractError("anchor grid needs at least one timestep")
        self.num_steps = int(num_steps)
        self.anchors = [Segment(tau + 0.5, scale)
                        for scale in self.scales
                        for tau in range(self.num_steps)]

    def __len__(self):
        return len(self.anchors)


IGNORE = -1
NEGATIVE = 0
POSITIVE = 1


@dataclass(frozen=True)
class AnchorLabel:
    anchor_index: int
    label: int
    target_dc: float = 0.0
    target_dl: float = 0.0


def assign_labels(grid: AnchorGrid, gts: list[Segment]) -> list[AnchorLabel]:
    """Label every anchor against the ground-truth segments.

    Positive: tIoU > 0.7 with any gt, or highest-tIoU anchor for some gt
    (ties to the lowest anchor index).  Negative: best tIoU < 0.3 and not
    positive.  Everything else is ignored.  Positives carry regression
    targets against their own best-tIoU gt (ties to the lowest gt index).
    """
    if not gts:
        raise ContractError("assign_labels needs at least one ground-truth segment")
    n = len(grid.anchors)
    overlap = np.zeros((n, len(gts)))
    for i, anchor in enumerate(grid.anchors):
        for j, gt in enumerate(gts):
            overlap[i, j] = tiou(anchor, gt)
    best = overlap.max(axis=1)
    best_gt = overlap.argmax(axis=1)  # lowest gt index wins ties
    positive = best > POSITIVE_TIOU
    for j in range(len(gts)):
        positive[int(overlap[:, j].argmax())] = True  # lowest anchor index wins ties
    labels = []
    for i, anchor in enumerate(grid.anchors):
        if positive[i]:
            dc, dl = encode_offsets(anchor, gts[int(best_gt[i])])
            labels.append(AnchorLabel(i, POSITIVE, dc, dl))
        elif best[i] < NEGATIVE_TIOU:
            labels.append(AnchorLabel(i, NEGATIVE))
        else:
            labels.append(AnchorLabel(i, IGNORE))
    return labels


def sample_minibatch(labels: list[AnchorLabel], size: int,
                     rng: np.random.Generator) -> list[AnchorLabel]:
    """Draw a 1:1 positive/negative minibatch of ``size`` anchor labels.

    ceil(size/2) positives and the remainder negatives; either pool is
    sampled with replacement only when it is smaller than its quota.
    """
    positives = [l for l in labels if l.label == POSITIVE]
    negatives = [l for l in labels if l.label == NEGATIVE]
    if not positives or not negatives:
        raise ContractError("minibatch needs both positive and negative anchors")
    n_pos = (size + 1) // 2
    n_neg = size - n_pos

    def draw(pool, count):
        idx = rng.choice(len(pool), size=count, replace=len(pool) < count)
        return [pool[int(i)] for i in idx]

    return draw(positives, n_pos) + draw(negatives, n_neg)


# ---------------------------------------------------------------------------
# head network


def init_proposal_params(feat_channels: int, hidden: int, num_scales: int,
                         rng: np.random.Generator) -> dict[str, Tensor]:
    from .model import conv_init
    params = {}
    params["prop/conv1/w"], params["prop/conv1/b"] = conv_init(hidden, feat_channels, 3, rng)
    params["prop/conv2/w"], params["prop/conv2/b"] = conv_init(hidden, hidden, 3, rng)
    params["prop/score/w"], params["prop/score/b"] = conv_init(num_scales, hidden, 1, rng)
    params["prop/offset/w"], params["prop/offset/b"] = conv_init(2 * num_scales, hidden, 1, rng)
    return params


def proposal_forward(features: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Score and offset maps from a (C, T, h, w) feature volume.

    Returns scores (R, T) after sigmoid, and offsets (2R, T) where row 2r is
    the center offset and row 2r+1 the log-length offset of scale r.
    """
    x = ad.relu(ad.conv3d(features, params["prop/conv1/w"], params["prop/conv1/b"], padding=1))
    x = ad.relu(ad.conv3d(x, params["prop/conv2/w"], params["prop/conv2/b"], padding=1))
    _, t, h, w = x.shape
    x = ad.maxpool3d(x, (1, h, w))  # collapse the spatial extent
    scores = ad.sigmoid(ad.conv3d(x, params["prop/score/w"], params["prop/score/b"]))
    offsets = ad.conv3d(x, params["prop/offset/w"], params["prop/offset/b"])
    r = scores.shape[0]
    return ad.reshape(scores, (r, t)), ad.reshape(offsets, (2 * r, t))


def proposal_loss(scores: Tensor, offsets: Tensor, grid: AnchorGrid,
                  batch: list[AnchorLabel]) -> Tensor:
    """Mean over the minibatch of score cross-entropy plus, for positives,
    the smooth-L1 penalty on both offset components."""
    if not batch:
        raise ContractError("proposal_loss needs a non-empty minibatch")
    t = grid.num_steps
    score_idx, targets = [], []
    for entry in batch:
        score_idx.append(entry.anchor_index)
        targets.append(float(entry.label))
    picked = ad.take(scores, score_idx)
    loss = ad.tensor_sum(ad.binary_cross_entropy(picked, np.array(targets)))

    pos = [e for e in batch if e.label == POSITIVE]
    if pos:
        off_idx, off_targets = [], []
        for e in pos:
            r, tau = divmod(e.anchor_index, t)
            off_idx += [(2 * r) * t + tau, (2 * r + 1) * t + tau]
            off_targets += [e.target_dc, e.target_dl]
        diff = ad.take(offsets, off_idx) - ad.Tensor(np.array(off_targets))
        loss = loss + ad.tensor_sum(ad.smooth_l1(diff))
    return loss / len(batch)


def predicted_segments(scores: Tensor, offsets: Tensor, grid: AnchorGrid,
                       extent: float) -> list[Segment]:
    """Decode every anchor's prediction, clipped to [0, extent]; drops
    segments that leave no support inside the extent."""
    s = scores.data
    o = offsets.data
    out = []
    for r in range(len(grid.scales)):
        for tau in range(grid.num_steps):
            anchor = grid.anchors[r * grid.num_steps + tau]
            seg = decode_offsets(anchor, o[2 * r, tau], o[2 * r + 1, tau], float(s[r, tau]))
            start = max(0.0, seg.start)
            end = min(extent, seg.end)
            if end - start > 1e-9:
                out.append(Segment.from_bounds(start, end, seg.score))
    return out


def nms(segments: list[Segment], threshold: float = 0.7,
        keep_top: int | None = None) -> list[Segment]:
    """Greedy non-maximum suppression by descending score (ties keep input
    order); suppresses segments with tIoU > threshold against a kept one."""
    for s in segments:
        if s.score is None:
            raise ContractError("nms needs scored segments")
    order = sorted(range(len(segments)), key=lambda i: (-segments[i].score, i))
    kept: list[Segment] = []
    for i in order:
        if keep_top is not None and len(kept) >= keep_top:
            break
        cand = segments[i]
        if all(tiou(cand, k) <= threshold for k in kept):
            kept.append(cand)
    return kept
