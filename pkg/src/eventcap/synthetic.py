"""Synthetic moving-motif corpus with history-dependent captions.

Each video is a noisy gray canvas into which 2..3 timed events are injected.
An event shows one motif (a colored shape translating in a fixed direction)
and carries a caption from a tiny grammar.  The first event reads "the
<color> <shape> moves <direction>"; later events are prefixed with "then",
and a repeated motif collapses to "then the same <shape> moves <direction>",
so a correct captioner must remember what it said before.  Generation is a
pure function of the config, and a built-in audit re-checks the guarantees
on the written files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .encoder import TEMPORAL_STRIDE, VideoTensor
from .proposals import Segment
from . import store

COLORS = {
    "red": (0.95, 0.10, 0.10),
    "green": (0.10, 0.95, 0.10),
    "blue": (0.10, 0.10, 0.95),
    "yellow": (0.95, 0.95, 0.10),
}
SHAPES = ("blob", "bar", "checker")
DIRECTIONS = {
    "left": (0.0, -1.0),
    "right": (0.0, 1.0),
    "up": (-1.0, 0.0),
    "down": (1.0, 0.0),
}
SPEED = 0.15          # pixels per frame
BRIGHTNESS = 0.95
BACKGROUND = 0.5


@dataclass(frozen=True)
class MotifSpec:
    shape: str
    color: str
    direction: str


@dataclass
class GenConfig:
    videos: int = 20
    duration_frames: int = 192      # long enough that mid-video events sit
    height: int = 16                # outside the encoder's edge effects
    width: int = 16
    frame_rate: float = 8.0
    num_motifs: int = 4
    min_events: int = 2
    max_events: int = 3
    min_event_len: int = 3          # feature timesteps
    max_event_len: int = 12
    margin_timesteps: int = 1
    overlap_prob: float = 0.25
    repeat_prob: float = 0.3
    noise_sigma: float = 0.02
    min_history_fraction: float = 0.10
    seed: int = 1234

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


def caption_for(motif: MotifSpec, prev: MotifSpec | None) -> str:
    if prev is None:
        return f"the {motif.color} {motif.shape} moves {motif.direction}"
    if motif == prev:
        return f"then the same {motif.shape} moves {motif.direction}"
    return f"then the {motif.color} {motif.shape} moves {motif.direction}"


def oracle_caption(motifs: list[MotifSpec], t: int) -> str:
    """The unique correct caption of event t given the full motif history."""
    if not 0 <= t < len(motifs):
        raise ContractError(f"event index {t} outside sequence of {len(motifs)}")
    return caption_for(motifs[t], motifs[t - 1] if t > 0 else None)


def parse_caption(text: str, motifs: list[MotifSpec]) -> bool:
    """True when ``text`` is a well-formed sentence over the motif table."""
    words = text.split()
    if words[:1] == ["then"]:
        words = words[1:]
    if len(words) == 5 and words[0] == "the" and words[1] in COLORS:
        color, shape, verb, direction = words[1], words[2], words[3], words[4]
        return (verb == "moves" and shape in SHAPES and direction in DIRECTIONS
                and any(m == MotifSpec(shape, color, direction) for m in motifs))
    if len(words) == 5 and words[:2] == ["the", "same"]:
        shape, verb, direction = words[2], words[3], words[4]
        return (verb == "moves" and shape in SHAPES and direction in DIRECTIONS
                and any(m.shape == shape and m.direction == direction for m in motifs))
    return False


# ---------------------------------------------------------------------------
# rendering


def _pattern_mask(shape: str, center_r: float, center_c: float, h: int, w: int) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    dr = rr - center_r
    dc = cc - center_c
    if shape == "blob":
        return dr * dr + dc * dc <= 9.0
    if shape == "bar":
        return (np.abs(dr) <= 1.5) & (np.abs(dc) <= 4.0)
    if shape == "checker":
        inside = (np.abs(dr) <= 4.0) & (np.abs(dc) <= 4.0)
        cells = (np.floor(dr / 2.0) + np.floor(dc / 2.0)).astype(int) % 2 == 0
        return inside & cells
    raise ContractError(f"unknown shape {shape!r}")


def render_event(canvas: np.ndarray, motif: MotifSpec, frame_lo: int, frame_hi: int,
                 jitter: tuple[float, float]) -> None:
    """Draw ``motif`` translating across frames [frame_lo, frame_hi) in place."""
    _, _, h, w = canvas.shape
    n = frame_hi - frame_lo
    vr, vc = DIRECTIONS[motif.direction]
    # start opposite the motion so the path stays centered in the frame
    r0 = h / 2.0 - vr * SPEED * n / 2.0 + jitter[0]
    c0 = w / 2.0 - vc * SPEED * n / 2.0 + jitter[1]
    color = COLORS[motif.color]
    for f in range(n):
        r = float(np.clip(r0 + vr * SPEED * f, 3.5, h - 4.5))
        c = float(np.clip(c0 + vc * SPEED * f, 3.5, w - 4.5))
        mask = _pattern_mask(motif.shape, r, c, h, w)
        for ch in range(3):
            canvas[ch, frame_lo + f][mask] = color[ch] * BRIGHTNESS


def render_video(layout: "VideoLayout", cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    data = np.full((3, cfg.duration_frames, cfg.height, cfg.width), BACKGROUND)
    for (lo_ts, hi_ts), motif, jitter in zip(layout.events, layout.motifs, layout.jitters):
        render_event(data, motif, lo_ts * TEMPORAL_STRIDE, hi_ts * TEMPORAL_STRIDE, jitter)
    data += rng.normal(0.0, cfg.noise_sigma, size=data.shape)
    return np.clip(data, 0.0, 1.0)


# ---------------------------------------------------------------------------
# corpus layout


@dataclass
class VideoLayout:
    video_id: str
    events: list[tuple[int, int]]        # [lo, hi) in feature timesteps
    motifs: list[MotifSpec]
    jitters: list[tuple[float, float]]


def _sample_events(cfg: GenConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    duration_ts = cfg.duration_frames // TEMPORAL_STRIDE
    usable = duration_ts - 2 * cfg.margin_timesteps
    count = int(rng.integers(cfg.min_events, cfg.max_events + 1))
    count = max(cfg.min_events, min(count, usable // cfg.min_event_len))
    if count * cfg.min_event_len > usable:
        raise ContractError("video too short for the requested event count")
    lengths = []
    for i in range(count):
        room = usable - sum(lengths) - cfg.min_event_len * (count - i - 1)
        cap = min(cfg.max_event_len, min(6, room))
        lengths.append(int(rng.integers(cfg.min_event_len, cap + 1)))
    slack = usable - sum(lengths)
    gaps = rng.multinomial(slack, np.full(count + 1, 1.0 / (count + 1)))
    events = []
    cursor = cfg.margin_timesteps
    for g, ln in zip(gaps, lengths):
        cursor += int(g)
        events.append((cursor, cursor + ln))
        cursor += ln
    for i in range(1, len(events)):
        if rng.uniform() < cfg.overlap_prob:
            lo_p, hi_p = events[i - 1]
            lo, hi = events[i]
            room = min(lo - lo_p - 1, hi - hi_p - 1)
            if room >= 1:
                shift = int(rng.integers(1, room + 1))
                events[i] = (lo - shift, hi - shift)
    return events


def _sample_motif_table(cfg: GenConfig, rng: np.random.Generator) -> list[MotifSpec]:
    combos = [MotifSpec(s, c, d) for s in SHAPES for c in COLORS for d in DIRECTIONS]
    idx = rng.choice(len(combos), size=cfg.num_motifs, replace=False)
    return [combos[int(i)] for i in idx]


def _sample_sequence(table: list[MotifSpec], count: int, repeat_prob: float,
                     rng: np.random.Generator) -> list[int]:
    seq = [int(rng.integers(len(table)))]
    for _ in range(count - 1):
        if rng.uniform() < repeat_prob:
            seq.append(seq[-1])
        else:
            others = [i for i in range(len(table)) if i != seq[-1]]
            seq.append(others[int(rng.integers(len(others)))])
    return seq


def _history_fraction(sequences: list[list[int]]) -> float:
    total = sum(len(s) for s in sequences)
    same = sum(1 for s in sequences for t in range(1, len(s)) if s[t] == s[t - 1])
    return same / total if total else 0.0


def _enforce_history_fraction(sequences: list[list[int]], minimum: float,
                              rng: np.random.Generator) -> None:
    """Force repeats at rng-chosen slots until 'same' captions reach the floor."""
    slots = [(v, t) for v, s in enumerate(sequences) for t in range(1, len(s))]
    order = rng.permutation(len(slots))
    for k in order:
        if _history_fraction(sequences) >= minimum:
            return
        v, t = slots[int(k)]
        sequences[v][t] = sequences[v][t - 1]
    if _history_fraction(sequences) < minimum:
        raise ContractError("cannot reach the requested history-dependent fraction")


# ---------------------------------------------------------------------------
# generation and the on-disk container

META_VERSION = 1


def generate(cfg: GenConfig, out_dir) -> "Dataset":
    """Write a complete dataset directory and return a handle to it."""
    if cfg.duration_frames % TEMPORAL_STRIDE:
        raise ContractError("duration_frames must be a multiple of the temporal stride")
    out = Path(out_dir)
    layout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    table = _sample_motif_table(cfg, layout_rng)
    events_per_video = [_sample_events(cfg, layout_rng) for _ in range(cfg.videos)]
    sequences = [_sample_sequence(table, len(ev), cfg.repeat_prob, layout_rng)
                 for ev in events_per_video]
    _enforce_history_fraction(sequences, cfg.min_history_fraction, layout_rng)

    annotations = {}
    meta_videos = {}
    sec_per_ts = TEMPORAL_STRIDE / cfg.frame_rate
    for idx in range(cfg.videos):
        vid = f"v{idx:04d}"
        motifs = [table[i] for i in sequences[idx]]
        video_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, idx]))
        jitters = [tuple(video_rng.uniform(-1.5, 1.5, size=2)) for _ in motifs]
        layout = VideoLayout(vid, events_per_video[idx], motifs, jitters)
        data = render_video(layout, cfg, video_rng)
        store.save_tensor_file(out / "videos" / f"{vid}.bin", data)
        annotations[vid] = {
            "duration": cfg.duration_frames / cfg.frame_rate,
            "timestamps": [[lo * sec_per_ts, hi * sec_per_ts] for lo, hi in layout.events],
            "sentences": [oracle_caption(motifs, t) for t in range(len(motifs))],
        }
        meta_videos[vid] = {
            "events": [list(e) for e in layout.events],
            "motifs": sequences[idx],
            "jitters": [list(j) for j in jitters],
        }
    store.atomic_write_json(out / "annotations.json", annotations)
    store.atomic_write_json(out / "meta.json", {
        "format_version": META_VERSION,
        "config": cfg.to_dict(),
        "motif_table": [asdict(m) for m in table],
        "videos": meta_videos,
    })
    ds = Dataset.open(out)
    report = self_audit(ds)
    if not report["ok"]:
        raise ContractError(f"generated corpus failed its own audit: {report}")
    return ds


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root: Path, annotations: dict, meta: dict):
        self.root = root
        self.annotations = annotations
        self.meta = meta
        self.frame_rate = float(meta["config"]["frame_rate"])
        self.video_ids = sorted(annotations)

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        ann_path = root / "annotations.json"
        meta_path = root / "meta.json"
        if not ann_path.exists() or not meta_path.exists():
            raise ContractError(f"{root} is not a dataset directory")
        with open(ann_path, "r", encoding="utf-8") as fh:
            annotations = json.load(fh)
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        return cls(root, annotations, meta)

    def load_video(self, video_id: str) -> VideoTensor:
        data = store.load_tensor_file(self.root / "videos" / f"{video_id}.bin")
        return VideoTensor(data, self.frame_rate, video_id)

    def sentences(self, video_id: str) -> list[str]:
        return list(self.annotations[video_id]["sentences"])

    def segments(self, video_id: str) -> list[Segment]:
        return [Segment.from_bounds(s, e)
                for s, e in self.annotations[video_id]["timestamps"]]

    def motif_table(self) -> list[MotifSpec]:
        return [MotifSpec(**m) for m in self.meta["motif_table"]]

    def motif_sequence(self, video_id: str) -> list[MotifSpec]:
        table = self.motif_table()
        return [table[i] for i in self.meta["videos"][video_id]["motifs"]]


def _motif_distances(table: list[MotifSpec], cfg: GenConfig) -> float:
    """Smallest pairwise mean-squared frame difference between clean renders."""
    clips = []
    frames = 4 * TEMPORAL_STRIDE
    for m in table:
        canvas = np.full((3, frames, cfg.height, cfg.width), BACKGROUND)
        render_event(canvas, m, 0, frames, (0.0, 0.0))
        clips.append(canvas)
    worst = np.inf
    for i in range(len(clips)):
        for j in range(i + 1, len(clips)):
            worst = min(worst, float(np.mean((clips[i] - clips[j]) ** 2)))
    return worst


MOTIF_MSE_FLOOR = 1e-3
MOTIF_CORRELATION_FLOOR = 0.5


def self_audit(ds: Dataset) -> dict:
    """Re-derive the corpus guarantees from the files on disk."""
    cfg = GenConfig.from_dict(ds.meta["config"])
    table = ds.motif_table()
    total = same = 0
    grammar_ok = True
    captions_match_oracle = True
    segments_ok = True
    correlation_min = np.inf
    for vid in ds.video_ids:
        ann = ds.annotations[vid]
        motifs = ds.motif_sequence(vid)
        if len(ann["timestamps"]) < 2:
            segments_ok = False
        for t, sentence in enumerate(ann["sentences"]):
            total += 1
            if not parse_caption(sentence, table):
                grammar_ok = False
            if sentence != oracle_caption(motifs, t):
                captions_match_oracle = False
            if t > 0 and "same" in sentence.split():
                same += 1
        video = ds.load_video(vid)
        for (s, e) in ann["timestamps"]:
            if not (0.0 <= s < e <= ann["duration"] + 1e-9):
                segments_ok = False
        info = ds.meta["videos"][vid]
        for (lo, hi), midx, jitter in zip(info["events"], info["motifs"], info["jitters"]):
            clean = np.full((3, (hi - lo) * TEMPORAL_STRIDE, cfg.height, cfg.width), BACKGROUND)
            render_event(clean, table[midx], 0, clean.shape[1], tuple(jitter))
            clip = video.data[:, lo * TEMPORAL_STRIDE:hi * TEMPORAL_STRIDE]
            a = (clip - BACKGROUND).ravel()
            b = (clean - BACKGROUND).ravel()
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            correlation_min = min(correlation_min,
                                  float(a @ b / denom) if denom > 0 else 0.0)
    history_fraction = same / total if total else 0.0
    motif_mse = _motif_distances(table, cfg)
    report = {
        "grammar_ok": grammar_ok,
        "captions_match_oracle": captions_match_oracle,
        "segments_ok": segments_ok,
        "history_fraction": history_fraction,
        "motif_correlation_min": correlation_min,
        "motif_mse_min": motif_mse,
    }
    report["ok"] = (grammar_ok and captions_match_oracle and segments_ok
                    and history_fraction >= cfg.min_history_fraction
                    and correlation_min >= MOTIF_CORRELATION_FLOOR
                    and motif_mse >= MOTIF_MSE_FLOOR)
    return report
