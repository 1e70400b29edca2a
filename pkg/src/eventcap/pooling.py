"""Fixed-size pooling of variable-length segments out of a feature volume.

A segment covering an arbitrary stretch of feature timesteps is reduced to
(C, bins) by splitting its extent into ``bins`` temporal slots and taking
the max jointly over each slot and the whole spatial grid, then projected
through a shared fully-connected layer to a fixed-width vector.  The same
path applied to the full video extent yields the video-level context vector.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .proposals import Segment


def segment_pool(features: Tensor, segment: Segment, bins: int) -> Tensor:
    """Max-pool a segment into a (C, bins, 1, 1) volume.

    The segment is clipped to the feature extent first; bin b spans
    timesteps [floor(start + b*len/bins), max(+1, floor(start + (b+1)*len/bins))),
    so every bin holds at least one timestep.
    """
    if bins < 1:
        raise ContractError("segment_pool needs at least one bin")
    c, t, _, _ = features.shape
    start = max(0.0, segment.start)
    end = min(float(t), segment.end)
    length = end - start
    if length <= 0:
        raise ContractError(
            f"segment [{segment.start}, {segment.end}] lies outside the feature extent")
    columns = []
    for b in range(bins):
        lo = int(math.floor(start + b * length / bins))
        hi = max(lo + 1, int(math.floor(start + (b + 1) * length / bins)))
        lo = min(lo, t - 1)
        hi = min(max(hi, lo + 1), t)
        window = ad.slice_tensor(features, (slice(None), slice(lo, hi)))
        pooled = ad.max_over_axis(ad.reshape(window, (c, -1)), axis=1)
        columns.append(ad.reshape(pooled, (c, 1)))
    return ad.reshape(ad.concat(columns, axis=1), (c, bins, 1, 1))


def init_pool_params(feat_channels: int, bins: int, fc_dim: int,
                     rng: np.random.Generator) -> dict[str, Tensor]:
    from .model import dense_init
    w, b = dense_init(feat_channels * bins, fc_dim, rng)
    return {"pool/fc/w": w, "pool/fc/b": b}


def pooled_feature(features: Tensor, segment: Segment, bins: int,
                   params: dict[str, Tensor]) -> Tensor:
    """Fixed-width segment descriptor: pooled volume -> shared fc -> relu, (1, D)."""
    flat = ad.reshape(segment_pool(features, segment, bins), (1, -1))
    return ad.relu(ad.linear(flat, params["pool/fc/w"], params["pool/fc/b"]))


def context_feature(features: Tensor, bins: int, params: dict[str, Tensor]) -> Tensor:
    """Descriptor of the whole video extent, same pipeline as pooled_feature."""
    t = features.shape[1]
    return pooled_feature(features, Segment.from_bounds(0.0, float(t)), bins, params)


# ---------------------------------------------------------------------------
# frozen-feature dump used between the proposal and captioning stages

DUMP_MAGIC = b"SOIF"
DUMP_VERSION = 1


@dataclass(frozen=True)
class FeatureRecord:
    """One ground-truth segment: its extent, pooled descriptor and caption ids."""

    video_id: str
    segment: Segment
    vector: np.ndarray
    token_ids: tuple[int, ...]


@dataclass
class FeatureDump:
    records: list[FeatureRecord]          # grouped per video, ascending end time
    contexts: dict[str, np.ndarray]       # video_id -> context vector
    vocab_crc: int
    fc_dim: int


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_str(buf: memoryview, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    return bytes(buf[off:off + n]).decode("utf-8"), off + n


def vocab_crc(tokens: list[str]) -> int:
    return zlib.crc32("\n".join(tokens).encode("utf-8"))


def save_dump(path, dump: FeatureDump) -> None:
    from .store import atomic_write
    parts = [DUMP_MAGIC, struct.pack("<III", DUMP_VERSION, dump.fc_dim, dump.vocab_crc)]
    parts.append(struct.pack("<I", len(dump.contexts)))
    for vid, vec in dump.contexts.items():
        parts.append(_pack_str(vid))
        parts.append(struct.pack("<I", vec.size))
        parts.append(vec.astype("<f8").tobytes())
    parts.append(struct.pack("<I", len(dump.records)))
    for rec in dump.records:
        parts.append(_pack_str(rec.video_id))
        parts.append(struct.pack("<dd", rec.segment.start, rec.segment.end))
        parts.append(struct.pack("<I", rec.vector.size))
        parts.append(rec.vector.astype("<f8").tobytes())
        parts.append(struct.pack("<I", len(rec.token_ids)))
        parts.append(struct.pack(f"<{len(rec.token_ids)}i", *rec.token_ids))
    atomic_write(path, b"".join(parts))


def load_dump(path) -> FeatureDump:
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    if bytes(buf[:4]) != DUMP_MAGIC:
        raise ContractError(f"{path}: not a feature dump")
    version, fc_dim, crc = struct.unpack_from("<III", buf, 4)
    if version != DUMP_VERSION:
        raise ContractError(f"{path}: unsupported dump version {version}")
    off = 16
    (n_ctx,) = struct.unpack_from("<I", buf, off)
    off += 4
    contexts = {}
    for _ in range(n_ctx):
        vid, off = _read_str(buf, off)
        (size,) = struct.unpack_from("<I", buf, off)
        off += 4
        contexts[vid] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).copy()
        off += 8 * size
    (n_rec,) = struct.unpack_from("<I", buf, off)
    off += 4
    records = []
    for _ in range(n_rec):
        vid, off = _read_str(buf, off)
        start, end = struct.unpack_from("<dd", buf, off)
        off += 16
        (size,) = struct.unpack_from("<I", buf, off)
        off += 4
        vec = np.frombuffer(buf, dtype="<f8", count=size, offset=off).copy()
        off += 8 * size
        (n_tok,) = struct.unpack_from("<I", buf, off)
        off += 4
        ids = struct.unpack_from(f"<{n_tok}i", buf, off)
        off += 4 * n_tok
        records.append(FeatureRecord(vid, Segment.from_bounds(start, end), vec, ids))
    return FeatureDump(records, contexts, crc, fc_dim)
