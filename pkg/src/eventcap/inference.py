"""Checkpoint-driven inference: propose segments, then caption each one."""

from __future__ import annotations

from .autodiff import ContractError
from .captioner import Vocabulary
from .model import JointModel, is_caption_param
from .synthetic import Dataset
from .training import Checkpoint


def assemble_model(main: Checkpoint, captioner: Checkpoint | None = None
                   ) -> tuple[JointModel, Vocabulary]:
    """Build an inference model from one checkpoint, or from a proposal
    checkpoint whose caption parameters are overridden by a separately
    pretrained captioner (the "separate models" baseline)."""
    if captioner is None:
        return JointModel(main.model_config, main.tensors_for_inference()), main.vocabulary()
    if main.vocab_tokens != captioner.vocab_tokens:
        raise ContractError("checkpoints disagree on the vocabulary")
    cap_tensors = captioner.tensors_for_inference()
    tensors = {name: (cap_tensors[name] if is_caption_param(name) else t)
               for name, t in main.tensors_for_inference().items()}
    # the captioner checkpoint decides whether context is used at decode time
    return JointModel(captioner.model_config, tensors), captioner.vocabulary()


def predict_video(model: JointModel, vocab: Vocabulary, ds: Dataset, video_id: str,
                  nms_threshold: float = 0.7, keep_top: int | None = None) -> list[dict]:
    video = ds.load_video(video_id)
    features = model.encode(video)
    segs = model.propose(features, nms_threshold, keep_top)
    if not segs:
        return []
    captions = model.describe(features, segs)
    out = []
    for seg, ids in zip(segs, captions):
        out.append({
            "sentence": " ".join(vocab.decode(ids)),
            "timestamp": [video.timesteps_to_seconds(seg.start),
                          video.timesteps_to_seconds(seg.end)],
            "proposal_score": seg.score,
        })
    return out


def run_inference(model: JointModel, vocab: Vocabulary, ds: Dataset,
                  nms_threshold: float = 0.7, keep_top: int | None = None) -> dict:
    """Predictions for every video: {"results": {vid: [{sentence, timestamp,
    proposal_score}, ...]}} with each list ordered by descending score."""
    return {"results": {vid: predict_video(model, vocab, ds, vid, nms_threshold, keep_top)
                        for vid in ds.video_ids}}


def describe_gt_segments(model: JointModel, vocab: Vocabulary, ds: Dataset,
                         video_id: str) -> list[str]:
    """Captions decoded on the ground-truth segments, in annotation order."""
    video = ds.load_video(video_id)
    features = model.encode(video)
    segs = list(_gt_segments_ts(ds, video_id))
    captions = model.describe(features, segs)
    return [" ".join(vocab.decode(ids)) for ids in captions]


def _gt_segments_ts(ds: Dataset, video_id: str):
    from .encoder import TEMPORAL_STRIDE
    from .proposals import Segment
    per_sec = ds.frame_rate / TEMPORAL_STRIDE
    for s in ds.segments(video_id):
        yield Segment.from_bounds(s.start * per_sec, s.end * per_sec)
