"""Command line entry points.

Exit codes: 0 success, 1 usage error, 2 bad data or files, 3 diverged run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation, inference, synthetic, training
from .autodiff import ContractError, ShapeError
from .config import FORMAT_VERSION, apply_overrides, load_config
from .proposals import Segment
from .store import atomic_write_json
from .synthetic import Dataset
from .training import DivergenceError, load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.FIELD=VALUE", help="override one config field")


def _config_from(args):
    return apply_overrides(load_config(args.config), args.overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="eventcap",
                     description="Detect and describe the events in a video stream.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate",
                       help="render a synthetic moving-pattern dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset directory to create")

    p = sub.add_parser("train", help="run one training stage")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--stage", required=True, choices=["spn", "captioner", "joint"])
    p.add_argument("--spn-checkpoint", default=None,
                   help="proposal checkpoint (captioner and joint stages)")
    p.add_argument("--captioner-checkpoint", default=None,
                   help="captioner checkpoint (joint stage)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("infer",
                       help="propose and caption events with a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captioner-checkpoint", default=None,
                   help="merge caption weights from a separate pretraining run")
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--nms", type=float, default=0.7, help="suppression overlap threshold")
    p.add_argument("--keep-top", type=int, default=None,
                   help="cap on proposals per video after suppression")

    p = sub.add_parser("eval",
                       help="score predictions against a dataset's annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--mode", required=True, choices=["proposals", "captions"])
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="also write the caption report as CSV")

    p = sub.add_parser("inspect-checkpoint",
                       help="print a checkpoint's header and tensor inventory")
    p.add_argument("--checkpoint", required=True)
    return parser


def _cmd_generate(args) -> int:
    cfg = _config_from(args)
    synthetic.generate(cfg.generate, args.out)
    print(f"wrote dataset to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from(args)
    ds = Dataset.open(args.data)
    out = Path(args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    if args.stage == "spn":
        ckpt = training.pretrain_spn(ds, cfg.model, cfg.train, out, resume)
        print(f"wrote {out / 'spn.ckpt'} after {ckpt.step} steps")
        return 0
    if args.spn_checkpoint is None:
        raise UsageError(f"--spn-checkpoint is required for the {args.stage} stage")
    spn = load_checkpoint(args.spn_checkpoint)
    if args.stage == "captioner":
        out.mkdir(parents=True, exist_ok=True)
        dump = training.extract_gt_features(spn, ds, out / "features.bin")
        vocab = spn.vocabulary()
        # geometry must match the network that produced the features; only the
        # context switch is taken from the user's config
        mcfg = training.ModelConfig.from_dict(spn.model_config.to_dict())
        mcfg.use_context = cfg.model.use_context
        ckpt = training.pretrain_captioner(dump, vocab, mcfg, cfg.train, out, resume)
        print(f"wrote {out / 'captioner.ckpt'} after {ckpt.step} steps")
        return 0
    if args.captioner_checkpoint is None:
        raise UsageError("--captioner-checkpoint is required for the joint stage")
    capt = load_checkpoint(args.captioner_checkpoint)
    ckpt = training.train_joint(spn, capt, ds, cfg.train, out, resume)
    print(f"wrote {out / 'joint.ckpt'} after {ckpt.step} steps")
    return 0


def _cmd_infer(args) -> int:
    ds = Dataset.open(args.data)
    main_ckpt = load_checkpoint(args.checkpoint)
    extra = load_checkpoint(args.captioner_checkpoint) if args.captioner_checkpoint else None
    model, vocab = inference.assemble_model(main_ckpt, extra)
    results = inference.run_inference(model, vocab, ds, args.nms, args.keep_top)
    doc = {
        "format_version": FORMAT_VERSION,
        "config": {"model": model.cfg.to_dict(),
                   "train": main_ckpt.train_config.to_dict()},
        "results": results["results"],
    }
    atomic_write_json(args.out, doc)
    total = sum(len(v) for v in results["results"].values())
    print(f"wrote {total} predictions for {len(results['results'])} videos to {args.out}")
    return 0


def _load_predictions(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ContractError(f"predictions file not found: {path}")
    except json.JSONDecodeError as e:
        raise ContractError(f"predictions file {path} is not valid JSON: {e}")
    if "results" not in doc:
        raise ContractError(f"predictions file {path} lacks a results table")
    return doc


def _cmd_eval(args) -> int:
    ds = Dataset.open(args.data)
    doc = _load_predictions(args.predictions)
    if args.mode == "proposals":
        preds = {vid: [Segment.from_bounds(p["timestamp"][0], p["timestamp"][1],
                                           p["proposal_score"]) for p in items]
                 for vid, items in doc["results"].items()}
        gts = {vid: ds.segments(vid) for vid in ds.video_ids}
        report = evaluation.proposal_eval(preds, gts)
        headline = f"average recall AUC {report['average_auc']:.4f}"
    else:
        report = evaluation.dense_caption_eval(doc, ds.annotations)
        if args.csv:
            from .store import atomic_write
            atomic_write(args.csv, evaluation.report_to_csv(report).encode("utf-8"))
        headline = ", ".join(f"{k} {v:.4f}" for k, v in sorted(report["mean"].items()))
    atomic_write_json(args.out, {"format_version": FORMAT_VERSION, "mode": args.mode,
                                 "report": report})
    print(f"wrote {args.out}: {headline}")
    return 0


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    summary = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "vocab_size": len(ckpt.vocab_tokens),
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "tensors": {name: list(arr.shape) for name, arr in sorted(ckpt.params.items())},
        "parameters": int(sum(arr.size for arr in ckpt.params.values())),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "inspect-checkpoint": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ContractError, ShapeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
