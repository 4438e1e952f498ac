"""``anticipation`` command line: synth | enumerate | train | eval | predict.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
``ANTICIPATION_LOG`` (DEBUG, INFO, WARNING, ...) sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig
from .errors import AnticipationError, ConfigError, IngestionError, LabelError, TrainingError
from .graphs import CandidateGraphSet
from .objective import HorizonSpec
from .synth import WorkflowTemplate, default_template, generate, validate_dataset
from . import training as tr

LOG_ENV = "ANTICIPATION_LOG"
log = logging.getLogger("anticipation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _load_config(path, data_dir=None):
    cfg = RunConfig.load(path) if path else RunConfig.for_profile()
    if data_dir:
        cfg.train_data = str(data_dir)
    return cfg


def _dataset(cfg, data_dir=None):
    path = data_dir or cfg.train_data
    if not path:
        raise ConfigError("no dataset given (use --data or set train_data)", "train_data")
    return tr.load_dataset(path, cfg.N, cfg.events or None)


def _training_split(cfg, ds):
    if cfg.val_data:
        val = tr.load_dataset(cfg.val_data, cfg.N, ds.events).videos
        return ds.videos, val
    return tr.split_videos(ds.videos, cfg.seed, cfg.val_fraction)


def cmd_synth(args):
    template = WorkflowTemplate.load(args.template) if args.template else default_template()
    videos = generate(template, args.seed, args.videos, args.out)
    report = validate_dataset(args.out)
    if not report.ok:
        for v in report.violations[:20]:
            print(f"{v.file}:{v.line}: {v.kind}: {v.message}", file=sys.stderr)
        raise TrainingError(f"generated dataset failed validation ({len(report.violations)} problems)")
    frames = [v.labels.duration_frames for v in videos]
    print(f"wrote {len(videos)} videos to {args.out} at {template.fps:g} fps")
    print(f"frames per video: min {min(frames)} max {max(frames)} total {sum(frames)}")
    print(f"nodes: {', '.join(template.nodes)}")
    print(f"events: {', '.join(template.event_names())}")
    return 0


def cmd_enumerate(args):
    cfg = _load_config(args.config, args.data)
    ds = _dataset(cfg, args.data)
    train_videos, _ = _training_split(cfg, ds)
    cands = tr.build_candidates(train_videos, cfg)
    cands.save(args.out)
    for i, g in enumerate(cands.graphs):
        nodes = [n for n, m in enumerate(g.mask) if m]
        print(f"{i:2d} freq={g.frequency:6d} nodes={nodes}")
    print(f"wrote {cands.C} candidate graphs ({cands.digest()[:12]}) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config, args.data)
    ds = _dataset(cfg, args.data)
    train_videos, val_videos = _training_split(cfg, ds)
    cands = CandidateGraphSet.load(args.candidates)
    if (cands.n_nodes, cands.C) != (cfg.N, cfg.C):
        raise ConfigError(f"candidate set has N={cands.n_nodes}, C={cands.C}; config has N={cfg.N}, "
                          f"C={cfg.C}", "candidates")
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = out / "last.ckpt"
        if not resume.exists():
            raise ConfigError(f"nothing to resume: {resume} not found", "resume")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    res = tr.train(cfg, train_videos, val_videos, cands, out, ds.events, ds.event_kinds, resume=resume)
    print(f"trained {len(res.history)} epochs on {len(train_videos)} videos "
          f"(val {len(val_videos)}); best epoch {res.best_epoch} metric {res.best_metric}")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args):
    cands = CandidateGraphSet.load(args.candidates) if args.candidates else None
    ckpt = tr.load_checkpoint(args.checkpoint, cands)
    cfg = ckpt.config
    ds = tr.load_dataset(args.data, cfg.N, ckpt.events if cfg.profile != "rsd" else None)
    horizons = None
    if args.horizons:
        horizons = [float(h) for h in args.horizons.split(",")]
        HorizonSpec(horizons)
    events = [tr.RSD_EVENT] if cfg.profile == "rsd" else ckpt.events
    if args.replay:
        preds = tr.read_prediction_dump(args.replay, ds.videos, events)
        report = tr.report_from_predictions(preds, ds.videos, cfg, events, ckpt.event_kinds, horizons,
                                            args.aggregation)
    else:
        report, preds = tr.evaluate(ckpt.model, ds.videos, cfg, events, ckpt.event_kinds, horizons,
                                    args.mode, args.aggregation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.profile == "rsd":
        report.write_rsd_csv(out / "metrics.csv")
    else:
        report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    if args.dump:
        truths = [tr.targets(v, cfg, events) for v in ds.videos]
        tr.write_prediction_dump(out / "predictions.csv", ds.videos, preds, truths, events)
    if cfg.profile == "rsd":
        row = report.rsd_rows[-1]
        print(f"RSD MAE: 2min {row['MAE_2min']} 5min {row['MAE_5min']} all {row['MAE_all']}")
    else:
        hs = horizons if horizons is not None else cfg.eval_horizons
        for h in hs:
            r = report.get("mean", h)
            print(f"h={h:g}: inMAE {r['inMAE']} oMAE {r['oMAE']} wMAE {r['wMAE']} eMAE {r['eMAE']}")
        print(f"mean wMAE: {report.mean_wmae(hs)}")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def cmd_predict(args):
    ckpt = tr.load_checkpoint(args.checkpoint)
    from .streaming import stream
    events = [tr.RSD_EVENT] if ckpt.config.profile == "rsd" else ckpt.events
    src = sys.stdin if args.stream == "-" else open(args.stream)
    try:
        stream(ckpt.model, src, events, sys.stdout, sys.stderr, args.mode)
    finally:
        if src is not sys.stdin:
            src.close()
    return 0


def build_parser():
    p = _Parser(prog="anticipation", description="Surgical event anticipation from box detections.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--template", help="workflow template JSON (default: built-in)")
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=_positive_int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("enumerate", help="enumerate candidate graphs from the training split")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enumerate)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--candidates", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--horizons", help="comma-separated minutes (default: config eval_horizons)")
    s.add_argument("--out", required=True)
    s.add_argument("--candidates", help="refuse unless the checkpoint used this candidate set")
    s.add_argument("--mode", choices=("soft", "hard"))
    s.add_argument("--aggregation", choices=("video", "frame"), default="video")
    s.add_argument("--dump", action="store_true", help="also write per-frame predictions.csv")
    s.add_argument("--replay", help="score a predictions.csv dump instead of running the model")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="stream predictions for detection lines")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stream", default="-", help="detection log path, or - for stdin")
    s.add_argument("--mode", choices=("soft", "hard"), default="hard")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, IngestionError, LabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AnticipationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected failure: still a runtime error, not a crash code
        log.debug("unhandled exception", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
