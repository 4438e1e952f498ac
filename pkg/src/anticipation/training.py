"""Datasets, training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .config import RunConfig
from .errors import ConfigError, NonFiniteError, TrainingError
from .graphs import CandidateGraphSet, enumerate_candidates, gumbel_noise
from .network import AnticipationModel, ModelDims
from .objective import (HorizonSpec, MetricReport, compute_metrics, compute_rsd_metrics,
                        make_ground_truth, multi_horizon_loss, remaining_duration)
from .spatial import assemble_sequence, read_detection_log, read_labels

log = logging.getLogger(__name__)

RSD_EVENT = "rsd"


@dataclass
class Video:
    name: str
    boxes: object
    labels: object

    @property
    def frames(self):
        return self.labels.duration_frames


@dataclass
class Dataset:
    videos: list
    events: list
    event_kinds: dict = field(default_factory=dict)
    nodes: list = None


def load_dataset(path, n_nodes=None, events=None):
    """Load every ``*.detections.jsonl`` / ``*.labels.json`` pair under ``path``."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}", "data")
    manifest = {}
    if (root / "dataset.json").exists():
        manifest = json.loads((root / "dataset.json").read_text())
    if n_nodes is None:
        if "nodes" not in manifest:
            raise ConfigError(f"{root}: N unknown (no dataset.json and none configured)", "N")
        n_nodes = len(manifest["nodes"])
    elif "nodes" in manifest and len(manifest["nodes"]) != n_nodes:
        raise ConfigError(f"{root} has {len(manifest['nodes'])} nodes but N={n_nodes}", "N")
    videos = []
    for log_path in sorted(root.glob("*.detections.jsonl")):
        stem = log_path.name[: -len(".detections.jsonl")]
        labels = read_labels(root / f"{stem}.labels.json")
        frames = read_detection_log(log_path)
        boxes = assemble_sequence(frames, n_nodes, labels.duration_frames, labels.fps)
        videos.append(Video(stem, boxes, labels))
    if not videos:
        raise ConfigError(f"no detection logs in {root}", "data")
    if not events:
        events = manifest.get("events") or sorted({e for v in videos for e in v.labels.events})
    kinds = manifest.get("event_kinds") or {e: e.split(":", 1)[0] for e in events if ":" in e}
    return Dataset(videos, list(events), kinds, manifest.get("nodes"))


def split_videos(videos, seed, val_fraction=0.2):
    """Seeded split by whole video into ``(train, val)``."""
    n = len(videos)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    if val_fraction > 0 and n > 1:
        n_val = max(1, min(n - 1, n_val))
    order = np.random.default_rng([seed, 1]).permutation(n)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [videos[i] for i in train], [videos[i] for i in val]


def targets(video, cfg, events):
    if cfg.profile == "rsd":
        return remaining_duration(video.frames, video.labels.fps).reshape(-1, 1)
    return make_ground_truth(video.labels, events)


def elapsed(video):
    return (np.arange(video.frames) / video.labels.fps / 60.0).reshape(-1, 1)


def build_candidates(videos, cfg):
    return enumerate_candidates((v.boxes for v in videos), cfg.N, cfg.C, cfg.presence_threshold)


# checkpoints


@dataclass
class Checkpoint:
    model: AnticipationModel
    horizons: HorizonSpec
    config: RunConfig
    events: list
    event_kinds: dict
    epoch: int = 0
    optim: tn.AdamState = None
    history: list = field(default_factory=list)
    best_metric: float = None
    best_epoch: int = None


def save_checkpoint(path, ckpt):
    arrays = {name: p.data for name, p in ckpt.model.parameters().items()}
    arrays["objective.lambda"] = ckpt.horizons.lam.data
    if ckpt.optim is not None:
        for name in sorted(ckpt.optim.m):
            arrays[f"optim.m.{name}"] = ckpt.optim.m[name]
            arrays[f"optim.v.{name}"] = ckpt.optim.v[name]
    cands = ckpt.model.candidates
    meta = {
        "config": ckpt.config.to_dict(),
        "dims": ckpt.model.dims.to_dict(),
        "candidates": cands.to_dict(),
        "candidates_sha256": cands.digest(),
        "events": ckpt.events,
        "event_kinds": ckpt.event_kinds,
        "epoch": ckpt.epoch,
        "step": ckpt.optim.step if ckpt.optim is not None else 0,
        "lambda_hat": ckpt.horizons.lambda_hat().tolist(),
        "history": ckpt.history,
        "best_metric": ckpt.best_metric,
        "best_epoch": ckpt.best_epoch,
    }
    tmp = Path(str(path) + ".tmp")
    tn.save_tensors(tmp, arrays, meta)
    tmp.replace(path)


def load_checkpoint(path, candidates=None):
    """Restore a :class:`Checkpoint`; ``candidates`` (if given) must match the stored set."""
    arrays, meta = tn.load_tensors(path)
    stored = CandidateGraphSet.from_dict(meta["candidates"])
    if candidates is not None:
        if (candidates.n_nodes, candidates.C) != (stored.n_nodes, stored.C):
            raise ConfigError(
                f"candidate set (N={candidates.n_nodes}, C={candidates.C}) does not match checkpoint "
                f"(N={stored.n_nodes}, C={stored.C})", "candidates")
        if candidates.digest() != meta["candidates_sha256"]:
            raise ConfigError("candidate set differs from the one stored in the checkpoint", "candidates")
    cfg = RunConfig.from_dict(meta["config"])
    model = AnticipationModel.init(ModelDims(**meta["dims"]), stored, seed=cfg.seed)
    model.load_state(arrays)
    hspec = HorizonSpec(cfg.horizons)
    hspec.lam.data = np.array(arrays["objective.lambda"])
    optim = tn.AdamState(step=int(meta.get("step", 0)))
    for name in model.parameters().keys() | {"objective.lambda"}:
        if f"optim.m.{name}" in arrays:
            optim.m[name] = np.array(arrays[f"optim.m.{name}"])
            optim.v[name] = np.array(arrays[f"optim.v.{name}"])
    return Checkpoint(model, hspec, cfg, meta["events"], meta.get("event_kinds", {}), int(meta["epoch"]),
                      optim, meta.get("history", []), meta.get("best_metric"), meta.get("best_epoch"))


# evaluation


def predict_videos(model, videos, mode="hard", exact=True):
    """Noise-free predictions per video. ``exact`` uses row-invariant kernels."""
    out = []
    with tn.no_grad():
        for v in videos:
            if exact:
                out.append(model.predict(v.boxes, mode=mode))
            else:
                out.append(model.forward(v.boxes, mode=mode).pred.data)
    return out


def report_from_predictions(preds, videos, cfg, events, kinds, horizons=None, aggregation="video"):
    if cfg.profile == "rsd":
        report = MetricReport(aggregation=aggregation)
        report.rsd_rows = compute_rsd_metrics([p[:, 0] for p in preds], [v.frames for v in videos],
                                              [v.labels.fps for v in videos], [v.name for v in videos])
        return report
    hs = list(horizons if horizons is not None else cfg.eval_horizons)
    truths = [targets(v, cfg, events) for v in videos]
    return compute_metrics(preds, truths, hs, events, kinds, aggregation)


def selection_metric(report, cfg):
    if cfg.profile == "rsd":
        return report.rsd_rows[-1]["MAE_all"] if report.rsd_rows else None
    return report.mean_wmae(cfg.eval_horizons)


def evaluate(model, videos, cfg, events, kinds, horizons=None, mode=None, aggregation="video", exact=True):
    preds = predict_videos(model, videos, mode or cfg.eval_selection, exact)
    return report_from_predictions(preds, videos, cfg, events, kinds, horizons, aggregation), preds


def write_prediction_dump(path, videos, preds, truths, events):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video", "frame", "event", "y", "pred"])
        for v, p, y in zip(videos, preds, truths):
            for t in range(p.shape[0]):
                for e, name in enumerate(events):
                    w.writerow([v.name, t, name, repr(float(y[t, e])), repr(float(p[t, e]))])


def read_prediction_dump(path, videos, events):
    """Per-video ``T x E`` predictions from a dump written by :func:`write_prediction_dump`."""
    index = {name: i for i, name in enumerate(events)}
    preds = {v.name: np.full((v.frames, len(events)), np.nan) for v in videos}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["video"] in preds and row["event"] in index:
                preds[row["video"]][int(row["frame"]), index[row["event"]]] = float(row["pred"])
    out = []
    for v in videos:
        p = preds[v.name]
        if np.isnan(p).any():
            raise ConfigError(f"prediction dump lacks frames for video {v.name}", "replay")
        out.append(p)
    return out


# training


@dataclass
class TrainResult:
    checkpoint: Path
    history: list
    best_metric: float
    best_epoch: int


def _noise_stream(epoch, video_index):
    return (epoch << 24) | video_index


LOG_FIELDS_BASE = ["epoch", "loss", "val_metric"]


def _log_fields(cfg):
    fields = list(LOG_FIELDS_BASE)
    if cfg.profile != "rsd":
        for h in cfg.eval_horizons:
            fields += [f"val_inMAE_{h:g}", f"val_oMAE_{h:g}"]
    else:
        fields += ["val_MAE_2min", "val_MAE_5min", "val_MAE_all"]
    fields += [f"lambda_hat_{'inf' if math.isinf(h) else format(h, 'g')}" for h in cfg.horizons]
    return fields


def _log_row(epoch, loss, metric, report, hspec, cfg):
    row = {"epoch": epoch, "loss": loss, "val_metric": metric}
    if cfg.profile != "rsd":
        for h in cfg.eval_horizons:
            r = report.get("mean", h)
            row[f"val_inMAE_{h:g}"] = r["inMAE"]
            row[f"val_oMAE_{h:g}"] = r["oMAE"]
    elif report.rsd_rows:
        for key in ("MAE_2min", "MAE_5min", "MAE_all"):
            row[f"val_{key}"] = report.rsd_rows[-1][key]
    for h, lh in zip(cfg.horizons, hspec.lambda_hat()):
        row[f"lambda_hat_{'inf' if math.isinf(h) else format(h, 'g')}"] = float(lh)
    return row


def _write_log(path, rows, cfg):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_log_fields(cfg))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in w.fieldnames})


def train(cfg, train_videos, val_videos, candidates, out_dir, events, kinds=None, resume=None, epochs=None):
    """Train from scratch or resume; returns the path of the selected checkpoint.

    Writes ``epoch_XXX.ckpt`` after every epoch, ``last.ckpt`` (for
    ``resume``), ``model.ckpt`` (the epoch with the best validation metric)
    and ``train_log.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = kinds or {}
    n_events = 1 if cfg.profile == "rsd" else len(events)
    if cfg.profile == "rsd":
        events = [RSD_EVENT]
    if n_events < 1:
        raise ConfigError("no events to anticipate", "events")
    epochs = cfg.optimizer.epochs if epochs is None else epochs

    if resume is not None:
        ckpt = load_checkpoint(resume, candidates)
        if ckpt.config.to_dict() != cfg.to_dict():
            raise ConfigError("resume checkpoint was trained with a different configuration", "resume")
    else:
        model = AnticipationModel.init(cfg.dims(n_events), candidates, seed=cfg.seed)
        ckpt = Checkpoint(model, HorizonSpec(cfg.horizons), cfg, list(events), dict(kinds), 0, tn.AdamState())
    model, hspec, optim = ckpt.model, ckpt.horizons, ckpt.optim
    params = dict(model.parameters())
    params["objective.lambda"] = hspec.lam
    train_y = [targets(v, cfg, events) for v in train_videos]
    opt = cfg.optimizer
    log_path = out / "train_log.csv"
    last_good = out / "last.ckpt" if resume is not None else None

    for epoch in range(ckpt.epoch, epochs):
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(train_videos))
        losses = []
        for start in range(0, len(order), opt.batch_size):
            batch = order[start:start + opt.batch_size]
            try:
                preds, ys, aux_terms = [], [], []
                for vi in batch:
                    v = train_videos[vi]
                    noise = gumbel_noise((v.frames, cfg.C, cfg.C), cfg.seed, _noise_stream(epoch, int(vi)))
                    res = model.forward(v.boxes, mode="soft", noise=noise)
                    preds.append(res.pred)
                    ys.append(train_y[vi])
                    if res.aux is not None:
                        aux_terms.append(tn.mean(tn.tabs(res.aux - elapsed(v))))
                loss, _ = multi_horizon_loss(tn.concat(preds, axis=0), np.concatenate(ys, axis=0), hspec)
                for a in aux_terms:
                    loss = loss + a * (1.0 / len(aux_terms))
                if not loss.requires_grad:
                    continue
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
                grads = {name: p.grad for name, p in params.items()}
                for p in params.values():
                    p.zero_grad()
                tn.adam_step(params, grads, optim, opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps)
            except (NonFiniteError, TrainingError) as exc:
                where = f"epoch {epoch + 1}, step {optim.step + 1}"
                kept = f"; last good checkpoint: {last_good}" if last_good else ""
                raise TrainingError(f"training aborted at {where}: {exc}{kept}") from exc
            losses.append(loss.item())
        mean_loss = float(np.mean(losses)) if losses else None
        if val_videos:
            report, _ = evaluate(model, val_videos, cfg, events, kinds, exact=False)
            metric = selection_metric(report, cfg)
        else:
            report, metric = MetricReport(), mean_loss
        ckpt.epoch = epoch + 1
        ckpt.history.append(_log_row(epoch + 1, mean_loss, metric, report, hspec, cfg))
        improved = metric is not None and (ckpt.best_metric is None or metric < ckpt.best_metric)
        if improved:
            ckpt.best_metric, ckpt.best_epoch = metric, epoch + 1
        log.info("epoch %d loss %.5f val %s", epoch + 1, mean_loss if mean_loss is not None else float("nan"), metric)
        epoch_path = out / f"epoch_{epoch + 1:03d}.ckpt"
        save_checkpoint(epoch_path, ckpt)
        shutil.copyfile(epoch_path, out / "last.ckpt")
        if improved or not (out / "model.ckpt").exists():
            shutil.copyfile(epoch_path, out / "model.ckpt")
        last_good = out / "last.ckpt"
        _write_log(log_path, ckpt.history, cfg)
    return TrainResult(out / "model.ckpt", ckpt.history, ckpt.best_metric, ckpt.best_epoch)
