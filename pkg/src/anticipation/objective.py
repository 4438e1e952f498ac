"""Multi-horizon loss, horizon clipping, and anticipation metrics.

All times are minutes. A ground-truth countdown of ``0`` marks a frame where
the event is occurring; ``inf`` marks frames after the event's last
occurrence in a video. Horizon ``inf`` stands for the open-ended horizon.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, LabelError

LAMBDA_INIT = 1.0


def clip_output(pred, h):
    """A(O): predictions above the horizon are reported as the horizon."""
    return np.minimum(pred, h)


@dataclass
class HorizonSpec:
    horizons: tuple
    lam: tn.Tensor = None

    def __post_init__(self):
        hs = tuple(float(h) for h in self.horizons)
        if not hs:
            raise ConfigError("at least one horizon is required", "horizons")
        if any(not h > 0 for h in hs):
            raise ConfigError(f"horizons must be > 0, got {hs}", "horizons")
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise ConfigError(f"horizons must be strictly increasing, got {hs}", "horizons")
        if any(math.isinf(h) for h in hs[:-1]):
            raise ConfigError("only the last horizon may be unbounded", "horizons")
        self.horizons = hs
        if self.lam is None:
            self.lam = tn.Tensor(np.full(len(hs), LAMBDA_INIT), requires_grad=True, name="objective.lambda")

    @property
    def unbounded(self):
        return math.isinf(self.horizons[-1])

    @property
    def bounded(self):
        return tuple(h for h in self.horizons if not math.isinf(h))

    @property
    def max_bounded(self):
        return self.horizons[-1]

    def lambda_hat(self):
        return np.logaddexp(0.0, self.lam.data)


def countdown(intervals, n_frames, fps):
    """Minutes until the next occurrence; 0 inside; inf after the last one.

    ``intervals`` are half-open ``[start, end)`` frame ranges.
    """
    ivs = sorted((int(a), int(b)) for a, b in intervals)
    for (a0, b0), (a1, _) in zip(ivs, ivs[1:]):
        if a1 < b0:
            raise LabelError(f"overlapping intervals [{a0}, {b0}) and [{a1}, ...)")
    for a, b in ivs:
        if b <= a:
            raise LabelError(f"empty or reversed interval [{a}, {b})")
    y = np.full(n_frames, np.inf)
    next_start = np.inf
    occurring = np.zeros(n_frames, dtype=bool)
    for a, b in ivs:
        occurring[max(a, 0):min(b, n_frames)] = True
    starts = sorted(a for a, _ in ivs)
    si = len(starts) - 1
    for t in range(n_frames - 1, -1, -1):
        while si >= 0 and starts[si] > t:
            next_start = starts[si]
            si -= 1
        if occurring[t]:
            y[t] = 0.0
        elif np.isfinite(next_start):
            y[t] = (next_start - t) / fps / 60.0
    return y


def make_ground_truth(labels, event_names, fps=None):
    """``T x E`` countdowns for ``event_names`` from a :class:`Labels` record."""
    fps = labels.fps if fps is None else fps
    cols = []
    for name in event_names:
        try:
            cols.append(countdown(labels.events.get(name, []), labels.duration_frames, fps))
        except LabelError as exc:
            raise LabelError(f"event {name!r}: {exc}") from None
    return np.stack(cols, axis=1) if cols else np.zeros((labels.duration_frames, 0))


def remaining_duration(n_frames, fps):
    """Remaining surgery minutes per frame; 0 at the final frame."""
    return (n_frames - 1 - np.arange(n_frames)) / fps / 60.0


def in_out_masks(y, h):
    """``(in, out, early)`` masks; frames with ``y == 0`` belong to none."""
    y = np.asarray(y, dtype=float)
    active = y > 0
    return active & (y < h), active & (y >= h), active & (y <= 0.1 * h)


def _mae(err, mask):
    n = int(mask.sum())
    return (float(err[mask].mean()) if n else None), n


def frame_metrics(pred, y, h):
    """Pooled metrics over all frames of ``pred`` and ``y`` for one horizon."""
    pred, y = np.asarray(pred, dtype=float), np.asarray(y, dtype=float)
    clipped = clip_output(pred, h)
    m_in, m_out, m_early = in_out_masks(y, h)
    in_mae, n_in = _mae(np.abs(clipped - y), m_in)
    o_mae, n_out = _mae(np.abs(clipped - h), m_out)
    e_mae, n_early = _mae(np.abs(clipped - y), m_early)
    return {"inMAE": in_mae, "oMAE": o_mae, "eMAE": e_mae,
            "n_in_frames": n_in, "n_out_frames": n_out, "n_early_frames": n_early}


def _wmae(in_mae, o_mae):
    if in_mae is None or o_mae is None:
        return None
    return (in_mae + o_mae) / 2


def _mean_present(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    rsd_rows: list = field(default_factory=list)
    aggregation: str = "video"

    COLUMNS = ("event", "horizon", "inMAE", "oMAE", "wMAE", "eMAE", "n_in_frames", "n_out_frames")
    RSD_COLUMNS = ("video", "MAE_2min", "MAE_5min", "MAE_all")

    def get(self, event, horizon):
        for r in self.rows:
            if r["event"] == event and r["horizon"] == horizon:
                return r
        raise KeyError((event, horizon))

    def mean_wmae(self, horizons=None, event="mean"):
        vals = [r["wMAE"] for r in self.rows
                if r["event"] == event and (horizons is None or r["horizon"] in horizons)]
        return _mean_present(vals)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in self.COLUMNS})

    def write_rsd_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.RSD_COLUMNS)
            w.writeheader()
            for r in self.rsd_rows:
                w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in self.RSD_COLUMNS})

    def to_json(self):
        return {"aggregation": self.aggregation, "metrics": self.rows, "rsd": self.rsd_rows}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, allow_nan=False)
            fh.write("\n")


def compute_metrics(preds, truths, horizons, event_names, event_kinds=None, aggregation="video"):
    """Per-event, per-horizon inMAE/oMAE/wMAE/eMAE over videos.

    ``preds`` and ``truths`` are lists of ``T x E`` arrays, one per video.
    With ``aggregation="video"`` each video contributes its own frame mean
    and videos are averaged; ``"frame"`` pools frames across videos. Event
    rows are then averaged into ``mean`` (and ``mean:<kind>`` per kind).
    Empty masks give ``None`` and are skipped when averaging.
    """
    if aggregation not in ("video", "frame"):
        raise ConfigError(f"aggregation must be 'video' or 'frame', got {aggregation!r}", "aggregation")
    if len(preds) != len(truths):
        raise ValueError("preds and truths must list the same videos")
    rows = []
    for h in horizons:
        per_event = []
        for e, name in enumerate(event_names):
            if aggregation == "frame":
                p = np.concatenate([np.asarray(v)[:, e] for v in preds]) if preds else np.zeros(0)
                y = np.concatenate([np.asarray(v)[:, e] for v in truths]) if truths else np.zeros(0)
                m = frame_metrics(p, y, h)
                in_mae, o_mae, e_mae = m["inMAE"], m["oMAE"], m["eMAE"]
                n_in, n_out = m["n_in_frames"], m["n_out_frames"]
            else:
                vids = [frame_metrics(np.asarray(p)[:, e], np.asarray(y)[:, e], h) for p, y in zip(preds, truths)]
                in_mae = _mean_present([v["inMAE"] for v in vids])
                o_mae = _mean_present([v["oMAE"] for v in vids])
                e_mae = _mean_present([v["eMAE"] for v in vids])
                n_in = sum(v["n_in_frames"] for v in vids)
                n_out = sum(v["n_out_frames"] for v in vids)
            row = {"event": name, "horizon": h, "inMAE": in_mae, "oMAE": o_mae,
                   "wMAE": _wmae(in_mae, o_mae), "eMAE": e_mae,
                   "n_in_frames": n_in, "n_out_frames": n_out}
            rows.append(row)
            per_event.append((row, (event_kinds or {}).get(name)))
        groups = [("mean", [r for r, _ in per_event])]
        kinds = sorted({k for _, k in per_event if k})
        groups += [(f"mean:{k}", [r for r, kk in per_event if kk == k]) for k in kinds]
        for label, members in groups:
            in_mae = _mean_present([r["inMAE"] for r in members])
            o_mae = _mean_present([r["oMAE"] for r in members])
            rows.append({"event": label, "horizon": h, "inMAE": in_mae, "oMAE": o_mae,
                         "wMAE": _wmae(in_mae, o_mae),
                         "eMAE": _mean_present([r["eMAE"] for r in members]),
                         "n_in_frames": sum(r["n_in_frames"] for r in members),
                         "n_out_frames": sum(r["n_out_frames"] for r in members)})
    return MetricReport(rows=rows, aggregation=aggregation)


def compute_rsd_metrics(preds, durations, fps, names=None):
    """Remaining-duration MAE from 2 min left, 5 min left, and overall.

    ``preds`` is a list of per-video 1-D arrays (minutes); ``durations``
    the video lengths in frames. Returns per-video rows followed by a
    ``mean`` row averaged over videos.
    """
    rows = []
    fps_list = fps if isinstance(fps, (list, tuple)) else [fps] * len(preds)
    for i, (p, n, f) in enumerate(zip(preds, durations, fps_list)):
        p = np.asarray(p, dtype=float).reshape(-1)
        y = remaining_duration(int(n), f)
        err = np.abs(p - y)
        rows.append({"video": names[i] if names else str(i),
                     "MAE_2min": float(err[y <= 2.0].mean()),
                     "MAE_5min": float(err[y <= 5.0].mean()),
                     "MAE_all": float(err.mean())})
    if rows:
        rows.append({"video": "mean", **{k: float(np.mean([r[k] for r in rows]))
                                         for k in ("MAE_2min", "MAE_5min", "MAE_all")}})
    return rows


def _masked_mean(err, mask):
    n = int(mask.sum())
    return tn.tsum(err * mask.astype(float)) * (1.0 / n)


def multi_horizon_loss(pred, y, hspec):
    """Horizon-balanced loss with learnable per-horizon variances.

    ``pred`` is a ``F x E`` Tensor (frames of a batch stacked), ``y`` the
    matching countdowns. Returns ``(loss, parts)``; ``parts`` maps each
    horizon to its inMAE (or ``None`` when the term was skipped because no
    in-horizon frame exists) and holds ``"oMAE_H"``.
    """
    pred = tn.as_tensor(pred)
    y = np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise ConfigError(f"prediction shape {pred.shape} != target shape {y.shape}", "targets")
    lam_hat = tn.softplus(hspec.lam)
    terms, parts = [], {}
    if not hspec.unbounded:
        H = hspec.max_bounded
        y_train = np.minimum(y, H)
        _, out_mask, _ = in_out_masks(y, H)
        if out_mask.any():
            o = _masked_mean(tn.sub(H, tn.minimum(pred, H)), out_mask)
            terms.append(o)
            parts["oMAE_H"] = o.item()
        else:
            parts["oMAE_H"] = None
    else:
        y_train = y
        parts["oMAE_H"] = None
    for i, h in enumerate(hspec.horizons):
        if math.isinf(h):
            in_mask = np.isfinite(y) & (y > 0)
            err = tn.tabs(pred - np.where(in_mask, y_train, 0.0))
        else:
            in_mask, _, _ = in_out_masks(y, h)
            err = tn.tabs(tn.minimum(pred, h) - np.where(in_mask, y_train, 0.0))
        if not in_mask.any():
            parts[h] = None
            continue
        m = _masked_mean(err, in_mask)
        lh = lam_hat[i]
        terms.append(m / (lh * 2.0) + tn.log(lh))
        parts[h] = m.item()
    if not terms:
        return tn.Tensor(0.0), parts
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss, parts
