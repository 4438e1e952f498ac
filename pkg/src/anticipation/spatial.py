"""Per-frame detections to the attention-weighted box tensor.

Detection logs are JSON Lines, one frame per line::

    {"frame": 0, "detections": [{"class_id": 1, "x": 0.5, "y": 0.5,
                                  "w": 0.2, "h": 0.1, "conf": 0.9}]}

Label files are JSON: ``{"fps": 1.0, "duration_frames": 900,
"events": {"phase:preparation": [[0, 180]], ...}}`` where each interval is
half-open, ``[start_frame, end_frame)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import IngestionError, LabelError

FEATURES = ("x", "y", "w", "h", "conf")
B = len(FEATURES)


@dataclass(frozen=True)
class Detection:
    class_id: int
    x: float
    y: float
    w: float
    h: float
    conf: float

    def __post_init__(self):
        for f in FEATURES:
            v = getattr(self, f)
            if not (0.0 <= v <= 1.0):
                raise IngestionError(f"detection field {f}={v} outside [0, 1]")
        if self.class_id < 0:
            raise IngestionError(f"negative class_id {self.class_id}")

    def features(self):
        return [self.x, self.y, self.w, self.h, self.conf]

    def to_dict(self):
        return {"class_id": int(self.class_id), "x": self.x, "y": self.y,
                "w": self.w, "h": self.h, "conf": self.conf}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(int(d["class_id"]), *(float(d[f]) for f in FEATURES))
        except KeyError as exc:
            raise IngestionError(f"detection missing field {exc.args[0]!r}") from None


@dataclass
class BoxSequence:
    """``T x N x 5`` box features plus the frame rate used for time units."""

    data: np.ndarray
    fps: float

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def nodes(self):
        return self.data.shape[1]

    def minutes(self, frame):
        return frame / self.fps / 60.0


def frame_features(detections, n_nodes, frame=None):
    """One ``N x 5`` slice. Duplicate classes keep the most confident box."""
    out = np.zeros((n_nodes, B))
    for det in detections:
        if det.class_id >= n_nodes:
            where = f" in frame {frame}" if frame is not None else ""
            raise IngestionError(f"class_id {det.class_id} >= N={n_nodes}{where}")
        if det.conf > out[det.class_id, 4] or not out[det.class_id].any():
            out[det.class_id] = det.features()
    return out


def assemble_sequence(frames, n_nodes, n_frames=None, fps=1.0):
    """Stack per-frame detection lists into a :class:`BoxSequence`.

    ``frames`` is either a list indexed by frame or a mapping
    ``frame -> detections``; frames missing from a mapping are empty.
    """
    if isinstance(frames, dict):
        if n_frames is None:
            n_frames = (max(frames) + 1) if frames else 0
        bad = [f for f in frames if not 0 <= f < n_frames]
        if bad:
            raise IngestionError(f"frame indices outside [0, {n_frames}): {sorted(bad)[:5]}")
        items = [frames.get(t, ()) for t in range(n_frames)]
    else:
        items = list(frames)
        if n_frames is not None and len(items) != n_frames:
            raise IngestionError(f"expected {n_frames} frames, got {len(items)}")
    data = np.zeros((len(items), n_nodes, B))
    for t, dets in enumerate(items):
        data[t] = frame_features(dets, n_nodes, frame=t)
    return BoxSequence(data, float(fps))


def parse_detection_line(line):
    """``(frame, [Detection])`` from one detection-log line."""
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"malformed JSON: {exc.msg}") from None
    if not isinstance(rec, dict) or "frame" not in rec:
        raise IngestionError("record lacks a 'frame' field")
    frame = rec["frame"]
    if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
        raise IngestionError(f"invalid frame index {frame!r}")
    dets = rec.get("detections", [])
    if not isinstance(dets, list):
        raise IngestionError("'detections' must be a list")
    return frame, [Detection.from_dict(d) for d in dets]


def read_detection_log(path):
    """``{frame: [Detection]}`` from a JSON Lines file; errors carry the line number."""
    frames = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frame, dets = parse_detection_line(line)
            except IngestionError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
            if frame in frames:
                raise IngestionError(f"{path}:{lineno}: duplicate frame {frame}")
            frames[frame] = dets
    return frames


def detection_line(frame, detections):
    return json.dumps({"frame": int(frame), "detections": [d.to_dict() for d in detections]})


def write_detection_log(path, frames):
    with open(path, "w") as fh:
        for frame in sorted(frames):
            fh.write(detection_line(frame, frames[frame]) + "\n")


def sequence_to_frames(seq):
    """Inverse of :func:`assemble_sequence` for rows with nonzero content."""
    frames = {}
    for t in range(seq.frames):
        dets = []
        for n in range(seq.nodes):
            row = seq.data[t, n]
            if row.any():
                dets.append(Detection(n, *map(float, row)))
        frames[t] = dets
    return frames


@dataclass
class Labels:
    fps: float
    duration_frames: int
    events: dict

    def to_dict(self):
        return {"fps": self.fps, "duration_frames": self.duration_frames,
                "events": {k: [list(map(int, iv)) for iv in v] for k, v in self.events.items()}}

    @classmethod
    def from_dict(cls, d):
        try:
            fps = float(d["fps"])
            duration = int(d["duration_frames"])
            events = {str(k): [(int(a), int(b)) for a, b in v] for k, v in d["events"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise LabelError(f"malformed label record: {exc}") from None
        if fps <= 0:
            raise LabelError(f"fps must be > 0, got {fps}")
        return cls(fps, duration, events)


def read_labels(path):
    with open(path) as fh:
        return Labels.from_dict(json.load(fh))


def write_labels(path, labels):
    Path(path).write_text(json.dumps(labels.to_dict(), sort_keys=True) + "\n")


# temporal attention


@dataclass
class TemporalAttentionParams:
    """Causal conv kernels (``K_a x 1 x 1``) applied to max- and mean-pooled frames."""

    k_max: tn.Tensor
    k_avg: tn.Tensor

    @classmethod
    def init(cls, rng, width=3):
        bound = np.sqrt(6.0 / (2 * width))
        mk = lambda: tn.Tensor(rng.uniform(-bound, bound, (width, 1, 1)), requires_grad=True)
        return cls(mk(), mk())

    @classmethod
    def zeros(cls, width=3):
        return cls(tn.Tensor(np.zeros((width, 1, 1)), requires_grad=True),
                   tn.Tensor(np.zeros((width, 1, 1)), requires_grad=True))

    def named(self):
        return {"attn.max.K": self.k_max, "attn.avg.K": self.k_avg}


def pooled_frames(b):
    """Per-frame max and mean over node and feature axes, each ``T x 1``."""
    b = tn.as_tensor(b)
    return b.max(axis=(1, 2)).reshape(-1, 1), b.mean(axis=(1, 2)).reshape(-1, 1)


def attention_from_pooled(pmax, pavg, params):
    logits = tn.causal_conv1d(pmax, params.k_max) + tn.causal_conv1d(pavg, params.k_avg)
    return tn.sigmoid(logits).reshape(-1)


def temporal_attention(b, params):
    """Reweight each frame of ``b`` (``T x N x B``) by a causal score in (0, 1).

    Returns ``(b_hat, attn)`` with ``attn`` of shape ``T``.
    """
    b = tn.as_tensor(b)
    attn = attention_from_pooled(*pooled_frames(b), params)
    return b * attn.reshape(-1, 1, 1), attn
