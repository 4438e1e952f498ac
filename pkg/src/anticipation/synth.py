"""Synthetic surgical workflows: phase sequences, instrument usage, boxes.

Each video walks through the template phases in order. Every node follows a
two-state on/off Markov chain inside each phase whose stationary occupancy
is the phase's presence probability, so presence ``1`` means continuous use
and ``0`` means absence. Labels are derived from the sampled presence, while
detection dropout only removes boxes from the log.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, LabelError
from .spatial import Detection, Labels, detection_line, parse_detection_line

CHOLEC_LIKE = {
    "name": "cholec-like",
    "fps": 1.0,
    "nodes": ["target", "grasper", "bipolar", "hook", "scissors", "clipper", "irrigator", "specimen_bag"],
    "phases": [
        {"name": "preparation", "median_minutes": 0.75, "dispersion": 0.25,
         "presence": {"grasper": 0.8, "hook": 0.3}},
        {"name": "calot_dissection", "median_minutes": 2.5, "dispersion": 0.25,
         "presence": {"grasper": 0.9, "hook": 0.9, "bipolar": 0.1}},
        {"name": "clipping_cutting", "median_minutes": 1.0, "dispersion": 0.25,
         "presence": {"grasper": 0.8, "clipper": 0.6, "scissors": 0.4}},
        {"name": "gallbladder_dissection", "median_minutes": 2.0, "dispersion": 0.25,
         "presence": {"grasper": 0.9, "hook": 0.8, "bipolar": 0.2, "irrigator": 0.1}},
        {"name": "packaging", "median_minutes": 0.75, "dispersion": 0.25,
         "presence": {"grasper": 0.7, "specimen_bag": 0.9}},
        {"name": "cleaning_coagulation", "median_minutes": 1.0, "dispersion": 0.25,
         "presence": {"grasper": 0.6, "irrigator": 0.7, "bipolar": 0.5}},
    ],
    "bout_minutes": 0.5,
    "smoothness": 0.01,
    "pull": 0.02,
    "box_size": {"target": [0.35, 0.3]},
    "default_box_size": [0.12, 0.08],
    "size_jitter": 0.05,
    "progress_cue": 0.5,
    "dropout": 0.05,
    "confidence": {"alpha": 8.0, "beta": 2.0, "min": 0.05},
}


@dataclass
class PhaseSpec:
    name: str
    median_minutes: float
    dispersion: float
    presence: dict


@dataclass
class WorkflowTemplate:
    name: str
    fps: float
    nodes: list
    phases: list
    bout_minutes: float = 1.0
    smoothness: float = 0.01
    pull: float = 0.02
    box_size: dict = field(default_factory=dict)
    default_box_size: tuple = (0.12, 0.08)
    size_jitter: float = 0.05
    progress_cue: float = 0.5
    dropout: float = 0.05
    confidence: dict = field(default_factory=lambda: {"alpha": 8.0, "beta": 2.0, "min": 0.05})

    @property
    def n_nodes(self):
        return len(self.nodes)

    def presence(self, phase, node):
        # the surgical target (node 0) is present unless a phase says otherwise
        default = 1.0 if node == 0 else 0.0
        return float(phase.presence.get(self.nodes[node], default))

    def event_names(self):
        return ([f"instrument:{n}" for n in self.nodes[1:]] +
                [f"phase:{p.name}" for p in self.phases])

    def event_kinds(self):
        return {e: e.split(":", 1)[0] for e in self.event_names()}

    def to_dict(self):
        d = copy.deepcopy(self.__dict__)
        d["phases"] = [copy.deepcopy(p.__dict__) for p in self.phases]
        d["default_box_size"] = list(self.default_box_size)
        return d

    @classmethod
    def from_dict(cls, d):
        def need(obj, key, path):
            if key not in obj:
                raise ConfigError("missing field", f"{path}.{key}" if path else key)
            return obj[key]

        def number(v, path, lo=None, hi=None, strict_lo=False):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"expected a number, got {v!r}", path)
            v = float(v)
            if lo is not None and (v <= lo if strict_lo else v < lo):
                raise ConfigError(f"must be {'>' if strict_lo else '>='} {lo}, got {v}", path)
            if hi is not None and v > hi:
                raise ConfigError(f"must be <= {hi}, got {v}", path)
            return v

        nodes = need(d, "nodes", "")
        if not isinstance(nodes, list) or not nodes or len(set(nodes)) != len(nodes):
            raise ConfigError("must be a non-empty list of unique names", "nodes")
        raw_phases = need(d, "phases", "")
        if not isinstance(raw_phases, list) or not raw_phases:
            raise ConfigError("must be a non-empty list", "phases")
        phases = []
        for i, p in enumerate(raw_phases):
            path = f"phases[{i}]"
            presence = p.get("presence", {})
            for node, prob in presence.items():
                if node not in nodes:
                    raise ConfigError(f"unknown node {node!r}", f"{path}.presence.{node}")
                number(prob, f"{path}.presence.{node}", 0.0, 1.0)
            phases.append(PhaseSpec(str(need(p, "name", path)),
                                    number(need(p, "median_minutes", path), f"{path}.median_minutes", 0.0, strict_lo=True),
                                    number(p.get("dispersion", 0.0), f"{path}.dispersion", 0.0),
                                    {k: float(v) for k, v in presence.items()}))
        if len({p.name for p in phases}) != len(phases):
            raise ConfigError("phase names must be unique", "phases")
        conf = dict(d.get("confidence", {"alpha": 8.0, "beta": 2.0, "min": 0.05}))
        for key in ("alpha", "beta"):
            number(conf.get(key), f"confidence.{key}", 0.0, strict_lo=True)
        number(conf.get("min", 0.0), "confidence.min", 0.0, 1.0)
        for name, size in d.get("box_size", {}).items():
            if name not in nodes:
                raise ConfigError(f"unknown node {name!r}", f"box_size.{name}")
            for j, v in enumerate(size):
                number(v, f"box_size.{name}[{j}]", 0.0, 1.0, strict_lo=True)
        return cls(
            name=str(d.get("name", "custom")),
            fps=number(need(d, "fps", ""), "fps", 0.0, strict_lo=True),
            nodes=list(nodes),
            phases=phases,
            bout_minutes=number(d.get("bout_minutes", 1.0), "bout_minutes", 0.0, strict_lo=True),
            smoothness=number(d.get("smoothness", 0.01), "smoothness", 0.0),
            pull=number(d.get("pull", 0.02), "pull", 0.0, 1.0),
            box_size={k: list(v) for k, v in d.get("box_size", {}).items()},
            default_box_size=tuple(d.get("default_box_size", (0.12, 0.08))),
            size_jitter=number(d.get("size_jitter", 0.05), "size_jitter", 0.0),
            progress_cue=number(d.get("progress_cue", 0.0), "progress_cue", 0.0, 1.0),
            dropout=number(d.get("dropout", 0.0), "dropout", 0.0, 1.0),
            confidence={k: float(v) for k, v in conf.items()},
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_template():
    return WorkflowTemplate.from_dict(CHOLEC_LIKE)


@dataclass
class SyntheticVideo:
    name: str
    frames: dict
    labels: Labels
    phase_frames: list
    seed: tuple


def _on_off(rng, n, p, bout):
    """Boolean occupancy of length ``n`` with stationary probability ``p``."""
    if p >= 1.0:
        return np.ones(n, dtype=bool)
    if p <= 0.0:
        return np.zeros(n, dtype=bool)
    mean_on = bout
    mean_off = bout * (1.0 - p) / p
    out = np.zeros(n, dtype=bool)
    state = rng.random() < p
    t = 0
    while t < n:
        mean = mean_on if state else mean_off
        run = int(rng.geometric(min(1.0, 1.0 / max(mean, 1.0))))
        out[t:t + run] = state
        t += run
        state = not state
    return out


def _runs(mask):
    """Half-open ``[start, end)`` intervals of True runs."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def generate_video(template, seed, index):
    rng = np.random.default_rng([seed, index])
    fps = template.fps
    lengths = []
    for p in template.phases:
        minutes = p.median_minutes * np.exp(p.dispersion * rng.standard_normal())
        lengths.append(max(1, int(round(minutes * 60.0 * fps))))
    bounds = np.concatenate([[0], np.cumsum(lengths)]).astype(int)
    T = int(bounds[-1])
    N = template.n_nodes
    bout = template.bout_minutes * 60.0 * fps

    present = np.zeros((T, N), dtype=bool)
    progress = np.zeros(T)
    for i, p in enumerate(template.phases):
        a, b = bounds[i], bounds[i + 1]
        progress[a:b] = np.arange(b - a) / (b - a)
        for n in range(N):
            present[a:b, n] = _on_off(rng, b - a, template.presence(p, n), bout)

    anchors = rng.uniform(0.25, 0.75, (N, 2))
    centers = np.empty((T, N, 2))
    pos = anchors.copy()
    steps = rng.standard_normal((T, N, 2)) * template.smoothness
    for t in range(T):
        pos = np.clip(pos + template.pull * (anchors - pos) + steps[t], 0.0, 1.0)
        centers[t] = pos
    base = np.array([template.box_size.get(name, template.default_box_size) for name in template.nodes], dtype=float)
    sizes = base[None] * (1.0 + template.size_jitter * rng.standard_normal((T, N, 2)))
    sizes[:, 0, :] *= (1.0 - template.progress_cue * progress)[:, None]
    sizes = np.clip(sizes, 0.01, 1.0)
    c = template.confidence
    conf = np.clip(rng.beta(c["alpha"], c["beta"], (T, N)), c.get("min", 0.0), 1.0)
    keep = rng.random((T, N)) >= template.dropout

    feats = np.round(np.concatenate([centers, sizes, conf[..., None]], axis=-1), 4)
    frames = {}
    for t in range(T):
        frames[t] = [Detection(n, *map(float, feats[t, n])) for n in range(N) if present[t, n] and keep[t, n]]

    events = {}
    for n in range(1, N):
        events[f"instrument:{template.nodes[n]}"] = _runs(present[:, n])
    for i, p in enumerate(template.phases):
        events[f"phase:{p.name}"] = [(int(bounds[i]), int(bounds[i + 1]))]
    labels = Labels(fps=fps, duration_frames=T, events=events)
    return SyntheticVideo(f"video_{index:03d}", frames, labels, lengths, (seed, index))


def generate(template, seed, n_videos, out_dir):
    """Write ``n_videos`` synthetic videos plus ``dataset.json`` into ``out_dir``."""
    if n_videos < 1:
        raise ConfigError(f"need at least one video, got {n_videos}", "videos")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    videos = []
    for i in range(n_videos):
        v = generate_video(template, seed, i)
        with open(out / f"{v.name}.detections.jsonl", "w") as fh:
            for t in range(v.labels.duration_frames):
                fh.write(detection_line(t, v.frames[t]) + "\n")
        (out / f"{v.name}.labels.json").write_text(json.dumps(v.labels.to_dict(), sort_keys=True) + "\n")
        videos.append(v)
    manifest = {"template": template.name, "fps": template.fps, "nodes": template.nodes,
                "events": template.event_names(), "event_kinds": template.event_kinds(),
                "seed": seed, "videos": [v.name for v in videos]}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out / "template.json").write_text(json.dumps(template.to_dict(), indent=1) + "\n")
    return videos


@dataclass
class Violation:
    file: str
    line: int
    kind: str
    message: str

    def __str__(self):
        where = f"{self.file}:{self.line}" if self.line else self.file
        return f"{where}: [{self.kind}] {self.message}"


@dataclass
class ValidationReport:
    violations: list
    videos: int

    @property
    def ok(self):
        return not self.violations


def _check_detection_file(path, n_nodes, duration, out):
    last = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                out.append(Violation(path.name, lineno, "schema", f"malformed JSON: {exc.msg}"))
                continue
            for d in rec.get("detections", []) if isinstance(rec, dict) else []:
                for f in ("x", "y", "w", "h", "conf"):
                    v = d.get(f) if isinstance(d, dict) else None
                    if isinstance(v, (int, float)) and not 0.0 <= v <= 1.0:
                        out.append(Violation(path.name, lineno, "range", f"{f}={v} outside [0, 1]"))
            try:
                frame, dets = parse_detection_line(line)
            except IngestionError as exc:
                if "outside [0, 1]" not in str(exc):
                    out.append(Violation(path.name, lineno, "schema", str(exc)))
                continue
            if frame <= last:
                out.append(Violation(path.name, lineno, "order", f"frame {frame} after frame {last}"))
            last = max(last, frame)
            if duration is not None and frame >= duration:
                out.append(Violation(path.name, lineno, "range", f"frame {frame} >= duration {duration}"))
            for d in dets:
                if n_nodes is not None and d.class_id >= n_nodes:
                    out.append(Violation(path.name, lineno, "range", f"class_id {d.class_id} >= N={n_nodes}"))


def validate_dataset(path):
    """Schema, range, interval-overlap and fps checks over a dataset directory."""
    root = Path(path)
    out = []
    manifest = {}
    if (root / "dataset.json").exists():
        manifest = json.loads((root / "dataset.json").read_text())
    n_nodes = len(manifest["nodes"]) if "nodes" in manifest else None
    fps_seen = set()
    if "fps" in manifest:
        fps_seen.add(float(manifest["fps"]))
    logs = sorted(root.glob("*.detections.jsonl"))
    for log in logs:
        stem = log.name[: -len(".detections.jsonl")]
        label_path = root / f"{stem}.labels.json"
        duration = None
        if not label_path.exists():
            out.append(Violation(log.name, 0, "missing", f"no label file {label_path.name}"))
        else:
            try:
                labels = Labels.from_dict(json.loads(label_path.read_text()))
            except (json.JSONDecodeError, LabelError) as exc:
                out.append(Violation(label_path.name, 0, "schema", str(exc)))
                labels = None
            if labels is not None:
                duration = labels.duration_frames
                if fps_seen and labels.fps not in fps_seen:
                    out.append(Violation(label_path.name, 0, "fps",
                                         f"fps {labels.fps} differs from {sorted(fps_seen)}"))
                fps_seen.add(labels.fps)
                for name, ivs in labels.events.items():
                    ivs = sorted(ivs)
                    for a, b in ivs:
                        if b <= a or a < 0 or b > duration:
                            out.append(Violation(label_path.name, 0, "interval",
                                                 f"{name}: interval [{a}, {b}) invalid for duration {duration}"))
                    for (a0, b0), (a1, b1) in zip(ivs, ivs[1:]):
                        if a1 < b0:
                            out.append(Violation(label_path.name, 0, "overlap",
                                                 f"{name}: [{a0}, {b0}) overlaps [{a1}, {b1})"))
        _check_detection_file(log, n_nodes, duration, out)
    return ValidationReport(out, len(logs))
