"""Run configuration: JSON schema, profile defaults, validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .network import ModelDims

PROFILES = ("instrument-phase", "rsd")

# Defaults per profile; everything not listed is shared.
PROFILE_DEFAULTS = {
    "instrument-phase": {
        "l_p": 8, "l_t": 8, "horizons": [2.0, 3.0, 5.0, 7.0],
        "optimizer": {"lr": 0.002, "weight_decay": 0.00002, "batch_size": 2, "epochs": 100},
    },
    "rsd": {
        "l_p": 11, "l_t": 11, "horizons": [2.0, 5.0, "inf"],
        "optimizer": {"lr": 0.0003, "weight_decay": 0.00005, "batch_size": 4, "epochs": 100},
        "eval_horizons": [],
    },
}


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 0.002
    weight_decay: float = 0.00002
    batch_size: int = 2
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    profile: str = "instrument-phase"
    train_data: str = ""
    val_data: str = ""
    events: list = field(default_factory=list)
    N: int = 8
    C: int = 10
    k: int = 3
    l_p: int = 8
    l_t: int = 8
    policy_width: int = 32
    gcn_width: int = 32
    tcn_width: int = 64
    head_hidden: int = 64
    K_a: int = 3
    K_p: int = 3
    K_t: int = 3
    tau: float = 1.0
    n_sinkhorn: int = 10
    presence_threshold: float = 0.5
    horizons: list = field(default_factory=lambda: [2.0, 3.0, 5.0, 7.0])
    eval_horizons: list = field(default_factory=lambda: [2.0, 3.0, 5.0])
    fps: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    val_fraction: float = 0.2
    eval_selection: str = "hard"
    aux_head: bool = False

    @classmethod
    def for_profile(cls, profile="instrument-phase", **overrides):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}", "profile")
        d = {"profile": profile}
        d.update(json.loads(json.dumps(PROFILE_DEFAULTS[profile])))
        for key, val in overrides.items():
            if key == "optimizer":
                d.setdefault("optimizer", {}).update(val)
            else:
                d[key] = val
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        profile = d.get("profile", "instrument-phase")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}", "profile")
        base = json.loads(json.dumps(PROFILE_DEFAULTS[profile]))
        opt = dict(base.pop("optimizer"))
        opt.update(d.get("optimizer", {}) or {})
        merged = {**base, **{k: v for k, v in d.items() if k != "optimizer"}}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigError("unknown field", unknown[0])
        opt_known = {f.name for f in fields(OptimizerConfig)}
        bad = sorted(set(opt) - opt_known)
        if bad:
            raise ConfigError("unknown field", f"optimizer.{bad[0]}")
        merged["horizons"] = [_horizon(h, f"horizons[{i}]") for i, h in enumerate(merged.get("horizons", []))]
        merged["eval_horizons"] = [_horizon(h, f"eval_horizons[{i}]")
                                   for i, h in enumerate(merged.get("eval_horizons", [2.0, 3.0, 5.0]))]
        cfg = cls(**merged, optimizer=OptimizerConfig(**opt))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})", str(path)) from None

    def to_dict(self):
        d = asdict(self)
        d["horizons"] = [_dump_horizon(h) for h in self.horizons]
        d["eval_horizons"] = [_dump_horizon(h) for h in self.eval_horizons]
        return d

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def dims(self, n_events):
        return ModelDims(n_nodes=self.N, n_events=n_events, C=self.C, k=self.k, l_p=self.l_p, l_t=self.l_t,
                         policy_width=self.policy_width, gcn_width=self.gcn_width, tcn_width=self.tcn_width,
                         head_hidden=self.head_hidden, K_a=self.K_a, K_p=self.K_p, K_t=self.K_t,
                         tau=self.tau, n_sinkhorn=self.n_sinkhorn, aux_head=self.aux_head)

    def validate(self):
        _positive_int(self, ("N", "C", "k", "l_p", "l_t", "policy_width", "gcn_width", "tcn_width",
                             "head_hidden", "K_a", "K_p", "K_t", "n_sinkhorn"))
        if self.k > self.C:
            raise ConfigError(f"k={self.k} must not exceed C={self.C}", "k")
        _positive_float(self, ("tau", "fps"))
        if not 0.0 <= self.presence_threshold <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.presence_threshold}", "presence_threshold")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.val_fraction}", "val_fraction")
        _check_horizons(self.horizons, "horizons", allow_unbounded=True, allow_empty=False)
        _check_horizons(self.eval_horizons, "eval_horizons", allow_unbounded=False, allow_empty=True)
        if self.profile == "rsd" and not math.isinf(self.horizons[-1]):
            raise ConfigError("the rsd profile needs an unbounded last horizon", "horizons")
        if self.profile != "rsd" and math.isinf(self.horizons[-1]):
            raise ConfigError("unbounded horizons are only valid for the rsd profile", "horizons")
        if self.eval_selection not in ("soft", "hard"):
            raise ConfigError(f"must be 'soft' or 'hard', got {self.eval_selection!r}", "eval_selection")
        if not isinstance(self.events, list) or not all(isinstance(e, str) for e in self.events):
            raise ConfigError("must be a list of event names", "events")
        if len(set(self.events)) != len(self.events):
            raise ConfigError("event names must be unique", "events")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"must be a nonnegative integer, got {self.seed!r}", "seed")
        if not isinstance(self.aux_head, bool):
            raise ConfigError("must be true or false", "aux_head")
        o = self.optimizer
        if o.name != "adamw":
            raise ConfigError(f"unsupported optimizer {o.name!r} (only 'adamw')", "optimizer.name")
        for name in ("lr",):
            v = getattr(o, name)
            if _bad_number(v) or not v > 0:
                raise ConfigError(f"must be > 0, got {v!r}", f"optimizer.{name}")
        if _bad_number(o.weight_decay) or o.weight_decay < 0:
            raise ConfigError(f"must be >= 0, got {o.weight_decay!r}", "optimizer.weight_decay")
        for name in ("batch_size", "epochs"):
            v = getattr(o, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"must be a positive integer, got {v!r}", f"optimizer.{name}")
        for name in ("beta1", "beta2"):
            v = getattr(o, name)
            if _bad_number(v) or not 0.0 <= v < 1.0:
                raise ConfigError(f"must lie in [0, 1), got {v!r}", f"optimizer.{name}")
        if _bad_number(o.eps) or not o.eps > 0:
            raise ConfigError(f"must be > 0, got {o.eps!r}", "optimizer.eps")


def _bad_number(v):
    return isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v)


def _positive_int(cfg, names):
    for name in names:
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"must be a positive integer, got {v!r}", name)


def _positive_float(cfg, names):
    for name in names:
        v = getattr(cfg, name)
        if _bad_number(v) or not v > 0 or math.isinf(v):
            raise ConfigError(f"must be a finite number > 0, got {v!r}", name)


def _horizon(h, path):
    if isinstance(h, str) and h.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if _bad_number(h):
        raise ConfigError(f"horizon must be a number or 'inf', got {h!r}", path)
    return float(h)


def _dump_horizon(h):
    return "inf" if math.isinf(h) else h


def _check_horizons(hs, path, allow_unbounded, allow_empty):
    if not hs and not allow_empty:
        raise ConfigError("at least one horizon is required", path)
    for i, h in enumerate(hs):
        if not h > 0:
            raise ConfigError(f"must be > 0, got {h}", f"{path}[{i}]")
        if math.isinf(h) and (not allow_unbounded or i != len(hs) - 1):
            raise ConfigError("only the last training horizon may be 'inf'", f"{path}[{i}]")
        if i and h <= hs[i - 1]:
            raise ConfigError(f"horizons must be strictly increasing ({hs[i - 1]} then {h})", f"{path}[{i}]")
