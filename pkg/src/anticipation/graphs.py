"""Candidate interaction graphs and their per-frame differentiable selection."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import tensor as tn
from .errors import ConfigError

PRESENCE_THRESHOLD = 0.5


@dataclass(frozen=True)
class CandidateGraph:
    mask: tuple
    frequency: int

    @property
    def adjacency(self):
        m = np.asarray(self.mask, dtype=float)
        a = np.outer(m, m)
        np.fill_diagonal(a, 0.0)
        return a


@dataclass
class CandidateGraphSet:
    n_nodes: int
    graphs: list

    @property
    def C(self):
        return len(self.graphs)

    def adjacency_stack(self):
        return np.stack([g.adjacency for g in self.graphs])

    def mask_stack(self):
        return np.array([g.mask for g in self.graphs], dtype=float)

    def to_dict(self):
        return {"N": self.n_nodes, "C": self.C,
                "graphs": [{"mask": list(g.mask), "frequency": g.frequency} for g in self.graphs]}

    @classmethod
    def from_dict(cls, d):
        graphs = [CandidateGraph(tuple(bool(v) for v in g["mask"]), int(g["frequency"]))
                  for g in d["graphs"]]
        out = cls(int(d["N"]), graphs)
        if out.C != int(d["C"]):
            raise ConfigError(f"candidate file lists {out.C} graphs but declares C={d['C']}", "C")
        if any(len(g.mask) != out.n_nodes for g in graphs):
            raise ConfigError("candidate mask length differs from N", "graphs")
        return out

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def presence_masks(boxes, threshold=PRESENCE_THRESHOLD):
    """Boolean ``T x N`` presence from the confidence channel."""
    return np.asarray(boxes)[..., 4] >= threshold


def _order_key(item):
    mask, freq = item
    return (-freq, tuple(int(v) for v in mask))


def enumerate_candidates(sequences, n_nodes, C, threshold=PRESENCE_THRESHOLD):
    """The ``C`` most frequent per-frame presence masks across training videos.

    ``sequences`` yields ``T x N x 5`` arrays (or BoxSequence). Frames where
    nothing is detected do not count. Ties in frequency are broken by the
    mask read as a 0/1 tuple, ascending. When fewer than ``C`` distinct masks
    occur, the set is padded with unseen non-empty sub-masks ranked by how
    many frames contain them (their own frequency is recorded as 0).
    """
    if C < 1:
        raise ConfigError(f"C must be >= 1, got {C}", "C")
    counts = Counter()
    for seq in sequences:
        data = getattr(seq, "data", seq)
        if data.shape[1] != n_nodes:
            raise ConfigError(f"sequence has {data.shape[1]} nodes, expected N={n_nodes}", "N")
        for row in presence_masks(data, threshold):
            if row.any():
                counts[tuple(bool(v) for v in row)] += 1
    ranked = sorted(counts.items(), key=_order_key)[:C]
    if len(ranked) < C:
        support = Counter()
        for mask, freq in counts.items():
            idx = [i for i, v in enumerate(mask) if v]
            for r in range(1, len(idx)):
                for sub in combinations(idx, r):
                    m = tuple(i in sub for i in range(n_nodes))
                    support[m] += freq
        extra = sorted(((m, f) for m, f in support.items() if m not in counts), key=_order_key)
        need = C - len(ranked)
        if len(extra) < need:
            raise ConfigError(
                f"only {len(ranked) + len(extra)} distinct node combinations are available; "
                f"choose C <= {len(ranked) + len(extra)}", "C")
        ranked += [(m, 0) for m, _ in extra[:need]]
        ranked.sort(key=_order_key)
    return CandidateGraphSet(n_nodes, [CandidateGraph(m, f) for m, f in ranked])


# policy network


@dataclass
class PolicyNet:
    """Causal dilated TCN from flattened frame features to ``C x C`` logits."""

    kernels: list
    biases: list
    C: int

    @classmethod
    def init(cls, rng, in_dim, C, layers=8, width=32, K=3):
        kernels, biases = [], []
        dims = [in_dim] + [width] * (layers - 1) + [C * C]
        for cin, cout in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (K * cin + K * cout))
            kernels.append(tn.Tensor(rng.uniform(-bound, bound, (K, cin, cout)), requires_grad=True))
            biases.append(tn.Tensor(np.zeros(cout), requires_grad=True))
        return cls(kernels, biases, C)

    @property
    def layers(self):
        return len(self.kernels)

    def dilation(self, layer):
        return 2 ** layer

    def named(self):
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases), 1):
            out[f"policy.layer{i}.K"] = k
            out[f"policy.layer{i}.b"] = b
        return out

    def layer(self, i, x):
        y = tn.causal_conv(x, self.kernels[i], self.dilation(i)) + self.biases[i]
        return tn.relu(y) if i < self.layers - 1 else y


def policy_forward(b_hat, net):
    """Selection logits ``T x C x C`` from ``T x N x B`` weighted boxes."""
    b_hat = tn.as_tensor(b_hat)
    x = b_hat.reshape(b_hat.shape[0], -1)
    for i in range(net.layers):
        x = net.layer(i, x)
    return x.reshape(-1, net.C, net.C)


# Gumbel-Sinkhorn


def gumbel_noise(shape, seed, stream, frame_offset=0):
    """Gumbel draws for ``shape = (T, C, C)``, one counter-based stream per frame.

    Frame ``t`` always receives the same draws for a given ``(seed, stream)``
    no matter how frames are batched, so parallel frames cannot change results.
    """
    T = shape[0]
    out = np.empty(shape)
    key = np.array([seed, stream], dtype=np.uint64)
    for t in range(T):
        counter = np.array([0, 0, frame_offset + t, 0], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
        u = gen.random(shape[1:])
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        out[t] = -np.log(-np.log(u))
    return out


def sinkhorn_log(z, n_iters):
    """Alternating row then column log-normalisation of ``z`` (last two axes)."""
    for _ in range(n_iters):
        z = z - tn.logsumexp(z, axis=-1, keepdims=True)
        z = z - tn.logsumexp(z, axis=-2, keepdims=True)
    return z


def greedy_permutation(m):
    """Row-by-row argmax with used-column masking over ``... x C x C``."""
    m = np.asarray(m, dtype=float)
    lead, C = m.shape[:-2], m.shape[-1]
    flat = m.reshape(-1, C, C)
    out = np.zeros_like(flat)
    used = np.zeros((flat.shape[0], C), dtype=bool)
    rows = np.arange(flat.shape[0])
    for r in range(C):
        cand = np.where(used, -np.inf, flat[:, r, :])
        j = np.argmax(cand, axis=-1)
        out[rows, r, j] = 1.0
        used[rows, j] = True
    return out.reshape(lead + (C, C))


def gumbel_sinkhorn(logits, tau=1.0, n_iters=10, noise=None, mode="soft"):
    """Relaxed (``soft``) or discrete (``hard``) permutation from logits.

    Soft: ``exp(sinkhorn_log((logits + noise) / tau))``, differentiable.
    Hard: greedy permutation of the soft matrix, returned as a constant.
    ``noise`` is an array of Gumbel draws or ``None`` for the noiseless map.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}", "tau")
    if n_iters < 1:
        raise ConfigError(f"Sinkhorn iterations must be >= 1, got {n_iters}", "n_sinkhorn")
    if mode not in ("soft", "hard"):
        raise ConfigError(f"mode must be 'soft' or 'hard', got {mode!r}", "eval_selection")
    z = tn.as_tensor(logits)
    if z.shape[-1] != z.shape[-2]:
        raise ConfigError(f"logits must be square in the last two axes, got {z.shape}", "C")
    if noise is not None:
        z = z + noise
    if mode == "hard":
        with tn.no_grad():
            soft = tn.exp(sinkhorn_log(z * (1.0 / tau), n_iters))
        return tn.Tensor(greedy_permutation(soft.data))
    return tn.exp(sinkhorn_log(z * (1.0 / tau), n_iters))


def select_topk(adjacency, selection, k, masks=None):
    """First ``k`` rows of ``selection @ candidates``.

    ``adjacency`` is ``C x N x N``; ``selection`` is ``... x C x C``. Row ``r``
    of the result is ``sum_c selection[r, c] * adjacency[c]``. Returns the
    ``... x k x N x N`` effective adjacencies, plus ``... x k x N`` node
    weights when ``masks`` (``C x N``) is given.
    """
    adjacency = np.asarray(adjacency, dtype=float)
    C, N, _ = adjacency.shape
    if k > C:
        raise ConfigError(f"k={k} exceeds C={C}", "k")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}", "k")
    sel = tn.as_tensor(selection)
    top = sel[..., :k, :]
    eff = tn.matmul(top, adjacency.reshape(C, N * N)).reshape(sel.shape[:-2] + (k, N, N))
    if masks is None:
        return eff
    return eff, tn.matmul(top, np.asarray(masks, dtype=float))
