"""Graph convolution, slot fusion, temporal convolution and prediction head.

Internal layouts keep channels last: graph features are ``T x k x N x C``,
fused and temporal features ``T x N x C``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .graphs import PolicyNet, gumbel_sinkhorn, policy_forward, select_topk
from .spatial import B, TemporalAttentionParams, temporal_attention


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return tn.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def normalize_adjacency(adj):
    """``D^-1/2 (A + I) D^-1/2`` over the last two axes, D the row sums of A + I."""
    adj = tn.as_tensor(adj)
    n = adj.shape[-1]
    a = adj + np.eye(n)
    d = tn.power(a.sum(axis=-1, keepdims=True), -0.5)
    return a * d * tn.transpose(d, tuple(range(d.ndim - 2)) + (d.ndim - 1, d.ndim - 2))


@dataclass
class GraphConvStack:
    """``weights[l][s]``: layer ``l`` kernel for selection slot ``s``."""

    weights: list

    @classmethod
    def init(cls, rng, k, in_dim, width, layers=2):
        dims = [in_dim] + [width] * layers
        return cls([[_glorot(rng, (cin, cout), cin, cout) for _ in range(k)]
                    for cin, cout in zip(dims[:-1], dims[1:])])

    @property
    def k(self):
        return len(self.weights[0])

    def named(self):
        return {f"gcn.slot{s + 1}.layer{l + 1}.W": w
                for l, layer in enumerate(self.weights) for s, w in enumerate(layer)}


def graph_conv_forward(b_hat, adj_stacks, stack, activation=tn.relu):
    """Per-slot two-layer GCN. ``b_hat``: ``T x N x B``; ``adj_stacks``: ``T x k x N x N``."""
    a_hat = normalize_adjacency(adj_stacks)
    h = tn.as_tensor(b_hat)
    h = h.reshape(h.shape[0], 1, h.shape[1], h.shape[2])
    n_layers = len(stack.weights)
    for l, layer in enumerate(stack.weights):
        w = tn.stack(layer, axis=0)
        h = tn.matmul(tn.matmul(a_hat, h), w)
        if l < n_layers - 1:
            h = activation(h)
    return h


@dataclass
class FusionParams:
    Wg: tn.Tensor

    @classmethod
    def init(cls, rng, k):
        return cls(_glorot(rng, (k, k), k, k))

    def named(self):
        return {"fusion.Wg": self.Wg}


def fuse_slots(h, params, return_attention=False):
    """Squeeze-excitation over slots: ``T x k x N x C`` to ``T x N x C``."""
    h = tn.as_tensor(h)
    desc = h.mean(axis=(2, 3))
    attn = tn.sigmoid(tn.matmul(desc, params.Wg))
    fused = (h * attn.reshape(attn.shape + (1, 1))).mean(axis=1)
    return (fused, attn) if return_attention else fused


@dataclass
class TemporalStack:
    kernels: list
    biases: list

    @classmethod
    def init(cls, rng, in_dim, width, layers=8, K=3):
        dims = [in_dim] + [width] * layers
        kernels = [_glorot(rng, (K, cin, cout), K * cin, K * cout) for cin, cout in zip(dims[:-1], dims[1:])]
        biases = [tn.Tensor(np.zeros(cout), requires_grad=True) for cout in dims[1:]]
        return cls(kernels, biases)

    @property
    def layers(self):
        return len(self.kernels)

    def dilation(self, layer):
        return 2 ** layer

    def named(self):
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases), 1):
            out[f"tcn.layer{i}.K"] = k
            out[f"tcn.layer{i}.b"] = b
        return out

    def layer(self, i, x, activation=tn.relu):
        return activation(tn.causal_conv2d_time(x, self.kernels[i], self.dilation(i)) + self.biases[i])


def temporal_forward(h, stack, activation=tn.relu):
    x = tn.as_tensor(h)
    for i in range(stack.layers):
        x = stack.layer(i, x, activation)
    return x


@dataclass
class PredictionHead:
    W1: tn.Tensor
    b1: tn.Tensor
    W2: tn.Tensor
    b2: tn.Tensor
    prefix: str = "head"

    @classmethod
    def init(cls, rng, in_dim, hidden, out_dim, prefix="head"):
        return cls(_glorot(rng, (in_dim, hidden), in_dim, hidden),
                   tn.Tensor(np.zeros(hidden), requires_grad=True),
                   _glorot(rng, (hidden, out_dim), hidden, out_dim),
                   tn.Tensor(np.zeros(out_dim), requires_grad=True), prefix)

    def named(self):
        p = self.prefix
        return {f"{p}.fc1.W": self.W1, f"{p}.fc1.b": self.b1,
                f"{p}.fc2.W": self.W2, f"{p}.fc2.b": self.b2}


def head_forward(h, head):
    """``T x N x C`` features to nonnegative ``T x E`` countdowns (minutes)."""
    h = tn.as_tensor(h)
    x = h.reshape(h.shape[0], -1)
    x = tn.relu(tn.matmul(x, head.W1) + head.b1)
    return tn.softplus(tn.matmul(x, head.W2) + head.b2)


@dataclass
class ModelDims:
    n_nodes: int
    n_events: int
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
    aux_head: bool = False

    def validate(self):
        for name in ("n_nodes", "n_events", "C", "k", "l_p", "l_t", "policy_width", "gcn_width",
                     "tcn_width", "head_hidden", "K_a", "K_p", "K_t", "n_sinkhorn"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"must be a positive integer, got {v!r}", name)
        if self.k > self.C:
            raise ConfigError(f"k={self.k} exceeds C={self.C}", "k")
        if not self.tau > 0:
            raise ConfigError(f"must be > 0, got {self.tau}", "tau")

    def to_dict(self):
        return asdict(self)

    def receptive_field(self):
        """Input frames that can influence one output frame."""
        pol = (self.K_p - 1) * (2 ** self.l_p - 1)
        tcn = (self.K_t - 1) * (2 ** self.l_t - 1)
        return (self.K_a - 1) + pol + tcn + 1


@dataclass
class ForwardResult:
    pred: tn.Tensor
    attn: tn.Tensor
    selection: tn.Tensor
    slot_attention: tn.Tensor
    aux: tn.Tensor = None


class AnticipationModel:
    """Boxes ``T x N x 5`` to per-frame countdowns ``T x E`` (minutes)."""

    def __init__(self, dims, candidates, attention, policy, gcn, fusion, tcn, head, aux_head=None):
        dims.validate()
        if candidates.n_nodes != dims.n_nodes:
            raise ConfigError(f"candidate set has N={candidates.n_nodes}, model N={dims.n_nodes}", "N")
        if candidates.C != dims.C:
            raise ConfigError(f"candidate set has C={candidates.C}, model C={dims.C}", "C")
        self.dims = dims
        self.candidates = candidates
        self.adjacency = candidates.adjacency_stack()
        self.attention = attention
        self.policy = policy
        self.gcn = gcn
        self.fusion = fusion
        self.tcn = tcn
        self.head = head
        self.aux_head = aux_head

    @classmethod
    def init(cls, dims, candidates, seed=0):
        dims.validate()
        rng = np.random.default_rng([seed, 0x5EED])
        n = dims.n_nodes
        attention = TemporalAttentionParams.init(rng, dims.K_a)
        policy = PolicyNet.init(rng, n * B, dims.C, dims.l_p, dims.policy_width, dims.K_p)
        gcn = GraphConvStack.init(rng, dims.k, B, dims.gcn_width)
        fusion = FusionParams.init(rng, dims.k)
        tcn = TemporalStack.init(rng, dims.gcn_width, dims.tcn_width, dims.l_t, dims.K_t)
        head = PredictionHead.init(rng, n * dims.tcn_width, dims.head_hidden, dims.n_events)
        aux = (PredictionHead.init(rng, n * dims.tcn_width, dims.head_hidden, 1, prefix="head.aux")
               if dims.aux_head else None)
        return cls(dims, candidates, attention, policy, gcn, fusion, tcn, head, aux)

    def parameters(self):
        out = {}
        for part in (self.attention, self.policy, self.gcn, self.fusion, self.tcn, self.head):
            out.update(part.named())
        if self.aux_head is not None:
            out.update(self.aux_head.named())
        return out

    def load_state(self, arrays):
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ConfigError(f"checkpoint lacks tensors {missing[:3]}", "checkpoint")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ConfigError(f"{name}: shape {arrays[name].shape} != {p.shape}", "checkpoint")
            p.data = np.array(arrays[name], dtype=np.float64)

    def select(self, b_hat, mode, noise=None):
        logits = policy_forward(b_hat, self.policy)
        return gumbel_sinkhorn(logits, self.dims.tau, self.dims.n_sinkhorn, noise, mode)

    def spatial_features(self, b_hat, selection):
        """Graph-convolved and slot-fused features ``T x N x C`` for a given selection."""
        adj = select_topk(self.adjacency, selection, self.dims.k)
        h = graph_conv_forward(b_hat, adj, self.gcn)
        return fuse_slots(h, self.fusion, return_attention=True)

    def forward(self, boxes, mode="soft", noise=None):
        data = getattr(boxes, "data", boxes)
        b = tn.as_tensor(data)
        if b.ndim != 3 or b.shape[1:] != (self.dims.n_nodes, B):
            raise ConfigError(f"boxes must be T x {self.dims.n_nodes} x {B}, got {b.shape}", "N")
        b_hat, attn = temporal_attention(b, self.attention)
        sel = self.select(b_hat, mode, noise)
        fused, slot_attn = self.spatial_features(b_hat, sel)
        feats = temporal_forward(fused, self.tcn)
        pred = head_forward(feats, self.head)
        aux = head_forward(feats, self.aux_head) if self.aux_head is not None else None
        return ForwardResult(pred, attn, sel, slot_attn, aux)

    def predict(self, boxes, mode="hard"):
        """Noise-free inference with row-invariant kernels; returns ``T x E`` array."""
        with tn.no_grad(), tn.row_invariant():
            return self.forward(boxes, mode=mode).pred.data
