"""Frame-by-frame inference with bounded per-layer history."""

from __future__ import annotations

import json
import sys
from collections import deque

import numpy as np

from . import tensor as tn
from .errors import IngestionError
from .graphs import gumbel_sinkhorn
from .network import head_forward
from .spatial import frame_features, parse_detection_line, pooled_frames


class _ConvBuffer:
    """Rolling input window for one causal conv layer."""

    def __init__(self, kernel, dilation, bias=None, activation=None):
        self.kernel = kernel
        self.dilation = dilation
        self.bias = bias
        self.activation = activation
        K = kernel.shape[0]
        self.window = deque(maxlen=tn.conv_receptive_field(K, dilation))

    def step(self, x):
        self.window.append(x)
        y = tn.causal_conv_step(np.stack(self.window), self.kernel.data, self.dilation)
        if self.bias is not None:
            y = y + self.bias.data
        if self.activation is not None:
            y = self.activation(tn.Tensor(y)).data
        return y


class StreamingPredictor:
    """Causal predictor that consumes one frame at a time.

    Each conv layer keeps only its own receptive field, so memory is
    constant in video length. Outputs match :meth:`AnticipationModel.predict`
    on the same prefix exactly.
    """

    def __init__(self, model, mode="hard"):
        self.model = model
        self.mode = mode
        dims = model.dims
        att = model.attention
        self._att_max = _ConvBuffer(att.k_max, 1)
        self._att_avg = _ConvBuffer(att.k_avg, 1)
        pol = model.policy
        self._policy = [_ConvBuffer(pol.kernels[i], pol.dilation(i), pol.biases[i],
                                    tn.relu if i < pol.layers - 1 else None) for i in range(pol.layers)]
        tcn = model.tcn
        self._tcn = [_ConvBuffer(tcn.kernels[i], tcn.dilation(i), tcn.biases[i], tn.relu)
                     for i in range(tcn.layers)]
        self.n_nodes = dims.n_nodes
        self.frame = 0

    def buffered_frames(self):
        bufs = [self._att_max, self._att_avg] + self._policy + self._tcn
        return sum(len(b.window) for b in bufs)

    def push(self, boxes):
        """Advance one frame. ``boxes`` is an ``N x 5`` array; returns the ``E`` countdowns."""
        b = np.asarray(boxes, dtype=np.float64).reshape(1, self.n_nodes, -1)
        with tn.no_grad(), tn.row_invariant():
            pmax, pavg = pooled_frames(b)
            logit = self._att_max.step(pmax.data[0]) + self._att_avg.step(pavg.data[0])
            attn = tn.sigmoid(tn.Tensor(logit)).data.reshape(-1)
            b_hat = b * attn.reshape(-1, 1, 1)
            x = b_hat.reshape(1, -1)[0]
            for layer in self._policy:
                x = layer.step(x)[0]
            logits = x.reshape(1, self.model.dims.C, self.model.dims.C)
            sel = gumbel_sinkhorn(logits, self.model.dims.tau, self.model.dims.n_sinkhorn, None, self.mode)
            fused, _ = self.model.spatial_features(tn.Tensor(b_hat), sel)
            h = fused.data[0]
            for layer in self._tcn:
                h = layer.step(h)[0]
            pred = head_forward(tn.Tensor(h[None]), self.model.head).data[0]
        self.frame += 1
        return pred


def stream(model, lines, events, out=sys.stdout, err=sys.stderr, mode="hard"):
    """Read detection-log lines, write one JSON prediction line per frame.

    Malformed lines warn on ``err`` and count as an empty frame. Skipped
    frame indices are filled with empty frames; an index that goes
    backwards raises :class:`IngestionError`.
    """
    sp = StreamingPredictor(model, mode)
    n = model.dims.n_nodes
    empty = np.zeros((n, 5))

    def emit(boxes):
        t = sp.frame
        pred = sp.push(boxes)
        out.write(json.dumps({"frame": t, "pred": {e: float(p) for e, p in zip(events, pred)}}) + "\n")

    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            frame, dets = parse_detection_line(line)
            boxes = frame_features(dets, n, frame)
        except IngestionError as exc:
            err.write(f"warning: line {lineno}: {exc}; using an empty frame\n")
            emit(empty)
            continue
        if frame < sp.frame:
            raise IngestionError(f"line {lineno}: frame {frame} arrived after frame {sp.frame - 1}")
        while sp.frame < frame:
            emit(empty)
        emit(boxes)
    return sp.frame
