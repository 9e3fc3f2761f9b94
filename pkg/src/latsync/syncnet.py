"""Latency compensation: dual-branch pyramid-LSTM estimation plus time modulation.

A link delivers ``k`` consecutive stale sender features ending at ``t0 - tau``.
The recurrent state is advanced over every delivered frame up to ``t0 - 1``,
then rolled forward one frame at a time, re-feeding its own decoded feature
and attention estimates, until it holds ``h^(t0-1)``; the estimate for ``t0``
is decoded from that state. Under this indexing one call performs
``k + tau - 1`` recurrent steps per branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .channel import attach_latency_tensor
from .nn import Conv, Params
from .tensor import Tensor


@dataclass
class CompensationConfig:
    k: int = 3
    estimator: str = "fase"        # "fase" or "ve"
    scale: str = "pyramid"         # "pyramid" or "single"
    time_modulation: bool = True
    bypass_at_zero: bool = True
    time_unit: float = 1.0
    init_seed: int = 7

    def validate(self):
        if self.k < 1:
            raise ValueError("syncnet: k must be >= 1")
        if self.estimator not in ("fase", "ve"):
            raise ValueError(f"syncnet: estimator must be 'fase' or 've', got {self.estimator!r}")
        if self.scale not in ("pyramid", "single"):
            raise ValueError(f"syncnet: scale must be 'pyramid' or 'single', got {self.scale!r}")


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor


@dataclass
class ConfidenceMatrix:
    m_f: Tensor
    m_w: Tensor


class PyramidConv:
    """Sum of 3x3 convs at full, half and quarter resolution, each upsampled back."""

    def __init__(self, params: Params, name: str, cin: int, cout: int, rng, single_scale=False, bias_init=0.0):
        self.single_scale = single_scale
        n = 1 if single_scale else 3
        self.branches = [Conv(params, f"{name}.s{i}", cin, cout, 3, rng=rng, bias_init=bias_init / n)
                         for i in range(n)]

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if self.single_scale:
            return self.branches[0](x)
        return pyramid_conv(x, self.branches)


def pyramid_conv(x, branches) -> Tensor:
    h, w = x.shape[-3], x.shape[-2]
    if h % 4 or w % 4:
        raise ValueError(f"pyramid_conv: spatial dims must be divisible by 4, got {h}x{w}")
    full, half, quarter = branches
    half_in = T.avg_pool2(x)
    out = full(x)
    out = out + T.upsample2(half(half_in))
    out = out + T.upsample2(T.upsample2(quarter(T.avg_pool2(half_in))))
    return out


class PyramidLSTMCell:
    """Convolutional LSTM whose gate transforms are pyramid convolutions.

    The input and hidden transforms ``w(e) + u(h)`` are realized as one
    pyramid convolution over ``e | h``, which is the same affine map.
    """

    def __init__(self, params: Params, name: str, c_in: int, c_hidden: int, rng, single_scale=False):
        self.c_in = c_in
        self.c_hidden = c_hidden
        bias = np.zeros(4 * c_hidden)
        bias[c_hidden:2 * c_hidden] = 1.0  # forget gate
        self.gates = PyramidConv(params, f"{name}.gates", c_in + c_hidden, 4 * c_hidden, rng, single_scale)
        for conv in self.gates.branches:
            conv.bias.data = bias / len(self.gates.branches)

    def zero_state(self, spatial_shape) -> RecurrentState:
        shape = tuple(spatial_shape) + (self.c_hidden,)
        return RecurrentState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def plstm_step(e, state: RecurrentState, cell: PyramidLSTMCell) -> RecurrentState:
    ch = cell.c_hidden
    pre = cell.gates(T.concat_c(e, state.h))
    i = T.sigmoid(pre[..., 0:ch])
    f = T.sigmoid(pre[..., ch:2 * ch])
    o = T.sigmoid(pre[..., 2 * ch:3 * ch])
    g = T.tanh(pre[..., 3 * ch:4 * ch])
    c = f * state.c + i * g
    h = o * T.tanh(c)
    return RecurrentState(h, c)


@dataclass
class StepTrace:
    steps: dict = field(default_factory=lambda: {"F": 0, "W": 0})
    decodes: dict = field(default_factory=lambda: {"F": 0, "W": 0})

    def reset(self):
        self.steps = {"F": 0, "W": 0}
        self.decodes = {"F": 0, "W": 0}


AttentionFn = Callable[[Tensor, Tensor], Tensor]


class SyncNet:
    def __init__(self, cfg: CompensationConfig, feat_channels: int, params: Params | None = None,
                 prefix: str = "syncnet"):
        cfg.validate()
        self.cfg = cfg
        self.feat_channels = c = feat_channels
        rng = np.random.default_rng(cfg.init_seed)
        single = cfg.scale == "single"
        fresh = Params()
        self.p_f = PyramidLSTMCell(fresh, f"{prefix}.p_f", c + 1, c, rng, single)
        self.d_f = Conv(fresh, f"{prefix}.d_f", c, c, 1, rng=rng)
        if cfg.estimator == "fase":
            self.p_w = PyramidLSTMCell(fresh, f"{prefix}.p_w", c + 1, c, rng, single)
            self.d_w = Conv(fresh, f"{prefix}.d_w", c, 1, 1, rng=rng)
        else:
            self.p_w = self.d_w = None
        if cfg.time_modulation:
            # small initial kernels: the gate starts near 0.5 everywhere
            self.m_f = Conv(fresh, f"{prefix}.m_f", 3 * c, 1, 3, rng=rng, scale=0.1)
            self.m_w = Conv(fresh, f"{prefix}.m_w", 3, 1, 3, rng=rng, scale=0.1)
        if params is not None:
            fresh.copy_from(params.subset(f"{prefix}."))
        self.params = fresh
        self.trace = StepTrace()

    # -- components ----------------------------------------------------------------
    def decode_feature(self, h) -> Tensor:
        self.trace.decodes["F"] += 1
        return self.d_f(h)

    def decode_attention(self, h) -> Tensor:
        self.trace.decodes["W"] += 1
        return self.d_w(h)

    def _step(self, branch: str, e, state):
        self.trace.steps[branch] += 1
        return plstm_step(e, state, self.p_f if branch == "F" else self.p_w)

    def fase(self, f_ego: Tensor, history: Sequence[Tensor], tau: int, attention: AttentionFn,
             zero_attention_input: bool = False):
        """Estimate the sender's feature and attention logits at ``t0``.

        ``history`` holds the ``k`` delivered frames, oldest first, the newest
        being ``t0 - tau``. Returns ``(F_est, W_est_logits)``.
        """
        k = self.cfg.k
        if len(history) != k:
            raise ValueError(f"fase: expected {k} history frames, got {len(history)}")
        if tau < 0:
            raise ValueError("fase: tau must be >= 0")
        spatial = history[0].shape[:-1]
        dual = self.cfg.estimator == "fase"
        zero_w = Tensor(np.zeros(spatial + (1,)))
        s_f = self.p_f.zero_state(spatial)
        s_w = self.p_w.zero_state(spatial) if dual else None

        def make_input(feat, logit):
            if not dual or zero_attention_input:
                return T.concat_c(feat, zero_w)
            return T.concat_c(feat, logit)

        # real frames t0-tau-k+1 .. min(t0-tau, t0-1)
        n_real = k if tau >= 1 else k - 1
        for q in range(n_real):
            f_t = history[q]
            w_t = attention(f_ego, f_t) if dual and not zero_attention_input else None
            e = make_input(f_t, w_t)
            s_f = self._step("F", e, s_f)
            if dual:
                s_w = self._step("W", e, s_w)
        # recursive rollout over frames t0-tau+1 .. t0-1
        for _ in range(tau - 1):
            f_est = self.decode_feature(s_f.h)
            w_est = self.decode_attention(s_w.h) if dual else None
            e = make_input(f_est, w_est)
            s_f = self._step("F", e, s_f)
            if dual:
                s_w = self._step("W", e, s_w)
        f_est = self.decode_feature(s_f.h)
        w_est = self.decode_attention(s_w.h) if dual else attention(f_ego, f_est)
        return f_est, w_est

    def time_modulate(self, f_est, f_stale, w_est, w_stale, t_f, t_w):
        """Latency-conditioned convex blend of estimated and stale quantities."""
        m_f = T.sigmoid(self.m_f(T.concat([f_est, f_stale, T.as_tensor(t_f)], axis=-1)))
        m_w = T.sigmoid(self.m_w(T.concat([w_est, w_stale, T.as_tensor(t_w)], axis=-1)))
        f_out = f_est * m_f + f_stale * (1.0 - m_f)
        w_out = w_est * m_w + w_stale * (1.0 - m_w)
        self.last_confidence = ConfidenceMatrix(m_f, m_w)
        return f_out, w_out

    def compensate(self, f_ego: Tensor, history: Sequence[Tensor], tau: int, attention: AttentionFn,
                   stale_logits: Tensor | None = None):
        """Estimated ``(feature, attention logits)`` of the sender at ``t0``."""
        f_stale = history[-1]
        if tau == 0 and self.cfg.bypass_at_zero:
            w = stale_logits if stale_logits is not None else attention(f_ego, f_stale)
            return f_stale, w
        f_est, w_est = self.fase(f_ego, history, tau, attention)
        if not self.cfg.time_modulation:
            return f_est, w_est
        w_stale = stale_logits if stale_logits is not None else attention(f_ego, f_stale)
        t_f, t_w = attach_latency_tensor(tau, f_stale.shape, w_stale.shape, self.cfg.time_unit)
        return self.time_modulate(f_est, f_stale, w_est, w_stale, t_f, t_w)
