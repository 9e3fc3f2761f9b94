"""Central finite-difference checks for every differentiable op and the composed pipeline."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .perception import CollabModel, ModelConfig, rasterize_targets
from .pipeline import collaborative_forward
from .syncnet import CompensationConfig, PyramidConv, PyramidLSTMCell, SyncNet, plstm_step
from .nn import Params
from .tensor import Tensor

THRESHOLD = 1e-4


class NonFiniteGradient(FloatingPointError):
    pass


def finite_diff_check(f: Callable[[], Tensor], inputs, eps: float = 1e-6, max_elements: int | None = 64,
                      rng=None, name: str = "f") -> float:
    """Max of ``|g_ad - g_fd| / max(1, |g_fd|)`` over (sampled) elements of ``inputs``.

    ``f`` recomputes a scalar from the current values of the leaf tensors in
    ``inputs``; each is perturbed in place.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"{name}: finite_diff_check needs a scalar output, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NonFiniteGradient(f"{name}: non-finite value first produced by op {first_nonfinite_op(out)!r}")
    out.backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        if not np.isfinite(analytic).all():
            raise NonFiniteGradient(f"{name}: non-finite analytic gradient")
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            flat[i] = hi
            up = float(f().data)
            flat[i] = lo
            down = float(f().data)
            flat[i] = orig
            # divide by the representable step, not the nominal 2*eps
            fd = (up - down) / (hi - lo)
            if not np.isfinite(fd):
                raise NonFiniteGradient(f"{name}: non-finite finite difference")
            worst = max(worst, abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd)))
    return worst


def first_nonfinite_op(out: Tensor) -> str:
    """Name of the earliest op (in evaluation order) whose output is not finite."""
    for node in T.topological_order(out):
        if not np.isfinite(node.data).all():
            return node.op
    return "none"


# -- fixtures ----------------------------------------------------------------------------------
@dataclass
class Scale:
    h: int
    c: int
    obs: int
    samples: int


SCALES = {"tiny": Scale(8, 4, 32, 24), "small": Scale(16, 8, 64, 48)}


def _weighted(out: Tensor, rng) -> Tensor:
    # a fixed random projection makes every output element matter
    return T.tsum(out * Tensor(rng.normal(size=out.shape)))


def _primitive_cases(s: Scale, rng):
    h, c = s.h, s.c

    def leaf(*shape, lo=None, hi=None):
        if lo is not None:
            return Tensor(rng.uniform(lo, hi, size=shape))
        return Tensor(rng.normal(size=shape))

    cases = []

    def case(name, build, *xs):
        proj = np.random.default_rng(len(cases))
        seed = proj.integers(1 << 30)
        cases.append((name, lambda: _weighted(build(*xs), np.random.default_rng(seed)), xs))

    x, w, b = leaf(h, h, c), leaf(3, 3, c, c), leaf(c)
    case("conv2d", lambda x, w, b: T.conv2d(x, w, b), x, w, b)
    x2, w2, b2 = leaf(h, h, c), leaf(3, 3, c, 2 * c), leaf(2 * c)
    case("conv2d_stride2", lambda x, w, b: T.conv2d(x, w, b, stride=2), x2, w2, b2)
    case("avg_pool2", T.avg_pool2, leaf(h, h, c))
    case("upsample2", T.upsample2, leaf(h // 2, h // 2, c))
    case("sigmoid", T.sigmoid, leaf(h, h, c))
    case("tanh", T.tanh, leaf(h, h, c))
    case("exp", T.exp, leaf(h, h, c))
    case("log", T.log, leaf(h, h, c, lo=0.5, hi=2.0))
    case("add", lambda a, b: a + b, leaf(h, h, c), leaf(1, 1, c))
    case("mul", lambda a, b: a * b, leaf(h, h, c), leaf(h, h, 1))
    case("div", lambda a, b: a / b, leaf(h, h, c), leaf(h, h, c, lo=0.5, hi=2.0))
    case("power", lambda a: a ** 2.0, leaf(h, h, c))
    case("concat_c", T.concat_c, leaf(h, h, c), leaf(h, h, 1))
    case("stack", lambda a, b: T.stack([a, b]), leaf(h, h, c), leaf(h, h, c))
    case("getitem", lambda a: a[1:-1, ::2, 0:2], leaf(h, h, c))
    case("softmax", lambda a: T.softmax(a, axis=0), leaf(3, h, h, 1))
    # keep |x| away from the smooth-L1 knot at 1
    sl = rng.uniform(0.1, 0.8, size=(h, h, c)) * rng.choice([-1, 1], size=(h, h, c))
    sl[::2] *= 3.0
    case("smooth_l1", T.smooth_l1, Tensor(sl))
    target = (rng.random((h, h, 1)) < 0.3).astype(np.float64)
    case("bce_with_logits", lambda z: T.bce_with_logits(z, target), leaf(h, h, 1))
    case("mean", lambda a: T.mean(a, axis=(0, 1)), leaf(h, h, c))
    return cases


def _component_cases(s: Scale, rng):
    h, c = s.h, s.c
    cases = []
    p = Params()
    pyr = PyramidConv(p, "pyr", c, c, rng)
    x = Tensor(rng.normal(size=(h, h, c)))
    cases.append(("pyramid_conv", lambda: _weighted(pyr(x), np.random.default_rng(1)), [x] + list(p.values())))

    p2 = Params()
    cell = PyramidLSTMCell(p2, "cell", c + 1, c, rng)
    e = Tensor(rng.normal(size=(h, h, c + 1)))
    h0, c0 = Tensor(rng.normal(size=(h, h, c)) * 0.5), Tensor(rng.normal(size=(h, h, c)) * 0.5)

    def lstm():
        from .syncnet import RecurrentState
        st = plstm_step(e, RecurrentState(h0, c0), cell)
        return _weighted(st.h, np.random.default_rng(2)) + _weighted(st.c, np.random.default_rng(3))
    cases.append(("pyramid_lstm", lstm, [e, h0, c0] + list(p2.values())))

    sn = SyncNet(CompensationConfig(k=2), c)
    fe, fs = Tensor(rng.normal(size=(h, h, c))), Tensor(rng.normal(size=(h, h, c)))
    we, ws = Tensor(rng.normal(size=(h, h, 1))), Tensor(rng.normal(size=(h, h, 1)))
    from .channel import attach_latency_tensor
    tf, tw = attach_latency_tensor(2, fs.shape, ws.shape)

    def tm():
        f, w = sn.time_modulate(fe, fs, we, ws, tf, tw)
        return _weighted(f, np.random.default_rng(4)) + _weighted(w, np.random.default_rng(5))
    tm_inputs = [fe, fs, we, ws, sn.params["syncnet.m_f.kernel"], sn.params["syncnet.m_w.kernel"]]
    cases.append(("time_modulate", tm, tm_inputs))

    logits = [Tensor(rng.normal(size=(h, h, 1))) for _ in range(3)]
    feats = [Tensor(rng.normal(size=(h, h, c))) for _ in range(3)]

    def fusion():
        from .perception import fuse_stacked, normalize_attention
        wts = normalize_attention(logits)
        return _weighted(fuse_stacked(wts, T.stack(feats, 0)), np.random.default_rng(6))
    cases.append(("attention_fusion", fusion, logits + feats))
    return cases


def _pipeline_case(s: Scale, rng, estimator="fase"):
    """encode -> channel -> compensate -> time_modulate -> fuse -> decode -> loss on one receiver."""
    from .channel import transmit
    from .training import LossWeights, loss, teacher_pass

    mc = ModelConfig(obs_grid=s.obs, feat_channels=s.c, enc_channels=s.c, dec_channels=2 * s.c,
                     attn_hidden=s.c)
    model = CollabModel(mc)
    sn = SyncNet(CompensationConfig(k=2, estimator=estimator), s.c)
    tau, k, duration = 2, 2, 5
    obs = rng.random((2, duration, s.obs, s.obs, 1)) < 0.15
    obs = obs.astype(np.float64)
    t0 = duration - 1
    boxes = np.array([[-10.0, -10.0, -6.0, -5.0], [4.0, 6.0, 8.0, 9.0]])
    tg = rasterize_targets(boxes, mc)

    def forward():
        frames = model.encoder(Tensor(obs.reshape((-1, s.obs, s.obs, 1))))
        ego = frames[t0:t0 + 1]
        sender = {t: frames[duration + t:duration + t + 1] for t in range(duration)}
        return ego, sender

    # the teacher targets are constants of the objective, so they are frozen here
    ego, sender = forward()
    targets = teacher_pass(model, ego, [sender[t0]], tg.objectness[None], tg.regression[None])

    def run():
        ego, sender = forward()
        buf = transmit(sender, t0, tau, k)
        res = collaborative_forward(model, ego, [list(buf.frames)], np.array([[tau]]), syncnet=sn)
        return loss(res, targets, LossWeights())["total"]

    inputs = [model.params["encoder.conv1.kernel"], model.params["attention.conv1.kernel"],
              model.params["decoder.cls.kernel"]]
    inputs += [t for name, t in sn.params.items() if name.endswith(".kernel")][:4]
    return run, inputs


def run_gradcheck(scale: str = "tiny", threshold: float = THRESHOLD, log=print) -> dict:
    """Max relative error per component; logs one line per component."""
    if scale not in SCALES:
        raise ValueError(f"unknown gradcheck scale {scale!r}; choose from {sorted(SCALES)}")
    s = SCALES[scale]
    rng = np.random.default_rng(1234)
    start = time.perf_counter()
    results = {}
    cases = _primitive_cases(s, rng) + _component_cases(s, rng)
    for est in ("fase", "ve"):
        run, inputs = _pipeline_case(s, rng, est)
        cases.append((f"pipeline_{est}", run, inputs))
    for name, f, xs in cases:
        try:
            err = finite_diff_check(f, xs, max_elements=s.samples, rng=np.random.default_rng(7), name=name)
        except NonFiniteGradient as exc:
            log(f"{name:<18} NON-FINITE {exc}")
            results[name] = float("inf")
            continue
        results[name] = err
        log(f"{name:<18} max_rel_err={err:.3e} {'ok' if err < threshold else 'FAIL'}")
    log(f"gradcheck finished in {time.perf_counter() - start:.1f}s")
    return results
