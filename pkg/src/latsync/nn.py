"""Parameters, convolution layers, checkpoints and the Adam optimizer."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor, conv2d

CHECKPOINT_VERSION = 1


class Params(dict):
    """Ordered mapping from dotted name to parameter tensor."""

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self[name] = t
        return t

    def subset(self, prefix: str) -> "Params":
        return Params((k, v) for k, v in self.items() if k.startswith(prefix))

    def set_trainable(self, flag: bool):
        for t in self.values():
            t.requires_grad = flag

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def copy_from(self, other: "Params", strict: bool = True):
        for name, t in other.items():
            if name not in self:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            if self[name].shape != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {self[name].shape} vs {t.shape}")
            self[name].data = t.data.copy()

    def n_elements(self) -> int:
        return sum(t.size for t in self.values())


class Conv:
    """Convolution layer with Glorot-uniform kernel and zero bias."""

    def __init__(self, params: Params, name: str, cin: int, cout: int, k: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, bias_init: float = 0.0, scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        limit = scale * np.sqrt(6.0 / (k * k * (cin + cout)))
        self.kernel = params.add(f"{name}.kernel", rng.uniform(-limit, limit, size=(k, k, cin, cout)))
        self.bias = params.add(f"{name}.bias", np.full(cout, float(bias_init)))
        self.stride = stride
        self.k = k

    def __call__(self, x):
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding=(self.k - 1) // 2)


# -- checkpoints ---------------------------------------------------------------------
def save_checkpoint(path, params: Params, meta: dict | None = None):
    """Write ``params.bin`` (little-endian float64) and ``manifest.json`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"version": CHECKPOINT_VERSION, "dtype": "float64-le", "tensors": {}, "meta": meta or {}}
    offset = 0
    chunks = []
    for name, t in params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest["tensors"][name] = {"shape": list(t.shape), "offset": offset}
        chunks.append(buf)
        offset += len(buf)
    (path / "params.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


class CheckpointError(ValueError):
    pass


def load_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    if not isinstance(manifest.get("tensors"), dict):
        raise CheckpointError("manifest lacks a 'tensors' table")
    return manifest


def load_checkpoint(path) -> tuple[Params, dict]:
    path = Path(path)
    manifest = load_manifest(path)
    try:
        raw = (path / "params.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read params.bin in {path}: {exc.strerror}") from None
    params = Params()
    for name, entry in manifest["tensors"].items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            start = int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"malformed manifest entry for {name!r}") from None
        n = int(np.prod(shape)) if shape else 1
        if start + 8 * n > len(raw):
            raise CheckpointError(f"tensor {name!r} runs past the end of params.bin")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(shape)
        params.add(name, arr.astype(np.float64))
    return params, manifest.get("meta", {})


# -- optimization -----------------------------------------------------------------
def global_norm(params: Params) -> float:
    return float(np.sqrt(sum(np.sum(t.grad ** 2) for t in params.values() if t.grad is not None)))


def clip_grad_norm(params: Params, max_norm: float) -> float:
    norm = global_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
