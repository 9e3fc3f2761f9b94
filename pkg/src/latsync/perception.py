"""Encoder, collaboration attention, attention-weighted fusion and detection decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv, Params
from .tensor import Tensor
from .world import BoxSet, Observation


@dataclass
class ModelConfig:
    obs_grid: int = 64
    obs_channels: int = 1
    enc_channels: int = 16
    feat_channels: int = 32
    attn_hidden: int = 16
    dec_channels: int = 32
    world_lo: float = -32.0
    world_hi: float = 32.0
    init_seed: int = 0

    def validate(self):
        if self.obs_grid % 4:
            raise ValueError("model: obs_grid must be divisible by 4")
        for name in ("enc_channels", "feat_channels", "attn_hidden", "dec_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"model: {name} must be positive")

    @property
    def feat_grid(self) -> int:
        return self.obs_grid // 4

    @property
    def feat_cell(self) -> float:
        return (self.world_hi - self.world_lo) / self.feat_grid


@dataclass
class FeatureMap:
    values: Tensor
    agent_id: int = -1
    frame_stamp: int = -1


@dataclass
class AttentionMap:
    values: Tensor
    source: int = -1
    target: int = -1
    frame_stamp: int = -1


@dataclass
class FusedFeature:
    values: Tensor
    receiver: int = -1
    frame_stamp: int = -1


@dataclass
class DetectionGrid:
    logits: Tensor          # (..., Hf, Wf, 1)
    box_regression: Tensor  # (..., Hf, Wf, 4): dx, dy in cells, log w, log h in metres

    @property
    def objectness(self) -> Tensor:
        return T.sigmoid(self.logits)


class Encoder:
    """64x64x1 occupancy -> 16x16xC features: two stride-2 convs and one same-size conv, tanh."""

    def __init__(self, params: Params, cfg: ModelConfig, rng, prefix="encoder"):
        self.cfg = cfg
        c = cfg.enc_channels
        self.conv1 = Conv(params, f"{prefix}.conv1", cfg.obs_channels, c, 3, stride=2, rng=rng)
        self.conv2 = Conv(params, f"{prefix}.conv2", c, cfg.feat_channels, 3, stride=2, rng=rng)
        self.conv3 = Conv(params, f"{prefix}.conv3", cfg.feat_channels, cfg.feat_channels, 3, rng=rng)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        g = self.cfg.obs_grid
        if x.shape[-3:] != (g, g, self.cfg.obs_channels):
            raise ValueError(f"encode: expected observation grid {(g, g, self.cfg.obs_channels)}, got {x.shape}")
        h = T.tanh(self.conv1(x))
        h = T.tanh(self.conv2(h))
        return T.tanh(self.conv3(h))


class AttentionNet:
    """Per-cell logit from two 1x1 convs over the channel concatenation of ego and sender features."""

    def __init__(self, params: Params, cfg: ModelConfig, rng, prefix="attention"):
        c = cfg.feat_channels
        self.conv1 = Conv(params, f"{prefix}.conv1", 2 * c, cfg.attn_hidden, 1, rng=rng)
        self.conv2 = Conv(params, f"{prefix}.conv2", cfg.attn_hidden, 1, 1, rng=rng)

    def __call__(self, f_ego, f_other) -> Tensor:
        return self.conv2(T.tanh(self.conv1(T.concat_c(f_ego, f_other))))


class Decoder:
    """Two same-size convs, then objectness-logit and box-regression heads."""

    def __init__(self, params: Params, cfg: ModelConfig, rng, prefix="decoder"):
        c = cfg.dec_channels
        self.conv1 = Conv(params, f"{prefix}.conv1", cfg.feat_channels, c, 3, rng=rng)
        self.conv2 = Conv(params, f"{prefix}.conv2", c, c, 3, rng=rng)
        # negative prior on objectness; objects are sparse
        self.cls = Conv(params, f"{prefix}.cls", c, 1, 1, rng=rng, bias_init=-2.0)
        self.reg = Conv(params, f"{prefix}.reg", c, 4, 1, rng=rng, scale=0.1)

    def __call__(self, h) -> DetectionGrid:
        x = T.tanh(self.conv1(h))
        x = T.tanh(self.conv2(x))
        return DetectionGrid(self.cls(x), self.reg(x))


def normalize_attention(logits, mask=None) -> Tensor:
    """Per-cell softmax across contributors.

    ``logits`` is a sequence of ``(..., H, W, 1)`` tensors (ego first) or one
    stacked tensor with contributors on axis 0. ``mask`` (contributors x batch)
    marks absent contributors, which receive weight exactly 0.
    """
    stacked = T.stack(list(logits), axis=0) if not isinstance(logits, Tensor) else logits
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        shape = mask.shape + (1,) * (stacked.ndim - mask.ndim)
        stacked = stacked + Tensor(np.where(mask.reshape(shape), 0.0, -1e30))
    return T.softmax(stacked, axis=0)


def fuse_stacked(weights: Tensor, features: Tensor, strict: bool = False, tol: float = 1e-6) -> Tensor:
    """Sum over contributors (axis 0) of weight (broadcast over channels) times feature."""
    if strict:
        dev = np.abs(weights.data.sum(axis=0) - 1.0).max()
        if dev > tol:
            raise ValueError(f"fuse: attention weights not normalized (max deviation {dev:.3g})")
    return T.tsum(weights * features, axis=0)


def fuse(ego_F: FeatureMap, ego_W: AttentionMap, neighbors, strict: bool = True) -> FusedFeature:
    """Attention-weighted fusion of the ego feature and (feature, weight) pairs from neighbors."""
    feats = [ego_F.values] + [f.values if isinstance(f, FeatureMap) else T.as_tensor(f) for f, _ in neighbors]
    weights = [ego_W.values] + [w.values if isinstance(w, AttentionMap) else T.as_tensor(w) for _, w in neighbors]
    weights = [w if w.shape[-1:] == (1,) and w.ndim == feats[0].ndim else T.reshape(w, w.shape + (1,))
               for w in weights]
    fused = fuse_stacked(T.stack(weights, 0), T.stack(feats, 0), strict=strict)
    return FusedFeature(fused, ego_F.agent_id, ego_F.frame_stamp)


class CollabModel:
    """Encoder + attention + fusion + decoder with parameters in one store."""

    def __init__(self, cfg: ModelConfig, params: Params | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        fresh = Params()
        self.encoder = Encoder(fresh, cfg, rng)
        self.attention_net = AttentionNet(fresh, cfg, rng)
        self.decoder = Decoder(fresh, cfg, rng)
        if params is not None:
            fresh.copy_from(params.subset("encoder.") | params.subset("attention.") | params.subset("decoder."))
        self.params = fresh

    # single-map API; the batched internals accept (N, H, W, C) too
    def encode(self, obs) -> FeatureMap:
        grid = obs.grid if isinstance(obs, Observation) else obs
        out = self.encoder(grid)
        if isinstance(obs, Observation):
            return FeatureMap(out, obs.agent_id, obs.frame)
        return FeatureMap(out)

    def attention(self, f_i, f_j) -> AttentionMap:
        a = f_i.values if isinstance(f_i, FeatureMap) else f_i
        b = f_j.values if isinstance(f_j, FeatureMap) else f_j
        if a.shape[:-1] != b.shape[:-1]:
            raise ValueError(f"attention: spatial mismatch {a.shape} vs {b.shape}")
        return AttentionMap(self.attention_net(a, b))

    def decode(self, h) -> DetectionGrid:
        return self.decoder(h.values if isinstance(h, FusedFeature) else h)


class SingleAgentModel:
    """Encoder + decoder, no collaboration."""

    def __init__(self, cfg: ModelConfig, params: Params | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed + 1)
        fresh = Params()
        self.encoder = Encoder(fresh, cfg, rng, prefix="single.encoder")
        self.decoder = Decoder(fresh, cfg, rng, prefix="single.decoder")
        if params is not None:
            fresh.copy_from(params.subset("single."))
        self.params = fresh

    def detect(self, grid) -> DetectionGrid:
        return self.decoder(self.encoder(grid))


# -- box decoding -----------------------------------------------------------------------
def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float, order_keys=None) -> np.ndarray:
    """Greedy suppression, highest score first; ties broken by ``order_keys`` (ascending)."""
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.arange(n) if order_keys is None else np.asarray(order_keys)
    order = np.lexsort((keys, -np.asarray(scores)))
    ious = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(n, dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        suppressed |= ious[idx] > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def decode_boxes(regression: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Per-cell boxes ``(Hf, Wf, 4)`` from regression offsets."""
    fs = cfg.feat_cell
    g = regression.shape[0]
    centers = cfg.world_lo + (np.arange(g) + 0.5) * fs
    ax, ay = np.meshgrid(centers, centers)
    cx = ax + regression[..., 0] * fs
    cy = ay + regression[..., 1] * fs
    w = np.exp(np.clip(regression[..., 2], -10, 10))
    h = np.exp(np.clip(regression[..., 3], -10, 10))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


@dataclass
class DetectionTargets:
    objectness: np.ndarray   # (Hf, Wf, 1) in {0, 1}
    regression: np.ndarray   # (Hf, Wf, 4)


def rasterize_targets(boxes: np.ndarray, cfg: ModelConfig) -> DetectionTargets:
    """Objectness 1 at the feature cell holding each box centre, with its regression target.

    When two centres share a cell the first box listed wins.
    """
    g, fs = cfg.feat_grid, cfg.feat_cell
    obj = np.zeros((g, g, 1))
    reg = np.zeros((g, g, 4))
    for x0, y0, x1, y1 in np.asarray(boxes).reshape(-1, 4):
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        c = int(np.clip(np.floor((cx - cfg.world_lo) / fs), 0, g - 1))
        r = int(np.clip(np.floor((cy - cfg.world_lo) / fs), 0, g - 1))
        if obj[r, c, 0]:
            continue
        ax = cfg.world_lo + (c + 0.5) * fs
        ay = cfg.world_lo + (r + 0.5) * fs
        obj[r, c, 0] = 1.0
        reg[r, c] = ((cx - ax) / fs, (cy - ay) / fs, np.log(x1 - x0), np.log(y1 - y0))
    return DetectionTargets(obj, reg)


def boxes_from_grid(grid: DetectionGrid, threshold: float, nms_iou: float, cfg: ModelConfig) -> BoxSet:
    """Threshold objectness, decode each surviving cell, then greedy NMS."""
    if not 0 < threshold < 1:
        raise ValueError("boxes_from_grid: threshold must lie in (0, 1)")
    obj = grid.objectness.data
    reg = grid.box_regression.data
    if obj.ndim == 4:
        obj, reg = obj[0], reg[0]
    obj = obj[..., 0]
    rows, cols = np.nonzero(obj >= threshold)
    if len(rows) == 0:
        return BoxSet()
    boxes = decode_boxes(reg, cfg)[rows, cols]
    scores = obj[rows, cols]
    keep = nms(boxes, scores, nms_iou, order_keys=rows * obj.shape[1] + cols)
    return BoxSet(boxes[keep], scores[keep])
