"""Batched forward pass: encode, transmit, compensate, fuse, decode.

A batch holds ``B`` receivers, each with ``L`` incoming links. Link histories
are lists of ``k`` tensors of shape ``(B, H, W, C)``, oldest first; per-link
latencies and validity flags are ``(B, L)`` arrays. Links sharing a latency
are compensated together.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .channel import WarmupError, transmit
from .perception import (CollabModel, DetectionGrid, ModelConfig, fuse_stacked, normalize_attention,
                         rasterize_targets)
from .syncnet import SyncNet
from .tensor import Tensor, no_grad
from .world import Scenario, WorldConfig, ground_truth_boxes, observe


@dataclass
class ForwardResult:
    fused: Tensor               # (B, H, W, C)
    link_features: list         # L tensors (B, H, W, C), compensated or stale
    weights: Tensor             # (L+1, B, H, W, 1), ego first
    grid: DetectionGrid
    valid: np.ndarray           # (B, L)


def _take(x: Tensor, idx: np.ndarray, full: int) -> Tensor:
    if len(idx) == full and np.array_equal(idx, np.arange(full)):
        return x
    return x[idx]


def compensate_links(syncnet: SyncNet, model: CollabModel, ego: Tensor, history: list, taus: np.ndarray,
                     stale_logits: Tensor):
    """Compensate one link slot across the batch, grouping rows by latency."""
    b = ego.shape[0]
    taus = np.asarray(taus)
    groups = sorted(set(int(t) for t in taus))
    if syncnet.cfg.bypass_at_zero and groups == [0]:
        return history[-1], stale_logits
    feats, logits, order = [], [], []
    for tau in groups:
        idx = np.nonzero(taus == tau)[0]
        f, w = syncnet.compensate(_take(ego, idx, b), [_take(h, idx, b) for h in history], tau,
                                  model.attention_net, _take(stale_logits, idx, b))
        feats.append(f)
        logits.append(w)
        order.append(idx)
    if len(groups) == 1:
        return feats[0], logits[0]
    inverse = np.argsort(np.concatenate(order))
    return T.concat(feats, axis=0)[inverse], T.concat(logits, axis=0)[inverse]


def collaborative_forward(model: CollabModel, ego: Tensor, histories: list, taus, valid=None,
                          syncnet: SyncNet | None = None) -> ForwardResult:
    """Fuse ego features with ``L`` link histories and decode.

    Without ``syncnet`` the newest (stale) frame of each link is fused as-is,
    which is the latency-unaware system.
    """
    b = ego.shape[0]
    n_links = len(histories)
    taus = np.asarray(taus, dtype=np.int64).reshape(b, n_links)
    valid = np.ones((b, n_links), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    link_feats, link_logits = [], []
    for slot, history in enumerate(histories):
        stale = history[-1]
        stale_logits = model.attention_net(ego, stale)
        if syncnet is None:
            link_feats.append(stale)
            link_logits.append(stale_logits)
            continue
        rows = np.nonzero(valid[:, slot])[0]
        if len(rows) == 0:
            link_feats.append(stale)
            link_logits.append(stale_logits)
            continue
        slot_taus = np.where(valid[:, slot], taus[:, slot], 0)
        f, w = compensate_links(syncnet, model, ego, history, slot_taus, stale_logits)
        link_feats.append(f)
        link_logits.append(w)
    ego_logits = model.attention_net(ego, ego)
    mask = np.concatenate([np.ones((1, b), dtype=bool), valid.T], axis=0)
    weights = normalize_attention([ego_logits] + link_logits, mask=mask)
    fused = fuse_stacked(weights, T.stack([ego] + link_feats, axis=0))
    return ForwardResult(fused, link_feats, weights, model.decode(fused), valid)


# -- scenario data -----------------------------------------------------------------------
class ScenarioData:
    """Observations and detection targets of one scenario, computed once."""

    def __init__(self, scenario: Scenario, model_cfg: ModelConfig):
        self.scenario = scenario
        cfg = scenario.config
        self.obs = np.stack([np.stack([observe(scenario, a, t).grid for t in range(cfg.duration)])
                             for a in range(scenario.n_agents)])        # (A, D, G, G, 1)
        self.gt = [ground_truth_boxes(scenario, t) for t in range(cfg.duration)]
        self.targets = [rasterize_targets(self.gt[t].boxes, model_cfg) for t in range(cfg.duration)]

    @property
    def n_agents(self) -> int:
        return self.obs.shape[0]

    @property
    def duration(self) -> int:
        return self.obs.shape[1]


def encode_bank(model, data: ScenarioData, batch: int = 64) -> np.ndarray:
    """Features of every (agent, frame) under no-grad, shape (A, D, H, W, C)."""
    a, d = data.obs.shape[:2]
    flat = data.obs.reshape((a * d,) + data.obs.shape[2:])
    out = []
    with no_grad():
        for s in range(0, len(flat), batch):
            out.append(model.encoder(Tensor(flat[s:s + batch])).data)
    feats = np.concatenate(out, axis=0)
    return feats.reshape((a, d) + feats.shape[1:])


def link_inputs(bank: np.ndarray, receiver: int, t0: int, taus: dict, k: int):
    """Per-link histories for one receiver from a feature bank (via ``transmit``).

    Returns ``(histories, tau_row, valid_row)`` where histories are lists of
    ``k`` arrays (H, W, C); links short of history get zeros and valid=False.
    """
    n_agents = bank.shape[0]
    histories, tau_row, valid_row = [], [], []
    for sender in range(n_agents):
        if sender == receiver:
            continue
        tau = int(taus[sender])
        try:
            buf = transmit(bank[sender], t0, tau, k)
            histories.append(list(buf.frames))
            valid_row.append(True)
        except WarmupError:
            histories.append([np.zeros_like(bank[sender, 0])] * k)
            valid_row.append(False)
        tau_row.append(tau)
    return histories, tau_row, valid_row


def batch_from_bank(bank_list, samples, k: int):
    """Stack link inputs for samples ``(scenario_index, receiver, t0, {sender: tau})``."""
    egos, hists, taus, valid = [], [], [], []
    for s, receiver, t0, tau_map in samples:
        bank = bank_list[s]
        egos.append(bank[receiver, t0])
        h, tr, vr = link_inputs(bank, receiver, t0, tau_map, k)
        hists.append(h)
        taus.append(tr)
        valid.append(vr)
    n_links = len(hists[0])
    histories = [[Tensor(np.stack([hists[b][l][q] for b in range(len(samples))])) for q in range(k)]
                 for l in range(n_links)]
    return Tensor(np.stack(egos)), histories, np.asarray(taus), np.asarray(valid)
