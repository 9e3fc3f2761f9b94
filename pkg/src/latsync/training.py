"""Supervision targets, the four-term objective, curriculum latency and training loops."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .channel import LatencyModel, sample_latency
from .nn import Adam, Params, clip_grad_norm, save_checkpoint
from .perception import CollabModel, DetectionGrid, ModelConfig, SingleAgentModel
from .pipeline import ForwardResult, ScenarioData, batch_from_bank, collaborative_forward, encode_bank
from .syncnet import CompensationConfig, SyncNet
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

SYNC_BASE = "sync_base."
METRICS_HEADER = ["epoch", "stage_tau", "loss_total", "loss_out", "loss_fusion", "loss_feat", "loss_weight"]


class NumericalError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda_o: float = 1.0
    lambda_f: float = 0.5
    lambda_w: float = 0.5

    def validate(self):
        if self.lambda_o <= 0:
            raise ValueError("loss: lambda_o must be > 0")
        if self.lambda_f < 0 or self.lambda_w < 0:
            raise ValueError("loss: lambda_f and lambda_w must be >= 0")


@dataclass
class FinalMode:
    mode: str = "exponential"
    mean: float = 5.0


@dataclass
class CurriculumSchedule:
    frames_per_stage: int = 10
    max_fixed_latency: int = 10
    final_mode: FinalMode = field(default_factory=FinalMode)

    def validate(self):
        if self.frames_per_stage < 1:
            raise ValueError("curriculum: frames_per_stage must be >= 1")
        if self.max_fixed_latency < 0:
            raise ValueError("curriculum: max_fixed_latency must be >= 0")
        if self.final_mode.mean <= 0:
            raise ValueError("curriculum: final_mode.mean must be > 0")
        if self.final_mode.mode not in ("exponential", "fixed"):
            raise ValueError("curriculum: final_mode.mode must be 'exponential' or 'fixed'")


def curriculum_stage(epoch: int, schedule: CurriculumSchedule) -> int:
    if epoch < 0:
        raise ValueError("curriculum: epoch must be >= 0")
    return 1 + epoch // schedule.frames_per_stage


def curriculum_latency(epoch: int, schedule: CurriculumSchedule, rng=None) -> LatencyModel:
    """Fixed latency ``1 + epoch // frames_per_stage`` up to the cap, then the stochastic final mode."""
    stage = curriculum_stage(epoch, schedule)
    if stage <= schedule.max_fixed_latency:
        return LatencyModel(stage, "fixed")
    return LatencyModel(schedule.final_mode.mean, schedule.final_mode.mode)


# -- targets and losses ---------------------------------------------------------------------
@dataclass
class SupervisionTargets:
    objectness: np.ndarray      # (B, H, W, 1)
    regression: np.ndarray      # (B, H, W, 4)
    fused: Tensor | None = None       # (B, H, W, C)
    features: list | None = None      # L tensors (B, H, W, C)
    weights: Tensor | None = None     # (L+1, B, H, W, 1)


def teacher_pass(model: CollabModel, ego: Tensor, current: list, objectness, regression) -> SupervisionTargets:
    """Zero-latency quantities from the same parameters, without gradient.

    ``current`` holds each link's sender feature at ``t0``.
    """
    with no_grad():
        ego_c = Tensor(ego.data)
        cur = [Tensor(c.data) for c in current]
        res = collaborative_forward(model, ego_c, [[c] for c in cur], np.zeros((ego.shape[0], len(cur))))
    return SupervisionTargets(np.asarray(objectness), np.asarray(regression), res.fused, cur, res.weights)


def detection_loss(grid: DetectionGrid, objectness: np.ndarray, regression: np.ndarray) -> Tensor:
    """Balanced BCE on objectness plus smooth-L1 on box regression at positive cells."""
    pos = np.asarray(objectness, dtype=np.float64)
    neg = 1.0 - pos
    n_pos, n_neg = pos.sum(), neg.sum()
    bce = T.bce_with_logits(grid.logits, pos)
    if n_pos > 0:
        # negatives rescaled by n_pos / n_neg, i.e. the two classes weigh equally
        w = pos / (2 * n_pos) + (neg / (2 * n_neg) if n_neg > 0 else 0.0)
        l_obj = T.tsum(bce * w)
        l_reg = T.tsum(T.smooth_l1(grid.box_regression - Tensor(regression)) * pos) / n_pos
        return l_obj + l_reg
    return T.tsum(bce * (neg / max(n_neg, 1.0)))


def _mse(a: Tensor, b) -> Tensor:
    d = a - T.as_tensor(b)
    return T.mean(d * d)


def loss(result: ForwardResult, targets: SupervisionTargets, weights: LossWeights) -> dict:
    """Weighted sum of the output, fusion, feature and attention-weight terms."""
    l_out = detection_loss(result.grid, targets.objectness, targets.regression)
    zero = Tensor(0.0)
    l_fus = _mse(result.fused, targets.fused) if targets.fused is not None else zero
    l_feat, l_w = zero, zero
    if targets.features is not None and result.link_features:
        terms = []
        for slot, (f, f_t) in enumerate(zip(result.link_features, targets.features)):
            v = result.valid[:, slot].astype(np.float64)
            if v.sum() == 0:
                continue
            d = f - f_t
            mask = v.reshape((-1,) + (1,) * (d.ndim - 1))
            terms.append(T.tsum(d * d * mask) / (v.sum() * np.prod(d.shape[1:])))
        if terms:
            l_feat = terms[0]
            for t in terms[1:]:
                l_feat = l_feat + t
            l_feat = l_feat / len(terms)
    if targets.weights is not None:
        l_w = _mse(result.weights, targets.weights)
    total = weights.lambda_o * l_out + weights.lambda_f * (l_fus + l_feat) + weights.lambda_w * l_w
    return {"total": total, "out": l_out, "fusion": l_fus, "feat": l_feat, "weight": l_w}


# -- run configuration -------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 20
    pretrain_epochs: int = 20
    batches_per_epoch: int = 16
    batch_size: int = 8
    lr: float = 1e-3
    pretrain_lr: float = 3e-3
    clip_norm: float = 5.0
    checkpoint_every: int = 0
    n_train_scenarios: int = 40
    freeze_base: bool = True

    def validate(self):
        for name in ("epochs", "pretrain_epochs", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"train: {name} must be >= 0")
        if self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("train: batches_per_epoch and batch_size must be >= 1")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("train: learning rates must be > 0")
        if self.n_train_scenarios < 1:
            raise ValueError("train: n_train_scenarios must be >= 1")


def format_metrics_row(epoch, stage, terms: dict) -> list:
    return [epoch, stage] + [repr(float(terms[k])) for k in ("total", "out", "fusion", "feat", "weight")]


def metrics_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(rows)
    return out.getvalue()


def _check_finite(terms: dict, context: dict, dump_dir: Path | None):
    bad = [k for k, v in terms.items() if not np.isfinite(v.data).all()]
    if bad:
        if dump_dir is not None:
            dump_dir.mkdir(parents=True, exist_ok=True)
            (dump_dir / "nan_dump.json").write_text(json.dumps(
                {"terms": {k: float(v.data) for k, v in terms.items()}, **context}, indent=1, default=str))
        raise NumericalError(f"non-finite loss terms {bad} at {context}")


class Trainer:
    """Three phases: single-agent detector, zero-latency collaborative model, then SyncNet."""

    def __init__(self, world_scenarios: list[ScenarioData], model_cfg: ModelConfig, comp_cfg: CompensationConfig,
                 train_cfg: TrainConfig, schedule: CurriculumSchedule, weights: LossWeights, seed: int,
                 out_dir: Path | None = None):
        self.data = world_scenarios
        self.model_cfg = model_cfg
        self.comp_cfg = comp_cfg
        self.cfg = train_cfg
        self.schedule = schedule
        self.weights = weights
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.single = SingleAgentModel(model_cfg)
        self.collab = CollabModel(model_cfg)
        self.syncnet = SyncNet(comp_cfg, model_cfg.feat_channels)
        self.sync_base = self.collab
        self.logs: dict[str, list] = {"single": [], "collab": [], "syncnet": []}

    # -- sampling ------------------------------------------------------------------
    def _frame_batch(self, rng):
        out = []
        for _ in range(self.cfg.batch_size):
            s = int(rng.integers(len(self.data)))
            a = int(rng.integers(self.data[s].n_agents))
            t = int(rng.integers(self.data[s].duration))
            out.append((s, a, t))
        return out

    def _latency_batch(self, rng, model: LatencyModel):
        k = self.comp_cfg.k
        samples = []
        for _ in range(self.cfg.batch_size):
            s = int(rng.integers(len(self.data)))
            d = self.data[s]
            receiver = int(rng.integers(d.n_agents))
            taus = {}
            for sender in range(d.n_agents):
                if sender != receiver:
                    taus[sender] = min(int(sample_latency(model, rng)), d.duration - k)
            first = max(taus.values()) + k - 1
            t0 = int(rng.integers(first, d.duration))
            samples.append((s, receiver, t0, taus))
        return samples

    def _targets(self, samples):
        obj = np.stack([self.data[s].targets[t].objectness for s, _, t, *_ in samples])
        reg = np.stack([self.data[s].targets[t].regression for s, _, t, *_ in samples])
        return obj, reg

    # -- phases ----------------------------------------------------------------------
    def pretrain_single(self):
        rng = np.random.default_rng([self.seed, 1])
        opt = Adam(self.single.params, lr=self.cfg.pretrain_lr)
        for epoch in range(self.cfg.pretrain_epochs):
            acc = []
            for _ in range(self.cfg.batches_per_epoch):
                batch = self._frame_batch(rng)
                obs = Tensor(np.stack([self.data[s].obs[a, t] for s, a, t in batch]))
                obj, reg = self._targets(batch)
                self.single.params.zero_grad()
                l_out = detection_loss(self.single.detect(obs), obj, reg)
                terms = {"total": l_out, "out": l_out, "fusion": Tensor(0.0), "feat": Tensor(0.0),
                         "weight": Tensor(0.0)}
                _check_finite(terms, {"phase": "single", "epoch": epoch, "batch": batch}, self.out_dir)
                l_out.backward()
                clip_grad_norm(self.single.params, self.cfg.clip_norm)
                opt.step()
                acc.append({k: float(v.data) for k, v in terms.items()})
            row = format_metrics_row(epoch, 0, _average(acc))
            self.logs["single"].append(row)
            log.info("single epoch %d loss %s", epoch, row[2])

    def pretrain_collab(self):
        rng = np.random.default_rng([self.seed, 2])
        opt = Adam(self.collab.params, lr=self.cfg.pretrain_lr)
        for epoch in range(self.cfg.pretrain_epochs):
            acc = []
            for _ in range(self.cfg.batches_per_epoch):
                batch = self._frame_batch(rng)
                n_agents = self.data[batch[0][0]].n_agents
                obs = []
                for s, a, t in batch:
                    obs.append(self.data[s].obs[a, t])
                for slot in range(n_agents - 1):
                    for s, a, t in batch:
                        sender = [j for j in range(n_agents) if j != a][slot]
                        obs.append(self.data[s].obs[sender, t])
                b = len(batch)
                feats = self.collab.encoder(Tensor(np.stack(obs)))
                ego = feats[0:b]
                hist = [[feats[(slot + 1) * b:(slot + 2) * b]] for slot in range(n_agents - 1)]
                obj, reg = self._targets(batch)
                self.collab.params.zero_grad()
                res = collaborative_forward(self.collab, ego, hist, np.zeros((b, n_agents - 1)))
                l_out = detection_loss(res.grid, obj, reg)
                terms = {"total": l_out, "out": l_out, "fusion": Tensor(0.0), "feat": Tensor(0.0),
                         "weight": Tensor(0.0)}
                _check_finite(terms, {"phase": "collab", "epoch": epoch, "batch": batch}, self.out_dir)
                l_out.backward()
                clip_grad_norm(self.collab.params, self.cfg.clip_norm)
                opt.step()
                acc.append({k: float(v.data) for k, v in terms.items()})
            row = format_metrics_row(epoch, 0, _average(acc))
            self.logs["collab"].append(row)
            log.info("collab epoch %d loss %s", epoch, row[2])

    def train_syncnet(self, checkpoint_cb=None):
        rng = np.random.default_rng([self.seed, 3])
        k = self.comp_cfg.k
        # an unfrozen base is fine-tuned on a copy; the zero-latency model stays the baseline
        base = self.collab if self.cfg.freeze_base else CollabModel(self.model_cfg, self.collab.params)
        self.sync_base = base
        trainable = Params(self.syncnet.params)
        if not self.cfg.freeze_base:
            trainable.update(base.params)
        base.params.set_trainable(not self.cfg.freeze_base)
        opt = Adam(trainable, lr=self.cfg.lr)
        banks = [encode_bank(base, d) for d in self.data] if self.cfg.freeze_base else None
        for epoch in range(self.cfg.epochs):
            lat = curriculum_latency(epoch, self.schedule)
            stage = int(lat.mean_frames) if lat.mode == "fixed" else "exp"
            acc = []
            for _ in range(self.cfg.batches_per_epoch):
                samples = self._latency_batch(rng, lat)
                if banks is not None:
                    ego, hist, taus, valid = batch_from_bank(banks, samples, k)
                    current = [Tensor(np.stack([banks[s][[j for j in range(banks[s].shape[0]) if j != r][slot], t0]
                                                for s, r, t0, _ in samples]))
                               for slot in range(len(hist))]
                else:
                    ego, hist, taus, valid, current = batch_from_observations(base, self.data, samples, k)
                obj, reg = self._targets([(s, r, t0) for s, r, t0, _ in samples])
                targets = teacher_pass(base, ego, current, obj, reg)
                trainable.zero_grad()
                res = collaborative_forward(base, ego, hist, taus, valid, syncnet=self.syncnet)
                terms = loss(res, targets, self.weights)
                _check_finite(terms, {"phase": "syncnet", "epoch": epoch,
                                      "samples": [(s, r, t0, dict(tm)) for s, r, t0, tm in samples]},
                              self.out_dir)
                terms["total"].backward()
                clip_grad_norm(trainable, self.cfg.clip_norm)
                opt.step()
                acc.append({k_: float(v.data) for k_, v in terms.items()})
            row = format_metrics_row(epoch, stage, _average(acc))
            self.logs["syncnet"].append(row)
            log.info("syncnet epoch %d stage %s loss %s", epoch, stage, row[2])
            if checkpoint_cb is not None and self.cfg.checkpoint_every and (epoch + 1) % self.cfg.checkpoint_every == 0:
                checkpoint_cb(epoch + 1)
        base.params.set_trainable(True)

    def all_params(self) -> Params:
        """Every trained tensor under one namespace, as stored in a checkpoint."""
        p = Params(self.single.params)
        p.update(self.collab.params)
        p.update(self.syncnet.params)
        if self.sync_base is not self.collab:
            p.update((f"{SYNC_BASE}{k}", v) for k, v in self.sync_base.params.items())
        return p


def batch_from_observations(model: CollabModel, data: list[ScenarioData], samples, k: int):
    """Like ``batch_from_bank`` but encodes in-graph so the encoder receives gradients."""
    from .pipeline import link_inputs
    b = len(samples)
    n_agents = data[samples[0][0]].n_agents
    obs_bank = [d.obs for d in data]
    egos = [obs_bank[s][r, t0] for s, r, t0, _ in samples]
    hists, taus, valid, current = [], [], [], []
    for s, r, t0, tm in samples:
        h, tr, vr = link_inputs(obs_bank[s], r, t0, tm, k)
        hists.append(h)
        taus.append(tr)
        valid.append(vr)
        current.append([obs_bank[s][j, t0] for j in range(n_agents) if j != r])
    n_links = n_agents - 1
    blocks = [np.stack(egos)]
    for l in range(n_links):
        for q in range(k):
            blocks.append(np.stack([hists[i][l][q] for i in range(b)]))
    for l in range(n_links):
        blocks.append(np.stack([current[i][l] for i in range(b)]))
    feats = model.encoder(Tensor(np.concatenate(blocks, axis=0)))
    pieces = [feats[i * b:(i + 1) * b] for i in range(len(blocks))]
    ego = pieces[0]
    histories = [[pieces[1 + l * k + q] for q in range(k)] for l in range(n_links)]
    cur = pieces[1 + n_links * k:]
    return ego, histories, np.asarray(taus), np.asarray(valid), cur


def _average(rows: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else \
        {k: 0.0 for k in ("total", "out", "fusion", "feat", "weight")}
