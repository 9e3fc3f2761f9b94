"""AP@IoU evaluation, Kalman late-fusion baseline and the latency benchmark."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .nn import Params
from .perception import CollabModel, ModelConfig, SingleAgentModel, boxes_from_grid, iou_matrix, nms
from .pipeline import ScenarioData, collaborative_forward, encode_bank, link_inputs
from .syncnet import CompensationConfig, SyncNet
from .tensor import Tensor, no_grad
from .world import BoxSet

SYSTEMS = ("no_collab", "latency_unaware", "late_kalman", "syncnet")
RESULTS_HEADER = ["system", "tau", "iou_thresh", "ap", "n_scenarios", "seed"]


def iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"iou: degenerate box {box.tolist()}")
    return float(iou_matrix(a, b)[0, 0])


def match_detections(preds: BoxSet, gts: BoxSet, iou_thresh: float) -> np.ndarray:
    """TP flags for predictions in descending-confidence order (stable).

    Each prediction is compared with its highest-IoU ground truth; it is a
    true positive when that IoU reaches the threshold and the ground truth
    has not been claimed by a more confident prediction.
    """
    order = np.argsort(-preds.scores, kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    if len(gts) == 0 or len(order) == 0:
        return tp
    ious = iou_matrix(preds.boxes[order], gts.boxes)
    claimed = np.zeros(len(gts), dtype=bool)
    for rank in range(len(order)):
        g = int(np.argmax(ious[rank]))
        if ious[rank, g] >= iou_thresh and not claimed[g]:
            claimed[g] = True
            tp[rank] = True
    return tp


def precision_recall(images, iou_thresh: float):
    """Cumulative precision and recall over ``(preds, gts)`` image pairs."""
    scores, flags = [], []
    n_gt = 0
    for preds, gts in images:
        tp = match_detections(preds, gts, iou_thresh)
        scores.append(preds.scores[np.argsort(-preds.scores, kind="stable")])
        flags.append(tp)
        n_gt += len(gts)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    flags = flags[order]
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt if n_gt else np.zeros_like(tp, dtype=np.float64)
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall, n_gt


def average_precision(preds, gts=None, iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP.

    Pass either one image as ``(preds, gts)`` or a list of ``(preds, gts)``
    pairs as the first argument. Returns NaN when there is no ground truth.
    """
    images = [(preds, gts)] if gts is not None else list(preds)
    precision, recall, n_gt = precision_recall(images, iou_thresh)
    if n_gt == 0:
        return float("nan")
    if len(precision) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


# -- Kalman late fusion --------------------------------------------------------------------
@dataclass
class KalmanConfig:
    process_noise: float = 0.05     # white-acceleration spectral density
    measurement_noise: float = 0.5  # position variance, m^2
    init_pos_var: float = 1.0
    init_vel_var: float = 4.0
    gate: float = 4.0               # association radius, m
    max_age: int = 2


@dataclass
class KalmanTrack:
    state: np.ndarray                    # x, y, vx, vy
    covariance: np.ndarray               # 4x4
    size: tuple[float, float]
    age: int = 0
    score: float = 1.0
    track_id: int = -1
    detection: np.ndarray | None = None  # box of the detection that last updated the track

    def box(self) -> np.ndarray:
        w, h = self.size
        x, y = self.state[:2]
        return np.array([x - w / 2, y - h / 2, x + w / 2, y + h / 2])


class CovarianceError(FloatingPointError):
    pass


def new_track(center, size, cfg: KalmanConfig, score=1.0, track_id=-1, velocity=(0.0, 0.0)) -> KalmanTrack:
    cov = np.diag([cfg.init_pos_var] * 2 + [cfg.init_vel_var] * 2).astype(np.float64)
    state = np.array([center[0], center[1], velocity[0], velocity[1]], dtype=np.float64)
    return KalmanTrack(state, cov, (float(size[0]), float(size[1])), 0, float(score), track_id)


def _transition(dt: float, q: float):
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    a, b, c = dt ** 3 / 3, dt ** 2 / 2, dt
    qm = q * np.array([[a, 0, b, 0], [0, a, 0, b], [b, 0, c, 0], [0, b, 0, c]])
    return f, qm


def _check_psd(p: np.ndarray):
    if not np.isfinite(p).all():
        raise CovarianceError("Kalman covariance is not finite")
    if np.linalg.eigvalsh(p).min() < -1e-9 * max(1.0, np.abs(p).max()):
        raise CovarianceError("Kalman covariance is not positive semidefinite")


def _position_update(x, p, z, cfg: KalmanConfig):
    h = np.zeros((2, 4))
    h[0, 0] = h[1, 1] = 1.0
    r = np.eye(2) * cfg.measurement_noise
    s = h @ p @ h.T + r
    gain = np.linalg.solve(s, h @ p).T
    x = x + gain @ (np.asarray(z, dtype=np.float64) - h @ x)
    ikh = np.eye(4) - gain @ h
    p = ikh @ p @ ikh.T + gain @ r @ gain.T   # Joseph form
    p = 0.5 * (p + p.T)
    _check_psd(p)
    return x, p


def kalman_predict_update(track: KalmanTrack, dt: int, measurement=None, cfg: KalmanConfig | None = None,
                          measurement_size=None, score=None) -> KalmanTrack:
    """Constant-velocity prediction over ``dt`` frames, then an optional position update."""
    cfg = cfg or KalmanConfig()
    if dt < 1:
        raise ValueError("kalman_predict_update: dt must be >= 1")
    f, q = _transition(dt, cfg.process_noise)
    x = f @ track.state
    p = f @ track.covariance @ f.T + q
    age = track.age + dt
    size = track.size
    if measurement is not None:
        x, p = _position_update(x, p, measurement, cfg)
        age = 0
        if measurement_size is not None:
            size = (float(measurement_size[0]), float(measurement_size[1]))
    else:
        p = 0.5 * (p + p.T)
        _check_psd(p)
    return KalmanTrack(x, p, size, age, track.score if score is None else float(score), track.track_id)


def predict_ahead(track: KalmanTrack, dt: int, cfg: KalmanConfig | None = None) -> KalmanTrack:
    return track if dt == 0 else kalman_predict_update(track, dt, None, cfg)


class SenderTracker:
    """Tracks built from one agent's own detections, with a snapshot per frame."""

    def __init__(self, cfg: KalmanConfig | None = None):
        self.cfg = cfg or KalmanConfig()
        self.tracks: list[KalmanTrack] = []
        self.snapshots: dict[int, list[KalmanTrack]] = {}
        self._next_id = 0
        self._frame = None

    def step(self, frame: int, detections: BoxSet):
        cfg = self.cfg
        if self._frame is not None:
            dt = frame - self._frame
            self.tracks = [kalman_predict_update(t, dt, None, cfg) for t in self.tracks]
        self._frame = frame
        centers = (detections.boxes[:, :2] + detections.boxes[:, 2:]) / 2 if len(detections) else np.zeros((0, 2))
        sizes = detections.boxes[:, 2:] - detections.boxes[:, :2] if len(detections) else np.zeros((0, 2))
        n_old = len(self.tracks)
        if n_old and len(detections):
            pos = np.stack([t.state[:2] for t in self.tracks])
            dist = np.hypot(*(centers[:, None, :] - pos[None, :, :]).transpose(2, 0, 1))
        else:
            dist = np.zeros((len(detections), n_old))
        current = []
        for d in np.argsort(-detections.scores, kind="stable"):
            best = -1
            if n_old:
                ti = int(np.argmin(dist[d]))
                if dist[d, ti] < cfg.gate:
                    best = ti
                    dist[:, ti] = np.inf
            if best >= 0:
                # the prediction step was applied above; this is a pure measurement update
                tr = self.tracks[best]
                x, p = _position_update(tr.state, tr.covariance, centers[d], cfg)
                upd = KalmanTrack(x, p, (float(sizes[d, 0]), float(sizes[d, 1])), 0,
                                  float(detections.scores[d]), tr.track_id, detections.boxes[d].copy())
                self.tracks[best] = upd
                current.append(upd)
            else:
                tr = new_track(centers[d], sizes[d], cfg, detections.scores[d], self._next_id)
                tr.detection = detections.boxes[d].copy()
                self._next_id += 1
                self.tracks.append(tr)
                current.append(tr)
        self.tracks = [t for t in self.tracks if t.age <= cfg.max_age]
        self.snapshots[frame] = current


def late_fuse_baseline(ego_boxes: BoxSet, remote: list, nms_iou: float = 0.3,
                       cfg: KalmanConfig | None = None) -> BoxSet:
    """Merge ego detections with remote tracks advanced by their link latency.

    ``remote`` is a list of ``(tracks, tau)``: the sender's tracks matched at
    ``t0 - tau``. Each is predicted ``tau`` frames ahead before NMS; at
    ``tau == 0`` there is nothing to predict and the sender's detection is used.
    """
    boxes = [ego_boxes.boxes]
    scores = [ego_boxes.scores]
    for tracks, tau in remote:
        for tr in tracks:
            if tau == 0 and tr.detection is not None:
                boxes.append(np.asarray(tr.detection, dtype=np.float64)[None])
            else:
                boxes.append(predict_ahead(tr, int(tau), cfg).box()[None])
            scores.append(np.array([tr.score]))
    boxes = np.concatenate(boxes, axis=0)
    scores = np.concatenate(scores)
    if len(boxes) == 0:
        return BoxSet()
    keep = nms(boxes, scores, nms_iou)
    return BoxSet(boxes[keep], scores[keep])


# -- benchmark ---------------------------------------------------------------------------------
@dataclass
class EvalConfig:
    iou_thresholds: list = field(default_factory=lambda: [0.5, 0.7])
    score_threshold: float = 0.05
    nms_iou: float = 0.3
    start_frame: int = 12
    n_test_scenarios: int = 10
    taus: list = field(default_factory=lambda: list(range(0, 11)))
    svg: bool = False

    def validate(self):
        if not 0 < self.score_threshold < 1:
            raise ValueError("eval: score_threshold must lie in (0, 1)")
        if self.start_frame < 0:
            raise ValueError("eval: start_frame must be >= 0")
        if any(t < 0 for t in self.taus):
            raise ValueError("eval: taus must be >= 0")
        if self.n_test_scenarios < 1:
            raise ValueError("eval: n_test_scenarios must be >= 1")


@dataclass
class Systems:
    """Models behind the neural systems; any may be None when not evaluated."""
    single: SingleAgentModel | None = None
    collab: CollabModel | None = None
    sync_base: CollabModel | None = None
    syncnet: SyncNet | None = None
    kalman: KalmanConfig = field(default_factory=KalmanConfig)


def systems_from_params(params: Params, model_cfg: ModelConfig, comp_cfg: CompensationConfig,
                        kalman: KalmanConfig | None = None) -> Systems:
    """Build every system whose parameters are all present in ``params``.

    A system whose parameters are entirely absent is left as None; a partial or
    mis-shaped set raises ``CheckpointError``.
    """
    from .nn import CheckpointError
    from .training import SYNC_BASE

    def build(factory, source: Params):
        model = factory()
        names = list(model.params)
        present = [n for n in names if n in source]
        if not present:
            return None
        missing = [n for n in names if n not in source]
        if missing:
            raise CheckpointError(f"checkpoint is missing {len(missing)} tensors, e.g. {missing[0]!r}")
        try:
            model.params.copy_from(Params((n, source[n]) for n in names))
        except ValueError as exc:
            raise CheckpointError(str(exc)) from None
        return model

    single = build(lambda: SingleAgentModel(model_cfg), params)
    collab = build(lambda: CollabModel(model_cfg), params)
    syncnet = build(lambda: SyncNet(comp_cfg, model_cfg.feat_channels), params)
    stripped = Params((k[len(SYNC_BASE):], v) for k, v in params.items() if k.startswith(SYNC_BASE))
    sync_base = build(lambda: CollabModel(model_cfg), stripped) if stripped else collab
    return Systems(single, collab, sync_base, syncnet, kalman or KalmanConfig())


def _frames(data: ScenarioData, cfg: EvalConfig):
    return [(a, t) for t in range(min(cfg.start_frame, data.duration - 1), data.duration)
            for a in range(data.n_agents)]


def _grids_to_boxes(grid, model_cfg: ModelConfig, cfg: EvalConfig) -> list[BoxSet]:
    from .perception import DetectionGrid
    out = []
    for b in range(grid.logits.shape[0]):
        g = DetectionGrid(Tensor(grid.logits.data[b]), Tensor(grid.box_regression.data[b]))
        out.append(boxes_from_grid(g, cfg.score_threshold, cfg.nms_iou, model_cfg))
    return out


def _collab_boxes(model: CollabModel, bank, data, frames, tau, k, cfg, syncnet=None):
    ego = Tensor(np.stack([bank[a, t] for a, t in frames]))
    hists, taus, valid = [], [], []
    for a, t in frames:
        h, tr, vr = link_inputs(bank, a, t, {j: tau for j in range(data.n_agents)}, k)
        hists.append(h)
        taus.append(tr)
        valid.append(vr)
    n_links = len(hists[0])
    histories = [[Tensor(np.stack([hists[i][l][q] for i in range(len(frames))])) for q in range(k)]
                 for l in range(n_links)]
    res = collaborative_forward(model, ego, histories, np.asarray(taus), np.asarray(valid), syncnet=syncnet)
    return _grids_to_boxes(res.grid, model.cfg, cfg)


def evaluate_scenario(systems: Systems, data: ScenarioData, system_names, taus, cfg: EvalConfig,
                      model_cfg: ModelConfig) -> dict:
    """Per ``(system, tau)`` list of ``(preds, gts)`` images for one scenario."""
    frames = _frames(data, cfg)
    gts = [data.gt[t] for _, t in frames]
    out = {}
    with no_grad():
        single_all = None
        if "no_collab" in system_names or "late_kalman" in system_names:
            obs = data.obs.reshape((-1,) + data.obs.shape[2:])
            grids = []
            for s in range(0, len(obs), 64):
                g = systems.single.detect(Tensor(obs[s:s + 64]))
                grids.extend(_grids_to_boxes(g, model_cfg, cfg))
            single_all = [[grids[a * data.duration + t] for t in range(data.duration)] for a in range(data.n_agents)]
        if "no_collab" in system_names:
            preds = [single_all[a][t] for a, t in frames]
            for tau in taus:
                out[("no_collab", tau)] = list(zip(preds, gts))
        if "latency_unaware" in system_names:
            bank = encode_bank(systems.collab, data)
            for tau in taus:
                out[("latency_unaware", tau)] = list(zip(_collab_boxes(systems.collab, bank, data, frames, tau, 1, cfg), gts))
        if "syncnet" in system_names:
            bank = encode_bank(systems.sync_base, data)
            k = systems.syncnet.cfg.k
            for tau in taus:
                preds = _collab_boxes(systems.sync_base, bank, data, frames, tau, k, cfg, syncnet=systems.syncnet)
                out[("syncnet", tau)] = list(zip(preds, gts))
        if "late_kalman" in system_names:
            trackers = []
            for a in range(data.n_agents):
                tr = SenderTracker(systems.kalman)
                for t in range(data.duration):
                    tr.step(t, single_all[a][t])
                trackers.append(tr)
            for tau in taus:
                preds = []
                for a, t in frames:
                    remote = [(trackers[j].snapshots[t - tau], tau) for j in range(data.n_agents)
                              if j != a and t - tau >= 0]
                    preds.append(late_fuse_baseline(single_all[a][t], remote, cfg.nms_iou, systems.kalman))
                out[("late_kalman", tau)] = list(zip(preds, gts))
    return out


def run_benchmark(systems: Systems, system_names, taus, scenarios: list[ScenarioData], seed: int,
                  cfg: EvalConfig, model_cfg: ModelConfig, threads: int = 1) -> list[list]:
    """AP per (system, tau, IoU threshold) over held-out scenarios, as CSV rows."""
    for name in system_names:
        if name not in SYSTEMS:
            raise ValueError(f"unknown system {name!r}; choose from {SYSTEMS}")
    need = {"no_collab": systems.single, "late_kalman": systems.single, "latency_unaware": systems.collab,
            "syncnet": systems.syncnet if systems.sync_base is not None else None}
    for name in system_names:
        if need[name] is None:
            raise ValueError(f"no trained checkpoint available for system {name!r}")

    def job(data):
        return evaluate_scenario(systems, data, system_names, taus, cfg, model_cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_scenario = list(pool.map(job, scenarios))
    else:
        per_scenario = [job(d) for d in scenarios]
    rows = []
    for name in system_names:
        for tau in taus:
            images = [img for res in per_scenario for img in res[(name, tau)]]
            for thr in cfg.iou_thresholds:
                rows.append([name, int(tau), thr, repr(average_precision(images, iou_thresh=thr)),
                             len(scenarios), seed])
    return rows


def results_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    w.writerows(rows)
    return out.getvalue()


def results_table(rows) -> dict:
    """``{(system, tau, iou_thresh): ap}`` from CSV rows."""
    return {(r[0], int(r[1]), float(r[2])): float(r[3]) for r in rows}
