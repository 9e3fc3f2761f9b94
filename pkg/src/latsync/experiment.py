"""End-to-end runs: scenario sets, training with checkpoints, benchmark and ablation grid."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import ExperimentConfig, scenario_seeds
from .evaluation import (EvalConfig, Systems, evaluate_scenario, results_csv, run_benchmark,
                         systems_from_params)
from .nn import load_checkpoint, save_checkpoint
from .pipeline import ScenarioData
from .render import render_frame_svg
from .training import Trainer, metrics_csv
from .world import generate_scenario

log = logging.getLogger(__name__)

ABLATION_ROWS = [
    ("A", "ve", "single", True),
    ("B", "ve", "pyramid", False),
    ("C", "ve", "pyramid", True),
    ("D", "fase", "single", True),
    ("E", "fase", "pyramid", False),
    ("F", "fase", "pyramid", True),
]
ABLATION_HEADER = ["method", "compensation", "lstm", "tm", "tau", "ap50", "ap70"]


def build_scenarios(cfg: ExperimentConfig, split: str, n: int, threads: int = 1) -> list[ScenarioData]:
    seeds = scenario_seeds(cfg.seed, split, n)

    def one(s):
        return ScenarioData(generate_scenario(cfg.world, s), cfg.model)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    return {"config": cfg.to_dict(), "digest": cfg.digest(), **extra}


def train_experiment(cfg: ExperimentConfig, out: Path, threads: int = 1) -> Trainer:
    """All three training phases; writes checkpoints, metrics CSVs and the resolved config."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    data = build_scenarios(cfg, "train", cfg.train.n_train_scenarios, threads)
    trainer = Trainer(data, cfg.model, cfg.syncnet, cfg.train, cfg.curriculum, cfg.loss, cfg.seed, out)
    trainer.pretrain_single()
    trainer.pretrain_collab()

    def checkpoint_cb(epoch):
        save_checkpoint(out / f"checkpoint_epoch{epoch:04d}", trainer.all_params(), _meta(cfg, epoch=epoch))

    trainer.train_syncnet(checkpoint_cb)
    save_checkpoint(out / "checkpoint", trainer.all_params(), _meta(cfg, epoch=cfg.train.epochs))
    (out / "metrics.csv").write_text(metrics_csv(trainer.logs["syncnet"]))
    (out / "metrics_single.csv").write_text(metrics_csv(trainer.logs["single"]))
    (out / "metrics_collab.csv").write_text(metrics_csv(trainer.logs["collab"]))
    return trainer


def load_systems(cfg: ExperimentConfig, checkpoint: Path) -> Systems:
    params, _ = load_checkpoint(checkpoint)
    return systems_from_params(params, cfg.model, cfg.syncnet)


def eval_experiment(cfg: ExperimentConfig, systems: Systems, system_names, taus, out: Path | None = None,
                    threads: int = 1, svg: bool = False) -> list[list]:
    test = build_scenarios(cfg, "test", cfg.eval.n_test_scenarios, threads)
    rows = run_benchmark(systems, list(system_names), list(taus), test, cfg.seed, cfg.eval, cfg.model, threads)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(results_csv(rows))
        if svg or cfg.eval.svg:
            write_overlays(systems, test[0], system_names, taus, cfg.eval, cfg, out / "svg")
    return rows


def write_overlays(systems, data: ScenarioData, system_names, taus, eval_cfg: EvalConfig, cfg, out: Path):
    """Ground truth vs predictions of receiver 0 on the last frame of the first test scenario."""
    out.mkdir(parents=True, exist_ok=True)
    res = evaluate_scenario(systems, data, list(system_names), list(taus), eval_cfg, cfg.model)
    frame = data.duration - 1
    # images are ordered frame-major, agent-minor; receiver 0 of the last frame
    idx = (data.duration - min(eval_cfg.start_frame, data.duration - 1) - 1) * data.n_agents
    for (name, tau), images in sorted(res.items()):
        preds, _ = images[idx]
        svg = render_frame_svg(data.scenario, frame, preds, title=f"{name} tau={tau} frame {frame}")
        (out / f"{name}_tau{tau:02d}.svg").write_text(svg)


def run_ablation(cfg: ExperimentConfig, out: Path | None = None, epochs: int = 2, taus=(1, 5),
                 threads: int = 1, trainer: Trainer | None = None) -> list[list]:
    """SyncNet variants A-F on a shared pre-trained base, each trained for ``epochs``."""
    if trainer is None:
        data = build_scenarios(cfg, "train", cfg.train.n_train_scenarios, threads)
        trainer = Trainer(data, cfg.model, cfg.syncnet, cfg.train, cfg.curriculum, cfg.loss, cfg.seed)
        trainer.pretrain_single()
        trainer.pretrain_collab()
    train_cfg = dataclasses.replace(trainer.cfg, epochs=epochs)
    test = build_scenarios(cfg, "test", cfg.eval.n_test_scenarios, threads)
    rows = []
    for method, estimator, scale, tm in ABLATION_ROWS:
        comp = dataclasses.replace(cfg.syncnet, estimator=estimator, scale=scale, time_modulation=tm)
        variant = Trainer(trainer.data, cfg.model, comp, train_cfg, cfg.curriculum, cfg.loss, cfg.seed)
        variant.single, variant.collab = trainer.single, trainer.collab
        variant.sync_base = trainer.collab
        variant.train_syncnet()
        systems = Systems(None, None, variant.sync_base, variant.syncnet)
        res = run_benchmark(systems, ["syncnet"], list(taus), test, cfg.seed, cfg.eval, cfg.model, threads)
        table = {(int(r[1]), float(r[2])): r[3] for r in res}
        for tau in taus:
            rows.append([method, estimator, scale, int(tm), int(tau), table.get((tau, 0.5), "nan"),
                         table.get((tau, 0.7), "nan")])
        log.info("ablation %s done", method)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "ablation.csv").write_text(ablation_csv(rows))
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    w.writerows(rows)
    return buf.getvalue()
