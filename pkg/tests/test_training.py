import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latsync import tensor as T
from latsync.config import load_config
from latsync.experiment import build_scenarios
from latsync.gradcheck import finite_diff_check
from latsync.nn import Adam, CheckpointError, Params, clip_grad_norm, global_norm, load_checkpoint, save_checkpoint
from latsync.perception import CollabModel
from latsync.pipeline import ScenarioData, batch_from_bank, collaborative_forward, encode_bank
from latsync.syncnet import SyncNet
from latsync.tensor import Tensor
from latsync.training import (METRICS_HEADER, CurriculumSchedule, LossWeights, NumericalError, Trainer,
                              curriculum_latency, curriculum_stage, detection_loss, loss, metrics_csv,
                              teacher_pass)
from latsync.world import generate_scenario

from conftest import SMALL


@pytest.fixture(scope="module")
def cfg():
    return load_config("tiny", SMALL)


@pytest.fixture(scope="module")
def data(cfg):
    return build_scenarios(cfg, "train", 2)


def make_trainer(cfg, data, out=None, **train):
    tc = dataclasses.replace(cfg.train, **train)
    return Trainer(data, cfg.model, cfg.syncnet, tc, cfg.curriculum, cfg.loss, cfg.seed, out)


def link_batch(cfg, data, model, taus, t0=10, receivers=(0, 1)):
    banks = [encode_bank(model, d) for d in data]
    samples = []
    for r in receivers:
        others = [j for j in range(data[0].n_agents) if j != r]
        samples.append((0, r, t0, dict(zip(others, taus))))
    ego, hist, tau_arr, valid = batch_from_bank(banks, samples, cfg.syncnet.k)
    current = [Tensor(np.stack([banks[0][[j for j in range(data[0].n_agents) if j != r][slot], t0]
                                for _, r, t0, _ in samples])) for slot in range(len(hist))]
    obj = np.stack([data[0].targets[t0].objectness for _ in samples])
    reg = np.stack([data[0].targets[t0].regression for _ in samples])
    return ego, hist, tau_arr, valid, current, obj, reg


# -- curriculum -----------------------------------------------------------------------------
def test_curriculum_examples():
    s = CurriculumSchedule()
    assert curriculum_latency(0, s).mode == "fixed" and curriculum_latency(0, s).mean_frames == 1
    assert curriculum_latency(95, s).mean_frames == 10
    final = curriculum_latency(100, s)
    assert final.mode == "exponential" and final.mean_frames == 5


@given(st.integers(0, 500))
def test_curriculum_pure_and_monotone(epoch):
    s = CurriculumSchedule(frames_per_stage=3, max_fixed_latency=7)
    assert curriculum_latency(epoch, s) == curriculum_latency(epoch, s)
    assert curriculum_stage(epoch + 1, s) >= curriculum_stage(epoch, s)


def test_curriculum_rejects_negative_epoch():
    with pytest.raises(ValueError):
        curriculum_stage(-1, CurriculumSchedule())


# -- teacher --------------------------------------------------------------------------------
def test_teacher_empty_scene_zero_objectness(cfg):
    d = ScenarioData(generate_scenario(dataclasses.replace(cfg.world, n_objects=0), 1), cfg.model)
    assert all(t.objectness.sum() == 0 for t in d.targets)


def test_teacher_singleton_fusion_is_own_feature(cfg):
    model = CollabModel(cfg.model)
    ego = Tensor(np.random.default_rng(0).normal(size=(2, 8, 8, 4)))
    t = teacher_pass(model, ego, [], np.zeros((2, 8, 8, 1)), np.zeros((2, 8, 8, 4)))
    np.testing.assert_array_equal(t.fused.data, ego.data)


def test_teacher_weights_normalized(cfg, data):
    model = CollabModel(cfg.model)
    ego, _, _, _, current, obj, reg = link_batch(cfg, data, model, [1, 2])
    t = teacher_pass(model, ego, current, obj, reg)
    np.testing.assert_allclose(t.weights.data.sum(axis=0), 1.0, atol=1e-12)
    assert not t.fused.requires_grad


# -- loss -----------------------------------------------------------------------------------
def test_zero_latency_student_equals_teacher(cfg, data):
    model = CollabModel(cfg.model)
    net = SyncNet(cfg.syncnet, cfg.model.feat_channels)
    banks = [encode_bank(model, d) for d in data]
    samples = [(0, 0, 9, {1: 0, 2: 0}), (1, 2, 12, {0: 0, 1: 0})]
    ego, hist, taus, valid = batch_from_bank(banks, samples, cfg.syncnet.k)
    current = [hist[l][-1] for l in range(len(hist))]
    obj = np.stack([data[s].targets[t].objectness for s, _, t, _ in samples])
    reg = np.stack([data[s].targets[t].regression for s, _, t, _ in samples])
    res = collaborative_forward(model, ego, hist, taus, valid, syncnet=net)
    terms = loss(res, teacher_pass(model, ego, current, obj, reg), LossWeights())
    assert float(terms["fusion"].data) == 0.0
    assert float(terms["feat"].data) == 0.0
    assert float(terms["weight"].data) == 0.0
    assert float(terms["out"].data) > 0


def test_detection_only_when_lambdas_zero(cfg, data):
    model = CollabModel(cfg.model)
    net = SyncNet(cfg.syncnet, cfg.model.feat_channels)
    ego, hist, taus, valid, current, obj, reg = link_batch(cfg, data, model, [2, 3])
    res = collaborative_forward(model, ego, hist, taus, valid, syncnet=net)
    targets = teacher_pass(model, ego, current, obj, reg)
    terms = loss(res, targets, LossWeights(1.0, 0.0, 0.0))
    assert float(terms["total"].data) == float(terms["out"].data)
    full = loss(res, targets, LossWeights())
    assert all(float(v.data) >= 0 for v in full.values())
    assert float(full["feat"].data) > 0


def test_total_loss_gradient(cfg, data):
    model = CollabModel(cfg.model)
    net = SyncNet(cfg.syncnet, cfg.model.feat_channels)
    ego, hist, taus, valid, current, obj, reg = link_batch(cfg, data, model, [1, 2], receivers=(0,))
    # drop to two agents: one link
    hist, taus, valid, current = hist[:1], taus[:, :1], valid[:, :1], current[:1]
    targets = teacher_pass(model, ego, current, obj, reg)
    probes = [net.p_f.gates.branches[1].kernel, net.m_f.kernel, model.attention_net.conv2.kernel, hist[0][0]]

    def f():
        res = collaborative_forward(model, ego, hist, taus, valid, syncnet=net)
        return loss(res, targets, LossWeights())["total"]

    assert finite_diff_check(f, probes, max_elements=12) < 1e-4


def test_detection_loss_balanced():
    logits = Tensor(np.zeros((1, 4, 4, 1)))
    obj = np.zeros((1, 4, 4, 1))
    obj[0, 1, 1] = 1
    grid = type("G", (), {"logits": logits, "box_regression": Tensor(np.zeros((1, 4, 4, 4)))})()
    # at zero logits every cell costs log 2; both classes weigh one half
    assert abs(float(detection_loss(grid, obj, np.zeros((1, 4, 4, 4))).data) - np.log(2)) < 1e-12


# -- training loop --------------------------------------------------------------------------
def test_zero_epochs_checkpoint_is_initialization(cfg, data, tmp_path):
    tr = make_trainer(cfg, data, epochs=0, pretrain_epochs=0)
    tr.pretrain_single()
    tr.pretrain_collab()
    tr.train_syncnet()
    save_checkpoint(tmp_path / "ck", tr.all_params())
    params, _ = load_checkpoint(tmp_path / "ck")
    fresh = make_trainer(cfg, data).all_params()
    assert sorted(params) == sorted(fresh)
    for name in fresh:
        assert params[name].data.tobytes() == fresh[name].data.tobytes(), name


def test_overfit_fixed_fixture(cfg, data):
    model = CollabModel(cfg.model)
    net = SyncNet(cfg.syncnet, cfg.model.feat_channels)
    ego, hist, taus, valid, current, obj, reg = link_batch(cfg, data, model, [2, 3])
    targets = teacher_pass(model, ego, current, obj, reg)
    # base and compensation trained jointly, teacher targets held fixed
    params = Params(net.params)
    params.update(model.params)
    opt = Adam(params, lr=1e-2)
    history = []
    for _ in range(50):
        params.zero_grad()
        res = collaborative_forward(model, ego, hist, taus, valid, syncnet=net)
        total = loss(res, targets, LossWeights())["total"]
        total.backward()
        clip_grad_norm(params, 5.0)
        opt.step()
        history.append(float(total.data))
    assert history[-1] < 0.5 * history[0]


def test_training_runs_are_identical(cfg, data):
    logs = []
    for _ in range(2):
        tr = make_trainer(cfg, data)
        tr.pretrain_single()
        tr.pretrain_collab()
        tr.train_syncnet()
        logs.append(metrics_csv(tr.logs["syncnet"]) + metrics_csv(tr.logs["collab"]))
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == ",".join(METRICS_HEADER)


def test_unfrozen_base_trains_a_copy(cfg, data):
    tr = make_trainer(cfg, data, freeze_base=False, epochs=1, pretrain_epochs=0)
    before = {k: v.data.copy() for k, v in tr.collab.params.items()}
    tr.train_syncnet()
    assert tr.sync_base is not tr.collab
    assert all(np.array_equal(before[k], v.data) for k, v in tr.collab.params.items())
    assert any(k.startswith("sync_base.") for k in tr.all_params())


def test_nonfinite_loss_halts_with_dump(cfg, data, tmp_path):
    tr = make_trainer(cfg, data, tmp_path)
    tr.collab.params["decoder.cls.bias"].data[:] = np.nan
    with pytest.raises(NumericalError, match="non-finite"):
        tr.pretrain_collab()
    assert "terms" in (tmp_path / "nan_dump.json").read_text()


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(0.0).validate()
    with pytest.raises(ValueError):
        LossWeights(1.0, -1.0).validate()


# -- parameters, checkpoints, optimizer -----------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    p = Params()
    p.add("a.kernel", np.random.default_rng(0).normal(size=(3, 3, 2, 2)))
    p.add("a.bias", np.arange(2.0))
    save_checkpoint(tmp_path, p, {"note": "x"})
    q, meta = load_checkpoint(tmp_path)
    assert meta == {"note": "x"}
    for k in p:
        assert q[k].data.tobytes() == p[k].data.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path)
    p = Params()
    p.add("w", np.ones(4))
    save_checkpoint(tmp_path, p)
    (tmp_path / "params.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError, match="past the end"):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.json").write_text('{"version": 99, "tensors": {}}')
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_clip_grad_norm():
    p = Params()
    t = p.add("w", np.zeros(4))
    t.grad = np.array([3.0, 4.0, 0.0, 0.0]) * 10
    clip_grad_norm(p, 5.0)
    assert abs(global_norm(p) - 5.0) < 1e-12


def test_adam_minimizes_quadratic():
    p = Params()
    x = p.add("x", np.array([3.0, -2.0]))
    opt = Adam(p, lr=0.1)
    for _ in range(300):
        p.zero_grad()
        T.tsum(x * x).backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-2
