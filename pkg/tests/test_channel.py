import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latsync.channel import (HistoryBuffer, LatencyModel, LatencyTrace, WarmupError, attach_latency_tensor,
                             draw_continuous, sample_latency, simulate_links, transmit)


def test_fixed_mode_constant():
    rng = np.random.default_rng(0)
    m = LatencyModel(3, "fixed")
    assert all(sample_latency(m, rng) == 3 for _ in range(50))
    np.testing.assert_array_equal(sample_latency(m, rng, size=10), np.full(10, 3))


def test_mean_zero_exponential_always_zero():
    rng = np.random.default_rng(0)
    assert np.all(sample_latency(LatencyModel(0, "exponential"), rng, size=1000) == 0)


def test_exponential_continuous_mean():
    m = LatencyModel(5, "exponential")
    draws = draw_continuous(m, np.random.default_rng(1), size=10**6)
    assert abs(draws.mean() - 5) / 5 < 0.02


def test_exponential_floor_of_draw():
    m = LatencyModel(5, "exponential")
    cont = draw_continuous(m, np.random.default_rng(2), size=1000)
    frames = sample_latency(m, np.random.default_rng(2), size=1000)
    np.testing.assert_array_equal(frames, np.floor(cont).astype(int))
    assert frames.min() >= 0


def test_scalar_draw_is_int():
    tau = sample_latency(LatencyModel(5, "exponential"), np.random.default_rng(0))
    assert isinstance(tau, int) and tau >= 0


@pytest.mark.parametrize("kw", [dict(mean_frames=-1), dict(mode="uniform"), dict(mean_frames=2.5)])
def test_invalid_models(kw):
    with pytest.raises(ValueError):
        LatencyModel(**kw)


def test_transmit_ideal_channel():
    buf = transmit(list(range(20)), t0=10, tau=0, k=1)
    assert buf.stamps == [10] and buf.frames == [10]


def test_transmit_index_arithmetic():
    buf = transmit({i: f"f{i}" for i in range(20)}, t0=10, tau=2, k=3)
    assert buf.stamps == [6, 7, 8] and buf.frames == ["f6", "f7", "f8"]
    assert buf.newest == 8 and buf.full


def test_transmit_warmup():
    with pytest.raises(WarmupError):
        transmit(list(range(20)), t0=3, tau=2, k=3)
    with pytest.raises(WarmupError):
        transmit({5: "x"}, t0=6, tau=0, k=2)
    with pytest.raises(ValueError):
        transmit(list(range(5)), t0=3, tau=-1, k=1)


def test_log_replay_staleness():
    # random latency per frame; replay the log and check every delivery
    rng = np.random.default_rng(3)
    frames = {t: ("sender", t) for t in range(200)}
    k, log = 3, []
    for t0 in range(200):
        tau = sample_latency(LatencyModel(4, "exponential"), rng)
        try:
            buf = transmit(frames, t0, tau, k)
        except WarmupError:
            assert t0 - tau - k + 1 < 0
            continue
        log.append((t0, tau, buf))
    assert len(log) > 150
    for t0, tau, buf in log:
        assert buf.newest == t0 - tau
        assert buf.stamps == list(range(t0 - tau - k + 1, t0 - tau + 1))
        assert buf.frames == [frames[s] for s in buf.stamps]


def test_history_buffer_rolls_and_rejects_gaps():
    buf = HistoryBuffer(2)
    for s in range(5):
        buf.push(s, s)
        assert len(buf) <= 2
    assert buf.stamps == [3, 4]
    with pytest.raises(ValueError):
        buf.push(9, 9)
    with pytest.raises(ValueError):
        buf.push(4, 4)
    with pytest.raises(ValueError):
        HistoryBuffer(0)


def test_latency_tensor_examples():
    tf, tw = attach_latency_tensor(0, (3, 3, 2), (3, 3))
    assert not tf.any() and not tw.any()
    _, tw = attach_latency_tensor(4, (2, 2, 5), (2, 2))
    np.testing.assert_array_equal(tw, [[4, 4], [4, 4]])
    tf, _ = attach_latency_tensor(2, (4, 4, 8), (4, 4), time_unit=0.2)
    assert tf.shape == (4, 4, 8) and np.all(tf == 0.4)
    with pytest.raises(ValueError):
        attach_latency_tensor(-1, (1,), (1,))


@given(st.integers(0, 50), st.lists(st.integers(1, 5), min_size=1, max_size=3))
def test_latency_tensor_constant(tau, shape):
    tf, tw = attach_latency_tensor(tau, shape, shape[:-1] or [1])
    assert tf.max() - tf.min() == 0 and tw.max() - tw.min() == 0


def test_per_link_draws_independent():
    trace = simulate_links(3, 20000, LatencyModel(5, "exponential"), np.random.default_rng(4))
    by_link = {}
    for f, s, r, tau in trace.rows:
        by_link.setdefault((s, r), []).append(tau)
    series = np.array([by_link[k] for k in sorted(by_link)], dtype=float)
    assert series.shape == (6, 20000)
    corr = np.corrcoef(series)
    off = corr[~np.eye(6, dtype=bool)]
    assert np.abs(off).max() < 0.05


def test_shared_draw_when_not_per_link():
    trace = simulate_links(3, 50, LatencyModel(5, "exponential", per_link=False), np.random.default_rng(5))
    frames = {}
    for f, s, r, tau in trace.rows:
        frames.setdefault(f, set()).add(tau)
    assert all(len(v) == 1 for v in frames.values())


def test_trace_csv_round_trip():
    trace = simulate_links(3, 10, LatencyModel(2, "exponential"), np.random.default_rng(6))
    text = trace.to_csv()
    assert text.splitlines()[0] == "frame,sender,receiver,tau"
    back = LatencyTrace.from_csv(text)
    assert back.rows == trace.rows and back.to_csv() == text
    f, s, r, tau = trace.rows[7]
    assert back.lookup(f, s, r) == tau
    with pytest.raises(KeyError):
        back.lookup(99, 0, 1)
