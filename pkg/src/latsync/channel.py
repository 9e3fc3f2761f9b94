"""Per-link communication: whole-frame latency draws and stale history buffers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class WarmupError(LookupError):
    """The sender has not produced enough frames for the requested delivery."""


@dataclass
class LatencyModel:
    mean_frames: float = 0.0
    mode: str = "fixed"          # "fixed" or "exponential"
    per_link: bool = True
    time_unit: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fixed", "exponential"):
            raise ValueError(f"LatencyModel: unknown mode {self.mode!r}")
        if self.mean_frames < 0:
            raise ValueError(f"LatencyModel: mean_frames must be >= 0, got {self.mean_frames}")
        if self.mode == "fixed" and float(self.mean_frames) != int(self.mean_frames):
            raise ValueError("LatencyModel: fixed latency must be a whole number of frames")


def draw_continuous(model: LatencyModel, rng: np.random.Generator, size=None):
    """Underlying real-valued delay (frames) before quantization."""
    if model.mode == "fixed" or model.mean_frames == 0:
        return np.full(size, float(model.mean_frames)) if size is not None else float(model.mean_frames)
    return rng.exponential(model.mean_frames, size=size)


def sample_latency(model: LatencyModel, rng: np.random.Generator, size=None):
    """Latency in whole frames: the constant in fixed mode, else floor of an exponential draw."""
    if model.mode == "fixed":
        tau = int(model.mean_frames)
        return tau if size is None else np.full(size, tau, dtype=np.int64)
    draw = draw_continuous(model, rng, size)
    return int(np.floor(draw)) if size is None else np.floor(draw).astype(np.int64)


@dataclass
class HistoryBuffer:
    """The last ``capacity`` frames received on one link, newest last."""

    capacity: int
    stamps: list[int] = field(default_factory=list)
    frames: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("HistoryBuffer: capacity must be >= 1")

    def push(self, stamp: int, frame):
        if self.stamps and stamp != self.stamps[-1] + 1:
            raise ValueError(f"HistoryBuffer: frame {stamp} does not follow {self.stamps[-1]}")
        self.stamps.append(stamp)
        self.frames.append(frame)
        if len(self.stamps) > self.capacity:
            del self.stamps[0]
            del self.frames[0]

    def __len__(self):
        return len(self.stamps)

    @property
    def newest(self) -> int:
        return self.stamps[-1]

    @property
    def full(self) -> bool:
        return len(self.stamps) == self.capacity


def transmit(sender_frames: Mapping[int, object] | Sequence, t0: int, tau: int, k: int) -> HistoryBuffer:
    """Deliver the ``k`` sender frames ending at ``t0 - tau``.

    Raises :class:`WarmupError` when frames before the scenario start would be needed.
    """
    if tau < 0:
        raise ValueError(f"transmit: tau must be >= 0, got {tau}")
    first = t0 - tau - k + 1
    if first < 0:
        raise WarmupError(f"transmit: link needs frame {first} (t0={t0}, tau={tau}, k={k})")
    buf = HistoryBuffer(k)
    for stamp in range(first, t0 - tau + 1):
        try:
            buf.push(stamp, sender_frames[stamp])
        except (KeyError, IndexError) as exc:
            raise WarmupError(f"transmit: sender frame {stamp} unavailable") from exc
    return buf


def attach_latency_tensor(tau: int, shape_feature, shape_attention, time_unit: float = 1.0):
    """Constant expansions of ``tau`` matching the feature and attention shapes."""
    if tau < 0:
        raise ValueError(f"attach_latency_tensor: tau must be >= 0, got {tau}")
    value = float(tau) * time_unit
    return np.full(tuple(shape_feature), value), np.full(tuple(shape_attention), value)


class LatencyTrace:
    """Record of every latency draw, exportable as ``frame,sender,receiver,tau`` CSV."""

    def __init__(self):
        self.rows: list[tuple[int, int, int, int]] = []

    def record(self, frame: int, sender: int, receiver: int, tau: int):
        self.rows.append((int(frame), int(sender), int(receiver), int(tau)))

    def lookup(self, frame: int, sender: int, receiver: int) -> int:
        for f, s, r, tau in self.rows:
            if (f, s, r) == (frame, sender, receiver):
                return tau
        raise KeyError((frame, sender, receiver))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["frame", "sender", "receiver", "tau"])
        w.writerows(self.rows)
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LatencyTrace":
        trace = cls()
        for row in csv.DictReader(io.StringIO(text)):
            trace.record(row["frame"], row["sender"], row["receiver"], row["tau"])
        return trace


def simulate_links(n_agents: int, duration: int, model: LatencyModel, rng: np.random.Generator) -> LatencyTrace:
    """Draw a latency for every directed link at every frame.

    With ``per_link`` off one draw per frame is shared by all links.
    """
    trace = LatencyTrace()
    for frame in range(duration):
        shared = sample_latency(model, rng)
        for receiver in range(n_agents):
            for sender in range(n_agents):
                if sender == receiver:
                    continue
                tau = sample_latency(model, rng) if model.per_link else shared
                trace.record(frame, sender, receiver, tau)
    return trace
