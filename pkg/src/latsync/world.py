"""Synthetic bird's-eye-view world: moving boxes observed by static agents.

Everything lives in one global frame covering ``[lo, hi]^2`` metres. A BEV
grid cell ``(r, c)`` spans ``x in [lo + c*s, lo + (c+1)*s]`` and
``y in [lo + r*s, lo + (r+1)*s]`` with ``s`` the cell size.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class WorldConfig:
    lo: float = -32.0
    hi: float = 32.0
    grid: int = 64
    n_objects: int = 8
    n_agents: int = 3
    duration: int = 30
    frame_rate: float = 5.0
    size_min: float = 3.0
    size_max: float = 5.0
    speed_min: float = 0.0
    speed_max: float = 1.0
    accel_noise: float = 0.0
    occlusion: bool = True
    dropout: float = 0.0
    agent_range: float = 36.0
    agent_half_angle: float = 1.0
    agent_radius: float = 24.0
    max_retries: int = 2000

    def validate(self):
        if not self.hi > self.lo:
            raise ValueError("world: hi must exceed lo")
        if self.grid <= 0 or self.duration <= 0:
            raise ValueError("world: grid and duration must be positive")
        if self.n_objects < 0:
            raise ValueError("world: n_objects must be >= 0")
        if self.n_agents < 2:
            raise ValueError("world: n_agents must be >= 2")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError("world: need 0 < size_min <= size_max")
        if self.size_max >= self.hi - self.lo:
            raise ValueError("world: objects larger than the world")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("world: need 0 <= speed_min <= speed_max")
        if not 0 < self.agent_half_angle <= np.pi:
            raise ValueError("world: agent_half_angle must lie in (0, pi]")
        if self.agent_range <= 0:
            raise ValueError("world: agent_range must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("world: dropout must lie in [0, 1)")

    @property
    def cell(self) -> float:
        return (self.hi - self.lo) / self.grid


@dataclass
class AgentPose:
    position: tuple[float, float]
    orientation: float
    half_angle: float
    range: float


@dataclass
class MovingObject:
    center: tuple[float, float]
    size: tuple[float, float]
    velocity: tuple[float, float]


@dataclass
class BoxSet:
    """Axis-aligned boxes ``(x_min, y_min, x_max, y_max)`` with confidences."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.boxes):
            raise ValueError("BoxSet: one score per box required")
        if len(self.boxes) and not (np.all(self.boxes[:, 0] < self.boxes[:, 2])
                                    and np.all(self.boxes[:, 1] < self.boxes[:, 3])):
            raise ValueError("BoxSet: boxes need x_min < x_max and y_min < y_max")

    def __len__(self):
        return len(self.boxes)


@dataclass
class Observation:
    grid: np.ndarray
    agent_id: int
    frame: int


@dataclass
class Scenario:
    config: WorldConfig
    seed: int
    sizes: np.ndarray          # (n, 2) widths and heights
    centers: np.ndarray        # (duration, n, 2)
    velocities: np.ndarray     # (duration, n, 2), velocity applied after each frame
    agents: list[AgentPose]

    @property
    def duration(self) -> int:
        return self.config.duration

    @property
    def frame_rate(self) -> float:
        return self.config.frame_rate

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def objects(self) -> list[MovingObject]:
        return [MovingObject(tuple(self.centers[0, i]), tuple(self.sizes[i]), tuple(self.velocities[0, i]))
                for i in range(len(self.sizes))]

    def boxes_at(self, frame: int) -> np.ndarray:
        half = self.sizes / 2.0
        c = self.centers[frame]
        return np.concatenate([c - half, c + half], axis=1).reshape(-1, 4)

    # -- serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": int(self.seed),
            "sizes": self.sizes.tolist(),
            "centers": self.centers.tolist(),
            "velocities": self.velocities.tolist(),
            "agents": [asdict(a) for a in self.agents],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        cfg = WorldConfig(**d["config"])
        n = len(d["sizes"])
        return cls(
            config=cfg,
            seed=int(d["seed"]),
            sizes=np.asarray(d["sizes"], dtype=np.float64).reshape(n, 2),
            centers=np.asarray(d["centers"], dtype=np.float64).reshape(cfg.duration, n, 2),
            velocities=np.asarray(d["velocities"], dtype=np.float64).reshape(cfg.duration, n, 2),
            agents=[AgentPose(tuple(a["position"]), a["orientation"], a["half_angle"], a["range"])
                    for a in d["agents"]],
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def _place_agents(cfg: WorldConfig, rng: np.random.Generator) -> list[AgentPose]:
    # spread agents around the centre, each looking roughly inwards
    base = rng.uniform(0, 2 * np.pi)
    agents = []
    for a in range(cfg.n_agents):
        ang = base + 2 * np.pi * a / cfg.n_agents + rng.uniform(-0.3, 0.3)
        mid = (cfg.lo + cfg.hi) / 2
        pos = (mid + cfg.agent_radius * np.cos(ang), mid + cfg.agent_radius * np.sin(ang))
        facing = ang + np.pi + rng.uniform(-0.6, 0.6)
        facing = float(np.arctan2(np.sin(facing), np.cos(facing)))
        agents.append(AgentPose((float(pos[0]), float(pos[1])), facing, cfg.agent_half_angle, cfg.agent_range))
    return agents


def _sample_trajectory(cfg: WorldConfig, rng: np.random.Generator):
    size = rng.uniform(cfg.size_min, cfg.size_max, size=2)
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    heading = rng.uniform(0, 2 * np.pi)
    v0 = speed * np.array([np.cos(heading), np.sin(heading)])
    vel = np.tile(v0, (cfg.duration, 1))
    if cfg.accel_noise > 0:
        vel = v0 + np.cumsum(rng.normal(0, cfg.accel_noise, size=(cfg.duration, 2)), axis=0)
        speeds = np.linalg.norm(vel, axis=1, keepdims=True)
        vel = np.where(speeds > cfg.speed_max, vel * cfg.speed_max / np.maximum(speeds, 1e-12), vel)
    # offsets relative to the start centre at each frame
    offsets = np.concatenate([np.zeros((1, 2)), np.cumsum(vel[:-1], axis=0)], axis=0)
    half = size / 2
    lo_start = cfg.lo + half - offsets.min(axis=0)
    hi_start = cfg.hi - half - offsets.max(axis=0)
    if np.any(lo_start >= hi_start):
        return None
    start = rng.uniform(lo_start, hi_start)
    return size, start + offsets, vel


def _overlaps(box: np.ndarray, boxes: np.ndarray) -> bool:
    if len(boxes) == 0:
        return False
    return bool(np.any((box[0] < boxes[:, 2]) & (box[2] > boxes[:, 0])
                       & (box[1] < boxes[:, 3]) & (box[3] > boxes[:, 1])))


def generate_scenario(config: WorldConfig, seed: int) -> Scenario:
    """Build a reproducible scenario from ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    agents = _place_agents(config, rng)
    sizes, centers, vels = [], [], []
    placed = np.zeros((0, 4))
    tries = 0
    while len(sizes) < config.n_objects:
        tries += 1
        if tries > config.max_retries:
            raise RuntimeError(
                f"generate_scenario: could not place {config.n_objects} non-overlapping objects "
                f"inside the bounds within {config.max_retries} retries")
        sample = _sample_trajectory(config, rng)
        if sample is None:
            continue
        size, traj, vel = sample
        box0 = np.concatenate([traj[0] - size / 2, traj[0] + size / 2])
        if _overlaps(box0, placed):
            continue
        placed = np.vstack([placed, box0])
        sizes.append(size)
        centers.append(traj)
        vels.append(vel)
    n = config.n_objects
    return Scenario(
        config=config,
        seed=seed,
        sizes=np.asarray(sizes).reshape(n, 2),
        centers=np.stack(centers, axis=1) if n else np.zeros((config.duration, 0, 2)),
        velocities=np.stack(vels, axis=1) if n else np.zeros((config.duration, 0, 2)),
        agents=agents,
    )


# -- observation ----------------------------------------------------------------
def cell_centers(cfg: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.cell
    coords = cfg.lo + (np.arange(cfg.grid) + 0.5) * s
    xs, ys = np.meshgrid(coords, coords)  # xs varies along columns
    return xs, ys


def occupancy(boxes: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    """Per-object cell masks ``(n, G, G)``: True where the box overlaps the cell with positive area."""
    xs, ys = cell_centers(cfg)
    h = cfg.cell / 2
    b = boxes[:, :, None, None]
    return ((xs - h < b[:, 2]) & (xs + h > b[:, 0]) & (ys - h < b[:, 3]) & (ys + h > b[:, 1]))


def in_sector(agent: AgentPose, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx, dy = xs - agent.position[0], ys - agent.position[1]
    dist = np.hypot(dx, dy)
    diff = np.arctan2(dy, dx) - agent.orientation
    diff = np.abs(np.arctan2(np.sin(diff), np.cos(diff)))
    return (dist <= agent.range) & (diff <= agent.half_angle)


def segment_hits_box(p0, xs, ys, box) -> np.ndarray:
    """Slab test: does the segment from ``p0`` to each ``(xs, ys)`` touch the closed ``box``?"""
    tmin = np.zeros_like(xs)
    tmax = np.ones_like(xs)
    for d, origin, lo, hi in ((xs - p0[0], p0[0], box[0], box[2]), (ys - p0[1], p0[1], box[1], box[3])):
        parallel = d == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / d
            t2 = (hi - origin) / d
        near = np.where(parallel, -np.inf, np.minimum(t1, t2))
        far = np.where(parallel, np.inf, np.maximum(t1, t2))
        outside = parallel & ((origin < lo) | (origin > hi))
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
        tmax = np.where(outside, -np.inf, tmax)
    return tmin <= tmax


def observe(scenario: Scenario, agent_id: int, frame: int) -> Observation:
    """Occupancy grid seen by one agent at one frame.

    A cell reads 1 when some object overlaps it, its centre lies in the
    agent's view sector, and (with occlusion on) the segment from the agent
    to the cell centre misses every object not overlapping that cell.
    """
    if not 0 <= agent_id < scenario.n_agents:
        raise KeyError(f"observe: unknown agent_id {agent_id}")
    if not 0 <= frame < scenario.duration:
        raise IndexError(f"observe: frame {frame} outside [0, {scenario.duration})")
    cfg = scenario.config
    agent = scenario.agents[agent_id]
    boxes = scenario.boxes_at(frame)
    xs, ys = cell_centers(cfg)
    occ = occupancy(boxes, cfg)
    visible = in_sector(agent, xs, ys) & occ.any(axis=0)
    if cfg.occlusion and len(boxes):
        blocked = np.zeros_like(visible)
        for b, box in enumerate(boxes):
            blocked |= segment_hits_box(agent.position, xs, ys, box) & ~occ[b]
        visible &= ~blocked
    grid = visible.astype(np.float64)
    if cfg.dropout > 0:
        rng = np.random.default_rng([scenario.seed, agent_id, frame])
        grid *= rng.random(grid.shape) >= cfg.dropout
    return Observation(grid[:, :, None], agent_id, frame)


def full_occupancy(scenario: Scenario, frame: int) -> np.ndarray:
    """Occupancy with unlimited visibility, ``(G, G, 1)``."""
    occ = occupancy(scenario.boxes_at(frame), scenario.config)
    return occ.any(axis=0).astype(np.float64)[:, :, None]


def ground_truth_boxes(scenario: Scenario, frame: int, region=None) -> BoxSet:
    """All objects intersecting ``region`` at ``frame``, clipped to it."""
    if not 0 <= frame < scenario.duration:
        raise IndexError(f"ground_truth_boxes: frame {frame} outside [0, {scenario.duration})")
    cfg = scenario.config
    if region is None:
        region = (cfg.lo, cfg.lo, cfg.hi, cfg.hi)
    boxes = scenario.boxes_at(frame)
    keep = ((boxes[:, 0] < region[2]) & (boxes[:, 2] > region[0])
            & (boxes[:, 1] < region[3]) & (boxes[:, 3] > region[1]))
    kept = boxes[keep].copy()
    kept[:, [0, 2]] = np.clip(kept[:, [0, 2]], region[0], region[2])
    kept[:, [1, 3]] = np.clip(kept[:, [1, 3]], region[1], region[3])
    return BoxSet(kept, np.ones(len(kept)))
