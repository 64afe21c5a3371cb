"""Canonical particle swarm optimization over a bounded hyperparameter box.

Synchronous global-best PSO with the standard constriction-equivalent
coefficients (w=0.729, c1=c2=1.49445). Minimization throughout; log-scale
dimensions move in log space and decode on evaluation. The incumbent
(default) configuration can be injected as particle 0, which makes tuning
monotone with respect to it.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

W_INERTIA = 0.729
C_COGNITIVE = 1.49445
C_SOCIAL = 1.49445


@dataclass
class Dimension:
    name: str
    lo: float
    hi: float
    scale: str = "linear"  # or "log"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: lo must be < hi")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"{self.name}: scale must be linear or log")
        if self.scale == "log" and self.lo <= 0:
            raise ValueError(f"{self.name}: log scale requires lo > 0")

    def to_internal(self, x: float) -> float:
        return math.log(x) if self.scale == "log" else x

    def to_value(self, u: float) -> float:
        return math.exp(u) if self.scale == "log" else u


@dataclass
class SearchSpace:
    dims: list[Dimension]

    def __post_init__(self):
        if not self.dims:
            raise ValueError("search space is empty")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([d.to_internal(d.lo) for d in self.dims])
        hi = np.array([d.to_internal(d.hi) for d in self.dims])
        return lo, hi

    def decode(self, u: np.ndarray) -> dict[str, float]:
        return {d.name: d.to_value(v) for d, v in zip(self.dims, u)}

    def encode(self, values: dict[str, float]) -> np.ndarray:
        return np.array([d.to_internal(values[d.name]) for d in self.dims])


@dataclass
class Swarm:
    positions: np.ndarray       # [n, d] internal coordinates
    velocities: np.ndarray
    pbest_pos: np.ndarray
    pbest_val: np.ndarray
    gbest_pos: np.ndarray
    gbest_val: float
    w: float = W_INERTIA
    c1: float = C_COGNITIVE
    c2: float = C_SOCIAL


def _evaluate(space: SearchSpace, objective, position: np.ndarray) -> float:
    return float(objective(space.decode(position)))


def init_swarm(space: SearchSpace, objective, n_particles: int,
               rng: np.random.Generator, inject: dict[str, float] | None = None,
               w: float = W_INERTIA, c1: float = C_COGNITIVE, c2: float = C_SOCIAL) -> Swarm:
    lo, hi = space.bounds()
    d = len(space.dims)
    pos = rng.uniform(lo, hi, size=(n_particles, d))
    if inject is not None:
        pos[0] = np.clip(space.encode(inject), lo, hi)
    vel = np.zeros_like(pos)
    vals = np.empty(n_particles)
    for i in range(n_particles):
        v = _evaluate(space, objective, pos[i])
        vals[i] = v if math.isfinite(v) else math.inf
        if not math.isfinite(v):
            log.warning("particle %d returned non-finite objective at init", i)
    best = int(np.argmin(vals))
    return Swarm(pos, vel, pos.copy(), vals.copy(), pos[best].copy(), float(vals[best]),
                 w=w, c1=c1, c2=c2)


def pso_step(swarm: Swarm, space: SearchSpace, objective, rng: np.random.Generator) -> Swarm:
    """One synchronous update; returns the same swarm object, mutated."""
    lo, hi = space.bounds()
    n, d = swarm.positions.shape
    for i in range(n):  # fixed particle order keeps the run deterministic
        r1 = rng.uniform(size=d)
        r2 = rng.uniform(size=d)
        swarm.velocities[i] = (swarm.w * swarm.velocities[i]
                               + swarm.c1 * r1 * (swarm.pbest_pos[i] - swarm.positions[i])
                               + swarm.c2 * r2 * (swarm.gbest_pos - swarm.positions[i]))
        swarm.positions[i] = np.clip(swarm.positions[i] + swarm.velocities[i], lo, hi)
    values = np.empty(n)
    for i in range(n):
        values[i] = _evaluate(space, objective, swarm.positions[i])
    for i in range(n):
        v = values[i]
        if not math.isfinite(v):
            log.warning("particle %d returned non-finite objective; keeping previous best", i)
            continue
        if v < swarm.pbest_val[i]:
            swarm.pbest_val[i] = v
            swarm.pbest_pos[i] = swarm.positions[i].copy()
    best = int(np.argmin(swarm.pbest_val))
    if swarm.pbest_val[best] < swarm.gbest_val:
        swarm.gbest_val = float(swarm.pbest_val[best])
        swarm.gbest_pos = swarm.pbest_pos[best].copy()
    return swarm


def optimize(space: SearchSpace, objective, n_particles: int, n_iters: int, seed: int = 0,
             inject: dict[str, float] | None = None,
             trace: list[dict] | None = None) -> tuple[dict[str, float], float, list[float]]:
    """Full PSO run. Returns (best decoded position, best value, best-value history).

    The history has one entry per iteration (plus the initial evaluation) and
    is monotone non-increasing by construction.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    rng = np.random.default_rng(seed)
    swarm = init_swarm(space, objective, n_particles, rng, inject)
    history = [swarm.gbest_val]
    if trace is not None:
        for i in range(n_particles):
            trace.append({"iteration": 0, "particle": i,
                          **space.decode(swarm.positions[i]),
                          "objective": float(swarm.pbest_val[i])})
    for it in range(1, n_iters + 1):
        pso_step(swarm, space, objective, rng)
        history.append(swarm.gbest_val)
        if trace is not None:
            for i in range(n_particles):
                trace.append({"iteration": it, "particle": i,
                              **space.decode(swarm.positions[i]),
                              "objective": float(swarm.pbest_val[i])})
    return space.decode(swarm.gbest_pos), swarm.gbest_val, history


def write_leaderboard(path, trace: list[dict], names: list[str]) -> None:
    """Evaluations sorted best-first: iteration, particle, positions, objective."""
    rows = sorted(trace, key=lambda r: r["objective"])
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iteration", "particle", *names, "objective"])
        writer.writeheader()
        writer.writerows(rows)
