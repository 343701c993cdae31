"""Pool-based evolutionary search over LJ cluster geometries.

Tasks carry two parents and a seed; a client turns them into minimized
children; the server merges children into the pool in whatever order they
arrive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from farm.ea.lj import Diverged, NonFinite, lj_energy, minimize

SEED_LIMIT = 2**63


class PoolTooSmall(ValueError):
    pass


@dataclass(eq=False)
class Candidate:
    coords: np.ndarray
    energy: float
    id: int = 0
    seed: int = 0

    @property
    def n_atoms(self) -> int:
        return len(self.coords)

    @property
    def poisoned(self) -> bool:
        return not math.isfinite(self.energy)

    def sort_key(self) -> tuple:
        return (self.energy, np.ascontiguousarray(self.coords).tobytes())

    def same_as(self, other: "Candidate") -> bool:
        return self.energy == other.energy and np.array_equal(self.coords, other.coords)


@dataclass
class EaSettings:
    p_mut: float = 0.1
    sigma_mut: float = 0.2
    max_iter: int = 2000
    g_tol: float = 1e-6


@dataclass(eq=False)
class EaTask:
    parent_a: Candidate
    parent_b: Candidate
    n_children: int
    seed: int
    settings: EaSettings = field(default_factory=EaSettings)


def local_minimize(coords, max_iter: int = 2000, g_tol: float = 1e-6, seed: int = 0) -> Candidate:
    xm, e, _ = minimize(coords, max_iter=max_iter, g_tol=g_tol)
    return Candidate(xm, e, seed=seed)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_cluster(n_atoms: int, rng: np.random.Generator, r_min: float = 0.5) -> np.ndarray:
    """Uniform placement in a sphere of radius 1.2 * N^(1/3), rejecting contacts closer than ``r_min``."""
    radius = 1.2 * n_atoms ** (1.0 / 3.0)
    atoms: list[np.ndarray] = []
    while len(atoms) < n_atoms:
        p = rng.uniform(-radius, radius, 3)
        if p @ p > radius * radius:
            continue
        if all(np.linalg.norm(p - q) >= r_min for q in atoms):
            atoms.append(p)
    return np.array(atoms)


def cut_plane_crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Top slab of a randomly rotated ``a`` joined with the bottom slab of a rotated ``b``."""
    n = len(a)
    ra = (a - a.mean(axis=0)) @ random_rotation(rng).T
    rb = (b - b.mean(axis=0)) @ random_rotation(rng).T
    k = int(rng.integers(1, n)) if n > 1 else 1
    top = ra[np.argsort(-ra[:, 2], kind="stable")[:k]]
    bottom = rb[np.argsort(rb[:, 2], kind="stable")[:n - k]]
    return np.vstack([top, bottom])


def mutate(x: np.ndarray, rng: np.random.Generator, p_mut: float, sigma: float) -> np.ndarray:
    hit = rng.random(len(x)) < p_mut
    noise = rng.normal(0.0, sigma, x.shape)
    return x + noise * hit[:, None]


def make_children(task: EaTask) -> list[Candidate]:
    """Crossover, mutation and minimization per child; fully determined by ``task.seed``."""
    rng = np.random.default_rng(task.seed)
    st = task.settings
    children = []
    for _ in range(task.n_children):
        child_seed = int(rng.integers(SEED_LIMIT))
        x = cut_plane_crossover(task.parent_a.coords, task.parent_b.coords, rng)
        x = mutate(x, rng, st.p_mut, st.sigma_mut)
        try:
            children.append(local_minimize(x, st.max_iter, st.g_tol, seed=child_seed))
        except (Diverged, NonFinite):
            children.append(Candidate(x, math.nan, seed=child_seed))
    return children


class Pool:
    """Capacity-bounded population sorted by energy with an energy-gap diversity rule.

    Energies are binned into windows of width ``diversity_epsilon``; each
    window keeps its lowest child. Walking windows upward, a window is
    skipped when its representative lies within epsilon of the previously
    kept one. Members are the first ``capacity`` kept representatives. The
    outcome depends only on the set of merged children, never on their
    arrival order.
    """

    def __init__(self, capacity: int, diversity_epsilon: float = 1e-3):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if diversity_epsilon <= 0:
            raise ValueError("diversity_epsilon must be > 0")
        self.capacity = capacity
        self.diversity_epsilon = diversity_epsilon
        self._bins: dict[int, Candidate] = {}
        self._members: list[Candidate] = []
        self._next_id = 1

    @property
    def members(self) -> list[Candidate]:
        return list(self._members)

    def __len__(self) -> int:
        return len(self._members)

    @property
    def best(self) -> Candidate | None:
        return self._members[0] if self._members else None

    def _rebuild(self) -> None:
        kept: list[Candidate] = []
        last = None
        for b in sorted(self._bins):
            cand = self._bins[b]
            if last is not None and cand.energy - last.energy < self.diversity_epsilon:
                continue
            kept.append(cand)
            last = cand
            if len(kept) == self.capacity:
                break
        self._members = kept

    def merge(self, child: Candidate) -> bool:
        """Merge one evaluated child; returns True if it became a member."""
        if child.poisoned:
            return False
        b = math.floor(child.energy / self.diversity_epsilon)
        current = self._bins.get(b)
        if current is not None and current.sort_key() <= child.sort_key():
            return False
        if current is None and len(self._bins) >= 2 * self.capacity and b > max(self._bins):
            return False
        if child.id == 0:
            child.id = self._next_id
            self._next_id += 1
        self._bins[b] = child
        # At least every other occupied bin is kept, so 2 * capacity bins suffice.
        while len(self._bins) > 2 * self.capacity:
            del self._bins[max(self._bins)]
        self._rebuild()
        return any(m is child for m in self._members)

    def same_members(self, other: "Pool") -> bool:
        return len(self) == len(other) and all(a.same_as(b) for a, b in zip(self._members, other._members))


def pool_merge(pool: Pool, child: Candidate) -> Pool:
    pool.merge(child)
    return pool


def rank_weights(n: int) -> np.ndarray:
    w = np.arange(n, 0, -1, dtype=float)
    return w / w.sum()


def next_task(pool: Pool, rng: np.random.Generator, n_children: int = 1,
              seed: int | None = None, settings: EaSettings | None = None) -> EaTask:
    """Two distinct parents by linear rank weighting (best rank weighted highest)."""
    members = pool.members
    n = len(members)
    if n < 2:
        raise PoolTooSmall(f"pool has {n} member(s); need 2")
    w = rank_weights(n)
    i = int(rng.choice(n, p=w))
    w2 = w.copy()
    w2[i] = 0.0
    j = int(rng.choice(n, p=w2 / w2.sum()))
    if seed is None:
        seed = int(rng.integers(SEED_LIMIT))
    return EaTask(members[i], members[j], n_children, seed, settings or EaSettings())


def seed_pool(pool: Pool, n_atoms: int, rng: np.random.Generator, count: int,
              settings: EaSettings | None = None) -> int:
    """Merge ``count`` random minimized clusters; returns evaluations spent."""
    st = settings or EaSettings()
    for _ in range(count):
        s = int(rng.integers(SEED_LIMIT))
        x = random_cluster(n_atoms, np.random.default_rng(s))
        pool.merge(local_minimize(x, st.max_iter, st.g_tol, seed=s))
    return count


@dataclass
class EaRunResult:
    best_energy: float
    evaluations: int
    best_history: list[float]
    pool: Pool


def run_serial(n_atoms: int = 13, capacity: int = 20, evaluations: int = 50_000,
               seed: int = 0, n_children: int = 1, diversity_epsilon: float = 1e-3,
               target: float | None = None, settings: EaSettings | None = None) -> EaRunResult:
    """Single-process EA with the same operators the farm uses.

    Stops early once the best energy reaches ``target``.
    """
    st = settings or EaSettings()
    rng = np.random.default_rng(seed)
    pool = Pool(capacity, diversity_epsilon)
    used = seed_pool(pool, n_atoms, rng, min(capacity, evaluations), st)
    history = [pool.best.energy]
    while used < evaluations and len(pool) < 2:
        used += seed_pool(pool, n_atoms, rng, 1, st)
    while used < evaluations:
        if target is not None and pool.best.energy <= target:
            break
        task = next_task(pool, rng, min(n_children, evaluations - used), settings=st)
        for child in make_children(task):
            pool.merge(child)
        used += task.n_children
        history.append(pool.best.energy)
    return EaRunResult(pool.best.energy, used, history, pool)


def check_energy(c: Candidate, tol: float = 1e-9) -> bool:
    return abs(lj_energy(c.coords) - c.energy) <= tol
