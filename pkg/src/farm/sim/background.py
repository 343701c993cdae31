"""Poisson background job streams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from farm.sim.model import JobClass, JobSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WalltimeDist:
    """Walltime distribution in minutes: ``uniform lo hi``, ``exp mean [cap]`` or ``fixed v``."""

    kind: str
    params: tuple[float, ...]

    @classmethod
    def parse(cls, text: str) -> "WalltimeDist":
        parts = text.split()
        if not parts:
            raise ConfigError("empty walltime distribution")
        kind = parts[0]
        try:
            params = tuple(float(p) for p in parts[1:])
        except ValueError:
            raise ConfigError(f"bad walltime parameters in {text!r}") from None
        dist = cls(kind, params)
        dist.validate()
        return dist

    def validate(self) -> None:
        k, p = self.kind, self.params
        ok = ((k == "uniform" and len(p) == 2 and 0 < p[0] <= p[1])
              or (k == "exp" and len(p) in (1, 2) and p[0] > 0 and (len(p) == 1 or p[1] > 0))
              or (k == "fixed" and len(p) == 1 and p[0] > 0))
        if not ok:
            raise ConfigError(f"invalid walltime distribution {k} {p}")

    def sample_minutes(self, rng: np.random.Generator) -> float:
        if self.kind == "uniform":
            return float(rng.uniform(*self.params))
        if self.kind == "exp":
            v = float(rng.exponential(self.params[0]))
            if len(self.params) == 2:
                v = min(v, self.params[1])
            return max(v, 1.0)
        return self.params[0]


def parse_weights(text: str) -> dict[int, float]:
    """``"1:4, 8:2"`` -> ``{1: 4.0, 8: 2.0}``."""
    out: dict[int, float] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            k, v = item.split(":")
            size, weight = int(k), float(v)
        except ValueError:
            raise ConfigError(f"expected size:weight, got {item!r}") from None
        if size < 1 or weight < 0:
            raise ConfigError(f"invalid entry {item!r}")
        out[size] = out.get(size, 0.0) + weight
    if not out or sum(out.values()) <= 0:
        raise ConfigError(f"no positive weights in {text!r}")
    return out


def background_mix(seed: int, rate: float, sizes: dict[int, float], walltime: WalltimeDist,
                   horizon_s: float, start_s: float = 0.0, first_id: int = 1) -> list[JobSpec]:
    """Poisson arrivals at ``rate`` jobs/hour over ``[start_s, horizon_s)``.

    Submit times are whole seconds; walltimes are whole seconds, at least 60.
    """
    if rate < 0:
        raise ConfigError("rate must be >= 0")
    if not sizes or any(s < 1 for s in sizes) or sum(sizes.values()) <= 0:
        raise ConfigError("invalid size distribution")
    walltime.validate()
    rng = np.random.default_rng(seed)
    if rate == 0 or horizon_s <= start_s:
        return []
    size_keys = sorted(sizes)
    probs = np.array([sizes[k] for k in size_keys], dtype=float)
    probs /= probs.sum()
    mean_gap = 3600.0 / rate
    jobs = []
    t = start_s
    job_id = first_id
    while True:
        t += rng.exponential(mean_gap)
        if t >= horizon_s:
            break
        size = size_keys[int(rng.choice(len(size_keys), p=probs))]
        wall = max(60, int(round(walltime.sample_minutes(rng) * 60)))
        jobs.append(JobSpec(job_id, size, wall, float(int(t)), JobClass.NORMAL))
        job_id += 1
    return jobs
