"""Scenario files and the top-level simulation driver.

A scenario file is line oriented::

    # comment
    [cluster]
    nodes = 4x8, 2x28          # count x cores-per-node
    granularity = core         # core | node
    dispatch_delay_s = 0
    requeue = true             # requeue preempted fill-in jobs
    fillin_job_cap = 24        # optional scheduler class limit
    horizon_min = 1000
    seed = 1

    [background]               # repeatable; one Poisson stream each
    rate_per_hour = 30
    sizes = 1:4, 8:2           # size:weight, sizes in allocation units
    walltime_min = uniform 5 60
    start_min = 0
    end_min = 1000

    [fillin]
    policy = static            # off | static | keep | dynamic
    mix = 1:40, 4:20, 8:30     # static
    maintain = false           # static
    min_queued = 1:5, 4:5      # keep
    walltime_min = 2000        # static / keep job walltime
    interval_s = 60
    job_cap = 24               # dynamic
    max_walltime_min = 240     # dynamic

    [reservations]
    job = 1010 1020 all        # start_min end_min units|all
    mask = 0 200 40
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from farm.sim.background import ConfigError, WalltimeDist, background_mix, parse_weights
from farm.sim.engine import SimAdapter, Simulator
from farm.sim.model import ClusterSpec, LoadSample, Reservation
from farm.supervisor.policies import Action, DynamicFit, KeepQueued, StaticMix, SupplyPolicy, tick

BUILTIN = ("local", "center", "hlrn")


@dataclass
class BackgroundStream:
    rate_per_hour: float
    sizes: dict[int, float]
    walltime: WalltimeDist
    start_min: float = 0.0
    end_min: float | None = None


@dataclass
class Scenario:
    name: str
    cluster: ClusterSpec
    streams: list[BackgroundStream] = field(default_factory=list)
    policy: SupplyPolicy | None = None
    interval_s: float = 60.0
    requeue: bool = False
    dispatch_delay_s: float = 0.0
    fillin_job_cap: int | None = None
    horizon_min: int = 1000
    seed: int = 1

    def with_(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


_SECTIONS = {"cluster", "background", "fillin", "reservations"}


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _nodes(v: str) -> list[tuple[int, int]]:
    nodes = []
    for item in v.split(","):
        item = item.strip()
        if not item:
            continue
        count, cores = item.lower().split("x")
        for _ in range(int(count)):
            nodes.append((len(nodes), int(cores)))
    return nodes


def _sizes_int(v: str) -> dict[int, int]:
    w = parse_weights(v)
    if any(x != int(x) for x in w.values()):
        raise ValueError("counts must be integers")
    return {k: int(x) for k, x in w.items()}


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    raw: dict[str, dict[str, tuple[int, str]]] = {"cluster": {}, "fillin": {}}
    streams_raw: list[dict[str, tuple[int, str]]] = []
    reservations_raw: list[tuple[int, str, str]] = []
    section = None
    current: dict | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            if section == "background":
                current = {}
                streams_raw.append(current)
            elif section in raw:
                current = raw[section]
            continue
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        if "=" not in line:
            raise ConfigError(f"line {lineno} [{section}]: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if section == "reservations":
            reservations_raw.append((lineno, key, value))
        else:
            current[key] = (lineno, value)

    def get(sec: dict, secname: str, key: str, conv, default=None, required=False):
        if key not in sec:
            if required:
                raise ConfigError(f"[{secname}]: missing required key {key!r}")
            return default
        lineno, value = sec[key]
        try:
            return conv(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno} [{secname}] {key}: {exc}") from None

    def reject_unknown(sec: dict, secname: str, allowed: set[str]) -> None:
        for key, (lineno, _) in sec.items():
            if key not in allowed:
                raise ConfigError(f"line {lineno} [{secname}]: unknown key {key!r}")

    c = raw["cluster"]
    reject_unknown(c, "cluster", {"nodes", "granularity", "dispatch_delay_s", "requeue",
                                  "fillin_job_cap", "horizon_min", "seed"})
    nodes = get(c, "cluster", "nodes", _nodes, required=True)
    gran = get(c, "cluster", "granularity", str, "core")
    if gran not in ("core", "node"):
        raise ConfigError(f"line {c['granularity'][0]} [cluster] granularity: expected core or node")

    reservations = []
    for lineno, kind, value in reservations_raw:
        try:
            parts = value.split()
            if len(parts) != 3:
                raise ValueError("expected: start_min end_min units|all")
            units = None if parts[2] == "all" else int(parts[2])
            reservations.append(Reservation(float(parts[0]) * 60, float(parts[1]) * 60, units, kind))
        except ValueError as exc:
            raise ConfigError(f"line {lineno} [reservations] {kind}: {exc}") from None
    try:
        cluster = ClusterSpec(nodes, reservations, node_granular=(gran == "node"))
    except ValueError as exc:
        raise ConfigError(f"[cluster]: {exc}") from None

    streams = []
    for s in streams_raw:
        reject_unknown(s, "background", {"rate_per_hour", "sizes", "walltime_min", "start_min", "end_min"})
        streams.append(BackgroundStream(
            get(s, "background", "rate_per_hour", float, required=True),
            get(s, "background", "sizes", parse_weights, required=True),
            get(s, "background", "walltime_min", WalltimeDist.parse, required=True),
            get(s, "background", "start_min", float, 0.0),
            get(s, "background", "end_min", float, None),
        ))

    f = raw["fillin"]
    reject_unknown(f, "fillin", {"policy", "mix", "maintain", "min_queued", "walltime_min",
                                 "interval_s", "job_cap", "max_walltime_min"})
    kind = get(f, "fillin", "policy", str, "off")
    wall = get(f, "fillin", "walltime_min", float, 2000.0) * 60
    if kind == "off":
        policy = None
    elif kind == "static":
        policy = StaticMix(get(f, "fillin", "mix", _sizes_int, required=True), wall,
                           get(f, "fillin", "maintain", _bool, False))
    elif kind == "keep":
        policy = KeepQueued(get(f, "fillin", "min_queued", _sizes_int, required=True), wall)
    elif kind == "dynamic":
        policy = DynamicFit(get(f, "fillin", "interval_s", float, 60.0),
                            get(f, "fillin", "job_cap", int, 24),
                            get(f, "fillin", "max_walltime_min", float, 240.0) * 60)
    else:
        raise ConfigError(f"line {f['policy'][0]} [fillin] policy: unknown policy {kind!r}")

    return Scenario(
        name=name,
        cluster=cluster,
        streams=streams,
        policy=policy,
        interval_s=get(f, "fillin", "interval_s", float, 60.0),
        requeue=get(c, "cluster", "requeue", _bool, False),
        dispatch_delay_s=get(c, "cluster", "dispatch_delay_s", float, 0.0),
        fillin_job_cap=get(c, "cluster", "fillin_job_cap", int, None),
        horizon_min=get(c, "cluster", "horizon_min", int, 1000),
        seed=get(c, "cluster", "seed", int, 1),
    )


def load_scenario(name_or_path: str) -> Scenario:
    """Load a built-in scenario by name or a scenario file by path."""
    if name_or_path in BUILTIN:
        text = resources.files("farm.sim").joinpath("scenarios", f"{name_or_path}.ini").read_text()
        return parse_scenario(text, name_or_path)
    path = Path(name_or_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {name_or_path!r}: {exc}") from None
    return parse_scenario(text, path.stem)


@dataclass
class SimResult:
    samples: list[LoadSample]
    normal_starts: list[tuple[int, float]]
    actions: list[Action]
    sim: Simulator

    @property
    def event_log(self):
        return self.sim.event_log


def build_jobs(sc: Scenario, seed: int) -> list:
    horizon_s = sc.horizon_min * 60
    jobs = []
    next_id = 1
    for i, s in enumerate(sc.streams):
        end_s = horizon_s if s.end_min is None else min(horizon_s, s.end_min * 60)
        stream = background_mix(seed * 1009 + i, s.rate_per_hour, s.sizes, s.walltime, end_s,
                                start_s=s.start_min * 60, first_id=next_id)
        jobs.extend(j for j in stream if j.cores <= sc.cluster.total_units)
        next_id += len(stream)
    return jobs


def run_scenario(sc: Scenario, seed: int | None = None, policy: SupplyPolicy | None | str = "default",
                 horizon_min: int | None = None, dispatch_delay_s: float | None = None,
                 fillin_job_cap: int | None | str = "default") -> SimResult:
    """Simulate ``sc`` and sample the load once per simulated minute.

    ``policy=None`` disables fill-in; the default uses the scenario's policy.
    """
    seed = sc.seed if seed is None else seed
    horizon_s = (sc.horizon_min if horizon_min is None else horizon_min) * 60
    delay = sc.dispatch_delay_s if dispatch_delay_s is None else dispatch_delay_s
    pol = sc.policy if isinstance(policy, str) else policy
    cap = sc.fillin_job_cap if isinstance(fillin_job_cap, str) else fillin_job_cap
    sim = Simulator(sc.cluster, build_jobs(sc, seed), dispatch_delay=delay,
                    fillin_job_cap=cap, requeue_fillin=sc.requeue)
    actions: list[Action] = []
    if pol is not None:
        adapter = SimAdapter(sim)
        sim.on_tick = lambda now: actions.extend(tick(pol, adapter, now))
        sim.tick_interval = pol.interval if isinstance(pol, DynamicFit) else sc.interval_s
    samples = sim.run(horizon_s)
    return SimResult(samples, sim.normal_starts, actions, sim)


def utilization(samples: list[LoadSample], t_from: int | None = None, t_to: int | None = None) -> float:
    """Mean of (normal + fillin) / capacity over samples with ``t_from <= t <= t_to``."""
    sel = [s for s in samples
           if (t_from is None or s.t >= t_from) and (t_to is None or s.t <= t_to) and s.capacity > 0]
    if not sel:
        return 0.0
    return sum((s.normal_cores + s.fillin_cores) / s.capacity for s in sel) / len(sel)
