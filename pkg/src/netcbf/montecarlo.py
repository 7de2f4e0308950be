"""Monte Carlo harness: disturbance draws, tolerance calibration and paired batches."""
from __future__ import annotations

import functools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import bounds, robot
from .barrier import estimate_lipschitz
from .loop import Architecture, ControllerConfig, Plant, RunRecord, plant_from_scenario, run

WORKERS_ENV = "NETCBF_WORKERS"
CBF_ARCHITECTURES = (Architecture.LOCAL_CBF, Architecture.REMOTE_MPC_CBF, Architecture.COMBINED)
CLIP_LEVELS = {"low": 0.002, "high": 0.004}


@dataclass(frozen=True)
class DisturbanceSpec:
    """Zero-mean Gaussian components with std ``sigma``, norm-clipped at ``clip``."""

    clip: float = 0.0
    sigma: float | None = None
    mode: str = "custom"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("low", "high", "custom"):
            raise ValueError("mode must be low, high or custom")
        if self.mode != "custom" and self.clip == 0.0:
            object.__setattr__(self, "clip", CLIP_LEVELS[self.mode])
        if self.sigma is None:
            object.__setattr__(self, "sigma", self.clip / 2.0)
        if self.clip < 0 or self.sigma < 0:
            raise ValueError("clip and sigma must be nonnegative")

    def with_seed(self, seed: int) -> "DisturbanceSpec":
        return replace(self, seed=int(seed))


def _clip_rows(W, clip):
    n = np.linalg.norm(W, axis=-1, keepdims=True)
    scale = np.where(n > clip, clip / np.where(n > 0, n, 1.0), 1.0)
    return W * scale


def sample_disturbance(spec: DisturbanceSpec, dim: int, index: int = 0) -> np.ndarray:
    """Draw number ``index`` of the stream defined by ``spec.seed``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng((spec.seed, index))
    return _clip_rows(spec.sigma * rng.standard_normal(dim), spec.clip)


def disturbance_sequence(spec: DisturbanceSpec, dim: int, n_steps: int) -> np.ndarray:
    """Rows ``0 .. n_steps-1`` of the stream; row ``k`` equals ``sample_disturbance(spec, dim, k)``."""
    if spec.sigma == 0 or spec.clip == 0:
        return np.zeros((n_steps, dim))
    return np.array([sample_disturbance(spec, dim, k) for k in range(n_steps)])


def run_seed(base_seed: int, run_index: int) -> int:
    """Per-run seed shared by every architecture for run ``run_index``."""
    return int(np.random.SeedSequence([base_seed, run_index]).generate_state(1, np.uint32)[0])


# experiments


@dataclass(frozen=True)
class Experiment:
    """A picklable bundle from which every worker rebuilds the same plant."""

    scenario: robot.Scenario
    gamma: float
    weights: tuple = (100.0, 0.3, 0.05)
    controller: ControllerConfig = field(default_factory=ControllerConfig, hash=False, compare=False)
    lipschitz_samples: int = 4000

    def plant(self) -> Plant:
        return _cached_plant(self.scenario, self.gamma, tuple(self.weights), self.lipschitz_samples)

    def with_controller(self, **changes) -> "Experiment":
        return replace(self, controller=replace(self.controller, **changes))


@functools.lru_cache(maxsize=8)
def _cached_plant(scenario, gamma, weights, n_samples):
    bset = robot.build_barriers(scenario, gamma, n_samples=n_samples)
    return plant_from_scenario(scenario, gamma, weights, barriers=bset)


def _resolve(target) -> tuple[Plant, ControllerConfig | None]:
    if isinstance(target, Experiment):
        return target.plant(), target.controller
    return target, None


def single_run(target, arch, spec: DisturbanceSpec | None = None,
               cfg: ControllerConfig | None = None) -> RunRecord:
    """One closed loop on an experiment or a bare plant with a seeded disturbance."""
    plant, default_cfg = _resolve(target)
    cfg = cfg or default_cfg or ControllerConfig()
    dim = plant.model.input_dim if cfg.disturbance_channel == "torque" else plant.model.state_dim
    W = None
    if spec is not None and spec.clip > 0 and spec.sigma > 0:
        W = disturbance_sequence(spec, dim, plant.sim_steps)
    rec = run(arch, plant, cfg, W)
    rec.metadata["seed"] = None if spec is None else spec.seed
    rec.metadata["clip"] = 0.0 if spec is None else spec.clip
    return rec


# calibration


@dataclass
class Calibration:
    w_bar_l: float
    w_bar_r: float
    eta_min: float
    L_h: float
    L_f: float
    L_g: float
    u_max: float
    delta_u: float = 0.0
    per_step_w_bar_r: list = field(default_factory=list)

    @property
    def L_d(self) -> float:
        return self.L_f + self.L_g * self.u_max

    @property
    def ratio(self) -> float:
        return self.w_bar_l / self.w_bar_r if self.w_bar_r > 0 else float("inf")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["L_d"] = self.L_d
        return d


def operating_region(states: np.ndarray, pad: float = 0.05):
    """Axis-aligned hull of visited states, padded by ``pad`` times the width (at least 1e-3)."""
    lo, hi = states.min(axis=0), states.max(axis=0)
    width = np.maximum(hi - lo, 1e-3)
    return lo - pad * width, hi + pad * width


def estimate_dynamics_constants(plant: Plant, states: np.ndarray, n_samples: int = 2000,
                                seed: int = 0) -> tuple[float, float]:
    """Sampled ``(L_f, L_g)`` over the operating region spanned by ``states``."""
    region = operating_region(np.asarray(states, dtype=float))
    m = plant.model
    L_f = estimate_lipschitz(m.f, region, n_samples, seed, vectorized=m.vectorized)
    L_g = estimate_lipschitz(m.g, region, n_samples, seed + 1, vectorized=m.vectorized)
    return L_f, L_g


def calibrate_tolerances(target, cfg: ControllerConfig | None = None,
                         architectures=(Architecture.LOCAL_CBF, Architecture.REMOTE_MPC_CBF),
                         n_samples: int = 2000) -> Calibration:
    """Tolerances from disturbance-free runs.

    The smallest barrier margin seen along the runs is the ``h`` at which
    both tolerances are evaluated; ``L_f`` and ``L_g`` are sampled over the
    visited states.
    """
    plant, default_cfg = _resolve(target)
    cfg = cfg or default_cfg or ControllerConfig()
    recs = [run(a, plant, cfg) for a in architectures]
    for r in recs:
        if r.aborted or r.safety_violated:
            raise RuntimeError(f"disturbance-free {r.architecture} run is unsafe or aborted; "
                               "the scenario is miscalibrated")
    eta = min(r.min_h for r in recs)
    states = np.vstack([r.states for r in recs])
    L_f, L_g = estimate_dynamics_constants(plant, states, n_samples)
    t = bounds.ToleranceInputs(eta, plant.barriers.gamma, plant.barriers.L_h, L_f, L_g,
                               plant.model.u_max, cfg.tau, cfg.horizon)
    w_l = bounds.local_tolerance(t)
    per_l = [bounds.remote_tolerance(t, l) for l in range(1, cfg.horizon + 1)]
    w_r = min(per_l)
    if not w_r <= w_l:
        raise AssertionError("remote tolerance exceeds local tolerance")
    return Calibration(w_l, w_r, eta, plant.barriers.L_h, L_f, L_g, plant.model.u_max,
                       per_step_w_bar_r=per_l)


def calibrate_input_margin(target, cal: Calibration, cfg: ControllerConfig | None = None,
                           n_runs: int = 2, seed: int = 0, inflate: float = 1.5) -> float:
    """Radius of the reserved correction set.

    The combined loop is run without reservation under disturbances clipped
    at ``w_bar_l``; the largest local correction seen is inflated by
    ``inflate`` and capped below the input bound.
    """
    plant, default_cfg = _resolve(target)
    cfg = cfg or default_cfg or ControllerConfig()
    cfg = replace(cfg, w_bar_l=cal.w_bar_l, w_bar_r=cal.w_bar_r, delta_u=0.0)
    spec = DisturbanceSpec(clip=cal.w_bar_l, seed=seed)
    worst = 0.0
    for r in range(n_runs):
        rec = single_run(plant, Architecture.COMBINED, spec.with_seed(run_seed(seed, r)), cfg)
        if rec.n_steps:
            worst = max(worst, float(np.max(np.linalg.norm(rec.u_applied - rec.u_remote, axis=1))))
    return min(inflate * worst, 0.5 * plant.model.input_set.radius)


def calibrate(target, cfg: ControllerConfig | None = None, margin_runs: int = 2) -> tuple[Calibration, ControllerConfig]:
    """Tolerances plus input reservation, and the controller config that uses them."""
    plant, default_cfg = _resolve(target)
    cfg = cfg or default_cfg or ControllerConfig()
    cal = calibrate_tolerances(plant, cfg)
    cal.delta_u = calibrate_input_margin(plant, cal, cfg, margin_runs) if margin_runs > 0 else 0.0
    return cal, replace(cfg, w_bar_l=cal.w_bar_l, w_bar_r=cal.w_bar_r, delta_u=cal.delta_u)


# batches


@dataclass
class ArchitectureSummary:
    architecture: str
    safe_rate: float
    reach_rate: float
    success_rate: float
    avg_reach_time_s: float
    peak_jerk_mean: float
    peak_jerk_max: float
    n_runs: int
    seed: int
    n_aborted: int = 0
    violation_steps: list = field(default_factory=list)


@dataclass
class BatchReport:
    summaries: list
    clearance: dict  # architecture -> array (steps, n_obs, 3) of mean/min/max
    records: dict = field(default_factory=dict)  # architecture -> list of RunRecord
    spec: DisturbanceSpec | None = None

    def summary(self, arch) -> ArchitectureSummary:
        name = Architecture.parse(arch).value
        for s in self.summaries:
            if s.architecture == name:
                return s
        raise KeyError(name)


def summarize(arch: str, recs: list, seed: int) -> ArchitectureSummary:
    n = len(recs)
    safe = [not r.safety_violated and not r.aborted for r in recs]
    reached = [r.reached_all and not r.aborted for r in recs]
    times = [r.reach_time for r, s, ok in zip(recs, safe, reached) if s and ok]
    jerks = [r.peak_jerk for r in recs]
    return ArchitectureSummary(
        architecture=arch,
        safe_rate=sum(safe) / n,
        reach_rate=sum(reached) / n,
        success_rate=sum(s and ok for s, ok in zip(safe, reached)) / n,
        avg_reach_time_s=float(np.mean(times)) if times else float("nan"),
        peak_jerk_mean=float(np.mean(jerks)),
        peak_jerk_max=float(np.max(jerks)),
        n_runs=n,
        seed=seed,
        n_aborted=sum(r.aborted for r in recs),
        violation_steps=[r.violation_step for r in recs],
    )


def clearance_envelope(distances: list) -> np.ndarray:
    """Per-step mean, min and max over the runs still active at that step.

    ``distances`` holds one ``(steps_r, n_obs)`` array per run; the result
    has shape ``(max_steps, n_obs, 3)``.
    """
    T = max(len(d) for d in distances)
    n_obs = distances[0].shape[1]
    stack = np.full((len(distances), T, n_obs), np.nan)
    for i, d in enumerate(distances):
        stack[i, :len(d)] = d
    return np.stack([np.nanmean(stack, 0), np.nanmin(stack, 0), np.nanmax(stack, 0)], axis=-1)


def worker_count(default: int | None = None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be >= 1")
        return n
    return default or os.cpu_count() or 1


def _job(args):
    target, arch, spec, cfg = args
    return single_run(target, arch, spec, cfg)


def run_batch(target, architectures, spec: DisturbanceSpec, n_runs: int,
              cfg: ControllerConfig | None = None, workers: int | None = None,
              keep_records: bool = True) -> BatchReport:
    """``n_runs`` paired runs per architecture.

    Run ``r`` of every architecture sees the disturbance stream seeded by
    ``run_seed(spec.seed, r)``. Results are merged by run index, so the
    report does not depend on the number of workers.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    archs = [Architecture.parse(a) for a in architectures]
    jobs = [(target, a, spec.with_seed(run_seed(spec.seed, r)), cfg) for a in archs for r in range(n_runs)]
    workers = worker_count(workers)
    if workers > 1 and isinstance(target, Experiment):
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    summaries, clearance, records = [], {}, {}
    for i, a in enumerate(archs):
        recs = results[i * n_runs:(i + 1) * n_runs]
        summaries.append(summarize(a.value, recs, spec.seed))
        if isinstance(target, Experiment):
            sc = target.scenario
            clearance[a.value] = clearance_envelope([sc.obstacle_distances(r.states) for r in recs])
        if keep_records:
            records[a.value] = recs
    return BatchReport(summaries, clearance, records, spec)
