"""TOML scenario files: parsing with strict key checking, serialization and object builders.

Layout::

    [arm]          link_lengths, link_masses, T_s, damping, input_limit,
                   joint_vel_limit, q0, samples_per_link, epsilon, reach_threshold
    [obstacles]    centers, radii
    [waypoints]    points
    [network]      tau
    [mpc]          N, weights, gamma, rho, state_penalty, sqp_max_iter,
                   w_bar_l, w_bar_r, delta_u   (the last three optional, pinned calibration)
    [disturbance]  mode, clip, sigma, seed, channel
    [run]          n_runs, architectures, sim_steps, lipschitz_samples

Lengths in metres, torques in N m, time in seconds, angles in radians.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import tomli
import tomli_w

from . import robot
from .loop import Architecture, ControllerConfig
from .montecarlo import CBF_ARCHITECTURES, CLIP_LEVELS, DisturbanceSpec, Experiment


class ConfigError(ValueError):
    """Malformed scenario file; ``line`` is 1-based when it can be located."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class ArmSection:
    link_lengths: tuple = (0.4, 0.3, 0.2)
    link_masses: tuple = (1.0, 0.8, 0.5)
    T_s: float = 0.005
    damping: float = 0.05
    input_limit: float = 5.0
    joint_vel_limit: float = 5.0
    q0: tuple = (0.0, 0.0, 0.0)
    samples_per_link: int = 3
    epsilon: float = 0.005
    reach_threshold: float = 0.035


@dataclass(frozen=True)
class ObstacleSection:
    centers: tuple = ()
    radii: tuple = ()


@dataclass(frozen=True)
class WaypointSection:
    points: tuple = ()


@dataclass(frozen=True)
class NetworkSection:
    tau: int = 7


@dataclass(frozen=True)
class MPCSection:
    N: int = 5
    weights: tuple = (200.0, 0.3, 0.05)
    gamma: float = 0.5
    rho: float = 1e3
    state_penalty: float = 1e3
    sqp_max_iter: int | None = None
    w_bar_l: float | None = None
    w_bar_r: float | None = None
    delta_u: float | None = None


@dataclass(frozen=True)
class DisturbanceSection:
    mode: str = "low"
    clip: float = CLIP_LEVELS["low"]
    sigma: float | None = None
    seed: int = 0
    channel: str = "torque"


@dataclass(frozen=True)
class RunSection:
    n_runs: int = 20
    architectures: tuple = tuple(a.value for a in CBF_ARCHITECTURES)
    sim_steps: int = 2500
    lipschitz_samples: int = 4000


_SECTIONS = {
    "arm": ArmSection,
    "obstacles": ObstacleSection,
    "waypoints": WaypointSection,
    "network": NetworkSection,
    "mpc": MPCSection,
    "disturbance": DisturbanceSection,
    "run": RunSection,
}
_REQUIRED = ("arm", "obstacles", "waypoints")


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(e) for e in v)
    return v


def _thaw(v):
    if isinstance(v, tuple):
        return [_thaw(e) for e in v]
    return v


@dataclass(frozen=True)
class ScenarioConfig:
    arm: ArmSection = field(default_factory=ArmSection)
    obstacles: ObstacleSection = field(default_factory=ObstacleSection)
    waypoints: WaypointSection = field(default_factory=WaypointSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    mpc: MPCSection = field(default_factory=MPCSection)
    disturbance: DisturbanceSection = field(default_factory=DisturbanceSection)
    run: RunSection = field(default_factory=RunSection)

    # builders

    def scenario(self) -> robot.Scenario:
        a = self.arm
        arm = robot.ArmModel(a.link_lengths, a.link_masses, a.T_s, a.damping)
        obs = [robot.Obstacle(c, r) for c, r in zip(self.obstacles.centers, self.obstacles.radii)]
        return robot.Scenario(arm, obs, self.waypoints.points, q0=a.q0,
                              reach_threshold=a.reach_threshold, epsilon=a.epsilon,
                              samples_per_link=a.samples_per_link,
                              sim_horizon_steps=self.run.sim_steps,
                              joint_vel_limit=a.joint_vel_limit, input_limit=a.input_limit)

    def controller(self) -> ControllerConfig:
        m = self.mpc
        return ControllerConfig(tau=self.network.tau, horizon=m.N, slack_weight=m.rho,
                                state_penalty=m.state_penalty, w_bar_l=m.w_bar_l, w_bar_r=m.w_bar_r,
                                delta_u=m.delta_u or 0.0, disturbance_channel=self.disturbance.channel,
                                sqp_max_iter=m.sqp_max_iter)

    def experiment(self) -> Experiment:
        return Experiment(self.scenario(), self.mpc.gamma, tuple(self.mpc.weights), self.controller(),
                          self.run.lipschitz_samples)

    def disturbance_spec(self, seed: int | None = None) -> DisturbanceSpec:
        d = self.disturbance
        return DisturbanceSpec(clip=d.clip, sigma=d.sigma, mode=d.mode,
                               seed=d.seed if seed is None else seed)

    @property
    def architectures(self) -> list[Architecture]:
        return [Architecture.parse(a) for a in self.run.architectures]

    @property
    def pinned_calibration(self) -> bool:
        return self.mpc.w_bar_l is not None and self.mpc.w_bar_r is not None

    def with_calibration(self, w_bar_l: float, w_bar_r: float, delta_u: float) -> "ScenarioConfig":
        return replace(self, mpc=replace(self.mpc, w_bar_l=float(w_bar_l), w_bar_r=float(w_bar_r),
                                         delta_u=float(delta_u)))

    def with_disturbance(self, **changes) -> "ScenarioConfig":
        return replace(self, disturbance=replace(self.disturbance, **changes))

    # serialization

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = {k: _thaw(v) for k, v in asdict(getattr(self, name)).items() if v is not None}
            out[name] = sec
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    lines = text.splitlines()
    head = re.compile(r"^\s*\[\s*" + re.escape(section) + r"\s*\]")
    start = next((i for i, ln in enumerate(lines) if head.match(ln)), None)
    if start is None or key is None:
        return None if start is None else start + 1
    pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i in range(start + 1, len(lines)):
        if re.match(r"^\s*\[", lines[i]):
            break
        if pat.match(lines[i]):
            return i + 1
    return start + 1


def _section(cls, name: str, raw, text: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table", _line_of(text, name))
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]", _line_of(text, name, key))
    kw = {}
    for key, val in raw.items():
        default = known[key].default
        val = _freeze(val)
        if isinstance(default, float) and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if isinstance(default, tuple) and not isinstance(val, tuple):
            raise ConfigError(f"[{name}] {key} must be an array", _line_of(text, name, key))
        kw[key] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}", _line_of(text, name)) from None


def _to_floats(v, depth):
    if depth == 0:
        return float(v)
    return tuple(_to_floats(e, depth - 1) for e in v)


def _validate(cfg: ScenarioConfig, text: str) -> ScenarioConfig:
    def bad(msg, sec, key=None):
        raise ConfigError(f"[{sec}] {msg}", _line_of(text, sec, key))

    a, o, w = cfg.arm, cfg.obstacles, cfg.waypoints
    try:
        arm = replace(a, link_lengths=_to_floats(a.link_lengths, 1), link_masses=_to_floats(a.link_masses, 1),
                      q0=_to_floats(a.q0, 1))
        obs = replace(o, centers=_to_floats(o.centers, 2), radii=_to_floats(o.radii, 1))
        wps = replace(w, points=_to_floats(w.points, 2))
        mpc = replace(cfg.mpc, weights=_to_floats(cfg.mpc.weights, 1))
    except (TypeError, ValueError):
        bad("expected numeric arrays", "arm")
    if len(arm.q0) != 3:
        bad("q0 needs three joint angles", "arm", "q0")
    if len(obs.centers) != len(obs.radii) or not obs.centers:
        bad("centers and radii must be nonempty and of equal length", "obstacles")
    if not wps.points:
        bad("need at least one waypoint", "waypoints", "points")
    if cfg.network.tau < 0:
        bad("tau must be nonnegative", "network", "tau")
    if mpc.N < 1:
        bad("N must be positive", "mpc", "N")
    if len(mpc.weights) != 3:
        bad("weights are (position, velocity, input)", "mpc", "weights")
    if not 0 < mpc.gamma <= 1:
        bad("gamma must lie in (0, 1]", "mpc", "gamma")
    d = cfg.disturbance
    if d.mode not in ("low", "high", "custom"):
        bad(f"unknown disturbance mode {d.mode!r}", "disturbance", "mode")
    if d.channel not in ("state", "torque"):
        bad(f"unknown disturbance channel {d.channel!r}", "disturbance", "channel")
    if d.clip < 0:
        bad("clip must be nonnegative", "disturbance", "clip")
    if cfg.run.n_runs < 1:
        bad("n_runs must be positive", "run", "n_runs")
    for name in cfg.run.architectures:
        try:
            Architecture.parse(name)
        except ValueError:
            bad(f"unknown architecture {name!r}", "run", "architectures")
    for c, r in zip(obs.centers, obs.radii):
        try:
            robot.Obstacle(c, r)
        except ValueError as exc:
            bad(str(exc), "obstacles")
    out = replace(cfg, arm=arm, obstacles=obs, waypoints=wps, mpc=mpc,
                  run=replace(cfg.run, architectures=tuple(cfg.run.architectures)))
    try:
        out.scenario()
    except ValueError as exc:
        bad(str(exc), "arm")
    return out


def loads(text: str) -> ScenarioConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", int(m.group(1)) if m else None) from None
    for name in raw:
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]", _line_of(text, name))
    for name in _REQUIRED:
        if name not in raw:
            raise ConfigError(f"missing section [{name}]")
    parts = {name: _section(cls, name, raw.get(name, {}), text) for name, cls in _SECTIONS.items()}
    return _validate(ScenarioConfig(**parts), text)


def load(path) -> ScenarioConfig:
    return loads(Path(path).read_text())


BUNDLED = ("default", "high")


def bundled_path(name: str = "default") -> Path:
    if name not in BUNDLED:
        raise ValueError(f"no bundled scenario {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("netcbf") / "scenarios" / f"{name}.toml"))


def bundled(name: str = "default") -> ScenarioConfig:
    return load(bundled_path(name))
