"""Closed-loop simulation of plant, delayed channel, predictor, remote MPC and local filter.

The round-trip delay is modeled on the measurement side: at step ``k`` the
remote side receives ``x_{k-tau}``, predicts ``x_hat_k`` through the inputs
it sent for steps ``k-tau .. k-1`` and its first planned input is applied
at step ``k``. Before the first measurement arrives the plant applies a
standby input (zero torque).
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import safety
from .barrier import BarrierSet
from .dynamics import InputBuffer, InputSet, SystemModel, nominal_step, predict, step
from .mpc import MPC_CBF, NOMINAL, ROBUST, MPCConfig, RecedingHorizon, RobustSpec
from .qp import Status

# floating-point slack when deciding whether a state left the safe set
SAFETY_TOL = 1e-9


class Architecture(str, enum.Enum):
    NOMINAL_MPC = "nominal_mpc"
    LOCAL_CBF = "local_cbf"
    REMOTE_MPC_CBF = "mpc_cbf"
    ROBUST_LOCAL_CBF = "robust_local_cbf"
    COMBINED = "combined"

    @classmethod
    def parse(cls, name) -> "Architecture":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"nominal": cls.NOMINAL_MPC, "local": cls.LOCAL_CBF, "remote": cls.REMOTE_MPC_CBF,
                   "remote_mpc_cbf": cls.REMOTE_MPC_CBF, "robust_local": cls.ROBUST_LOCAL_CBF}
        if key in aliases:
            return aliases[key]
        return cls(key)

    @property
    def remote_variant(self) -> str:
        return {self.REMOTE_MPC_CBF: MPC_CBF, self.COMBINED: ROBUST}.get(self, NOMINAL)

    @property
    def local_stage(self) -> str | None:
        return {self.LOCAL_CBF: "plain", self.ROBUST_LOCAL_CBF: "robust",
                self.COMBINED: "robust"}.get(self)

    @property
    def replays_filter(self) -> bool:
        return self is Architecture.COMBINED

    @property
    def label(self) -> str:
        return {self.NOMINAL_MPC: "Nominal MPC", self.LOCAL_CBF: "Local CBF",
                self.REMOTE_MPC_CBF: "MPC-CBF", self.ROBUST_LOCAL_CBF: "Robust local CBF",
                self.COMBINED: "Combined"}[self]


@dataclass
class ChannelState:
    """Constant-latency measurement line plus the remote side's sent-input buffer."""

    tau: int
    measurement_line: deque = field(default_factory=deque)
    input_line: InputBuffer = None

    def __post_init__(self):
        if self.input_line is None:
            self.input_line = InputBuffer(self.tau)

    def send(self, k: int, x) -> None:
        self.measurement_line.append((k, np.array(x, dtype=float)))

    def receive(self, k: int):
        """The measurement taken at ``k - tau``, or ``None`` during warm-up."""
        if not self.measurement_line or self.measurement_line[0][0] != k - self.tau:
            return None
        return self.measurement_line.popleft()[1]


@dataclass
class Plant:
    """Everything the loop needs about the controlled system, independent of the robot."""

    model: SystemModel
    barriers: BarrierSet
    x0: np.ndarray
    stage_residual_for: callable  # waypoint index -> stage residual
    n_targets: int = 1
    target_reached: callable = None  # (index, x) -> bool
    T_s: float = 1.0
    sim_steps: int = 100
    state_box: tuple | None = None
    disturbance_dim: int | None = None


@dataclass
class ControllerConfig:
    tau: int = 7
    horizon: int = 5
    slack_weight: float = 1e3
    state_penalty: float = 1e3
    w_bar_l: float | None = None
    w_bar_r: float | None = None
    delta_u: float = 0.0
    disturbance_channel: str = "torque"
    standby_input: float = 0.0
    stop_when_done: bool = True
    sqp_max_iter: int | None = None

    def __post_init__(self):
        if self.tau < 0 or self.horizon < 1:
            raise ValueError("need tau >= 0 and horizon >= 1")
        if self.disturbance_channel not in ("state", "torque"):
            raise ValueError("disturbance channel must be 'state' or 'torque'")


@dataclass
class RunRecord:
    architecture: str
    states: np.ndarray
    u_applied: np.ndarray
    u_remote: np.ndarray
    disturbances: np.ndarray
    h: np.ndarray
    intervened: np.ndarray
    remote_status: list
    filter_status: list
    slack_sum: np.ndarray
    prediction_error: np.ndarray
    reach_steps: list
    T_s: float
    tau: int
    n_targets: int
    aborted: bool = False
    diagnostic: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.u_applied)

    @property
    def min_h(self) -> float:
        return float(np.min(self.h))

    @property
    def safety_violated(self) -> bool:
        return bool(self.min_h < -SAFETY_TOL)

    @property
    def violation_step(self) -> int | None:
        bad = np.flatnonzero(self.h < -SAFETY_TOL)
        return int(bad[0]) if bad.size else None

    @property
    def reached_all(self) -> bool:
        return len(self.reach_steps) == self.n_targets

    @property
    def reach_time(self) -> float | None:
        return self.reach_steps[-1] * self.T_s if self.reached_all else None

    @property
    def peak_jerk(self) -> float:
        """``max_k ||(u_{k+1} - u_k) / T_s||_inf`` once the remote side is running."""
        U = self.u_applied[self.tau:]
        if len(U) < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(U, axis=0))) / self.T_s)


def build_filter_config(plant: Plant, cfg: ControllerConfig, robust: bool) -> safety.FilterConfig:
    w_l = cfg.w_bar_l if robust else None
    return safety.FilterConfig(plant.barriers, plant.model, input_set=plant.model.input_set, w_bar_l=w_l)


def build_mpc_config(plant: Plant, cfg: ControllerConfig, arch: Architecture, target: int) -> MPCConfig:
    robust = None
    iset = plant.model.input_set
    if arch.remote_variant == ROBUST:
        if cfg.w_bar_l is None or cfg.w_bar_r is None:
            raise ValueError("the combined architecture needs calibrated w_bar_l and w_bar_r")
        robust = RobustSpec(cfg.w_bar_r, cfg.w_bar_l, cfg.slack_weight)
        if cfg.delta_u > 0:
            iset = iset.tighten(cfg.delta_u)
    mcfg = MPCConfig(plant.model, cfg.horizon, plant.stage_residual_for(target),
                     state_box=plant.state_box, state_penalty=cfg.state_penalty, input_set=iset,
                     barriers=plant.barriers if arch.remote_variant != NOMINAL else None,
                     robust=robust)
    if cfg.sqp_max_iter is not None:
        mcfg = replace(mcfg, sqp=replace(mcfg.sqp, max_iter=cfg.sqp_max_iter))
    return mcfg


def architecture_stage(arch: Architecture, x_k, u_remote, filter_cfg: safety.FilterConfig | None):
    """Plant-side input for the given architecture, with the filter result if any."""
    stage = Architecture.parse(arch).local_stage
    if stage is None:
        return np.asarray(u_remote, dtype=float), None
    fn = safety.robust_filter if stage == "robust" else safety.filter
    res = fn(filter_cfg, x_k, u_remote)
    return res.u_applied, res


def run(architecture, plant: Plant, cfg: ControllerConfig, disturbance=None,
        record_predictions: bool = True) -> RunRecord:
    """Simulate one closed loop.

    ``disturbance`` is ``None`` (no disturbance), an array with one row per
    step, or a callable ``k -> w``. Rows live in the state space, or in the
    input space when ``cfg.disturbance_channel == 'torque'``.
    """
    arch = Architecture.parse(architecture)
    model = plant.model
    n, m = model.state_dim, model.input_dim
    K = plant.sim_steps
    x = np.array(plant.x0, dtype=float)
    h_x = float(np.min(plant.barriers.values(x)))
    if h_x <= 0:
        raise ValueError("initial state must lie strictly inside the safe set")
    wdim = m if cfg.disturbance_channel == "torque" else n
    if disturbance is None:
        W = np.zeros((K, wdim))
        wfun = None
    elif callable(disturbance):
        W, wfun = None, disturbance
    else:
        W = np.asarray(disturbance, dtype=float)
        wfun = None
        if W.shape[0] < K or W.shape[1] != wdim:
            raise ValueError(f"disturbance must have shape (>= {K}, {wdim})")

    fcfg = build_filter_config(plant, cfg, arch.local_stage == "robust") if arch.local_stage else None
    target = 0
    mpc = RecedingHorizon(build_mpc_config(plant, cfg, arch, target), arch.remote_variant)
    chan = ChannelState(cfg.tau)
    standby = np.full(m, cfg.standby_input)
    for _ in range(cfg.tau):
        chan.input_line.push(standby)
    correction = None
    if arch.replays_filter:
        def correction(xx, uu):
            return architecture_stage(arch, xx, uu, fcfg)[0]

    X = [x.copy()]
    Ua, Ur, Wl, H = [], [], [], [h_x]
    interv, rstat, fstat, slack, perr = [], [], [], [], []
    reach_steps: list[int] = []
    if plant.target_reached(0, x):
        while target < plant.n_targets and plant.target_reached(target, x):
            reach_steps.append(0)
            target += 1
    remote_target = 0
    aborted, diag = False, ""
    for k in range(K):
        if cfg.stop_when_done and len(reach_steps) == plant.n_targets:
            break
        chan.send(k, x)
        x_delayed = chan.receive(k) if cfg.tau > 0 else chan.measurement_line.pop()[1]
        try:
            if x_delayed is None:
                u_rem = standby.copy()
                rstat.append("standby")
                slack.append(0.0)
                perr.append(np.nan)
            else:
                while remote_target < plant.n_targets - 1 and plant.target_reached(remote_target, x_delayed):
                    remote_target += 1
                    mpc.set_config(build_mpc_config(plant, cfg, arch, remote_target))
                x_hat = predict(model, x_delayed, chan.input_line.entries, correction)
                sol = mpc(x_hat)
                u_rem = sol.first_input.copy()
                rstat.append(sol.status.value)
                slack.append(float(np.sum(sol.slacks)) if sol.slacks is not None else 0.0)
                perr.append(float(np.linalg.norm(x - x_hat)) if record_predictions else np.nan)
            chan.input_line.push(u_rem)
            u_app, fres = architecture_stage(arch, x, u_rem, fcfg)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            aborted, diag = True, f"step {k}: {type(exc).__name__}: {exc}"
            break
        interv.append(bool(fres.intervened) if fres is not None else False)
        fstat.append(fres.status.value if fres is not None else "")
        w = wfun(k) if wfun is not None else W[k]
        w = np.asarray(w, dtype=float)
        w_state = model.g(x) @ w if cfg.disturbance_channel == "torque" else w
        x = step(model, x, u_app, w_state)
        if not np.all(np.isfinite(x)):
            aborted, diag = True, f"step {k}: non-finite state"
            Ua.append(u_app); Ur.append(u_rem); Wl.append(w)
            break
        Ua.append(u_app)
        Ur.append(u_rem)
        Wl.append(w)
        X.append(x.copy())
        H.append(float(np.min(plant.barriers.values(x))))
        while target < plant.n_targets and plant.target_reached(target, x):
            reach_steps.append(k + 1)
            target += 1
    return RunRecord(
        architecture=arch.value,
        states=np.array(X),
        u_applied=np.array(Ua).reshape(-1, m),
        u_remote=np.array(Ur).reshape(-1, m),
        disturbances=np.array(Wl).reshape(-1, wdim),
        h=np.array(H),
        intervened=np.array(interv, dtype=bool),
        remote_status=rstat,
        filter_status=fstat,
        slack_sum=np.array(slack),
        prediction_error=np.array(perr),
        reach_steps=reach_steps,
        T_s=plant.T_s,
        tau=cfg.tau,
        n_targets=plant.n_targets,
        aborted=aborted,
        diagnostic=diag,
        metadata={"disturbance_channel": cfg.disturbance_channel,
                  "shared_filter_config": arch.replays_filter},
    )


def plant_from_scenario(scenario, gamma: float, weights=(100.0, 0.1, 0.01), barriers: BarrierSet | None = None,
                        L_f: float = 0.0, L_g: float = 0.0) -> Plant:
    """Wrap a robot scenario so :func:`run` can drive it."""
    from . import robot

    model = scenario.arm.system_model(scenario.input_limit, L_f, L_g)
    if barriers is None:
        barriers = robot.build_barriers(scenario, gamma)
    wps = [np.asarray(w, dtype=float) for w in scenario.waypoints]
    v = scenario.joint_vel_limit
    box = (np.r_[np.full(3, -np.inf), np.full(3, -v)], np.r_[np.full(3, np.inf), np.full(3, v)])

    def reached(i, x):
        ee = scenario.arm.end_effector(np.asarray(x)[:3])
        return bool(np.linalg.norm(ee - wps[i]) < scenario.reach_threshold)

    return Plant(model, barriers, scenario.x0,
                 lambda i: robot.stage_residual_fn(scenario, wps[i], *weights),
                 n_targets=len(wps), target_reached=reached, T_s=scenario.arm.T_s,
                 sim_steps=scenario.sim_horizon_steps, state_box=box)
