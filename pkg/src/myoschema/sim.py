"""Deterministic 1-DOF tendon-driven elbow with series-elastic muscles.

Each muscle is a winch paying out wire over an angle-dependent moment arm
into a nonlinear (stiffening, exponential) elastic element. Wire friction
is a directional efficiency: the tension seen at the joint (and by the
loadcell) differs between stretching and recoiling, which produces the
tension hysteresis a real tendon drive shows. Muscles run the stiffness
law f_ref = f_bias + k_stiff (l - l_ref) on top of a proportional
winch-velocity tension tracker. Integration is semi-implicit Euler with
inelastic joint stops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mae import SensorSample

__all__ = [
    "SimulationFault",
    "MuscleSpec",
    "JointParams",
    "PlantConfig",
    "PlantState",
    "MuscleCommand",
    "SettleResult",
    "TrajectoryRecorder",
    "Plant",
    "default_plant",
    "save_plant_config",
    "load_plant_config",
]

MAX_DT = 5e-3
TENSION_CAP = 5000.0  # numerical guard, far above any commanded tension
DIR_DEADBAND = 1e-6  # m/s of stretch rate below which friction keeps its sign

SETTLE_OMEGA = 1e-3  # rad/s
SETTLE_FDOT = 0.5  # N/s
SETTLE_HOLD = 0.2  # s


class SimulationFault(RuntimeError):
    pass


@dataclass
class MuscleSpec:
    """One tendon: geometry, elasticity, friction and actuator limits.

    Moment arm r(theta) = arm_const + arm_cos * cos(theta + arm_phase).
    Elastic element f = elastic_gain * (exp(elastic_rate * stretch) - 1)
    for positive stretch, slack otherwise.
    """

    name: str
    side: str  # "flexor" (+ torque) | "extensor" (- torque)
    arm_const: float  # m
    arm_cos: float  # m
    arm_phase: float  # rad
    slack_length: float  # m, tendon path length at theta = 0
    elastic_gain: float = 15.0  # N
    elastic_rate: float = 150.0  # 1/m
    friction_eta: float = 0.92
    max_winch_speed: float = 0.2  # m/s
    tension_gain: float = 0.002  # m/(s N)

    @property
    def sign(self) -> float:
        return 1.0 if self.side == "flexor" else -1.0

    def validate(self, theta_min: float, theta_max: float) -> None:
        if self.side not in ("flexor", "extensor"):
            raise ValueError(f"{self.name}: side must be flexor or extensor")
        if not 0.0 < self.friction_eta <= 1.0:
            raise ValueError(f"{self.name}: friction_eta must be in (0, 1]")
        if self.elastic_gain <= 0 or self.elastic_rate <= 0:
            raise ValueError(f"{self.name}: elastic parameters must be positive")
        if self.max_winch_speed <= 0 or self.tension_gain <= 0:
            raise ValueError(f"{self.name}: actuator parameters must be positive")
        grid = np.linspace(theta_min, theta_max, 121)
        arms = self.arm_const + self.arm_cos * np.cos(grid + self.arm_phase)
        if np.min(arms) <= 0:
            raise ValueError(f"{self.name}: moment arm not positive over joint range")


@dataclass
class JointParams:
    inertia: float = 0.05  # kg m^2
    load_mass: float = 1.0  # kg
    load_arm: float = 0.15  # m
    viscous: float = 0.5  # N m s
    gravity: float = 9.81  # m/s^2
    gravity_phase: float = 0.0  # rad; torque peaks at 90 deg flexion
    theta_min: float = 0.0
    theta_max: float = math.radians(120.0)
    dt: float = 1e-3  # s

    def validate(self) -> None:
        if self.inertia <= 0 or self.viscous < 0 or self.dt <= 0 or self.dt > MAX_DT:
            raise ValueError("bad joint parameters")
        if self.theta_max <= self.theta_min:
            raise ValueError("empty joint range")


@dataclass
class PlantConfig:
    joint: JointParams
    muscles: list[MuscleSpec]

    def validate(self) -> None:
        self.joint.validate()
        if not self.muscles:
            raise ValueError("plant needs at least one muscle")
        for m in self.muscles:
            m.validate(self.joint.theta_min, self.joint.theta_max)


@dataclass
class PlantState:
    theta: float
    theta_dot: float
    winch: np.ndarray  # paid-out wire length per muscle = measured length [m]
    winch_vel: np.ndarray  # m/s, previous commanded winch velocity
    fric_dir: np.ndarray  # +-1, last stretch-rate sign per muscle
    path_cache: np.ndarray  # tendon path lengths c_i(theta) [m]
    time: float = 0.0

    def clone(self) -> "PlantState":
        return PlantState(
            self.theta, self.theta_dot, self.winch.copy(), self.winch_vel.copy(),
            self.fric_dir.copy(), self.path_cache.copy(), self.time,
        )


@dataclass
class MuscleCommand:
    l_ref: float  # m
    f_bias: float  # N
    k_stiff: float  # N/m

    def __post_init__(self):
        if self.f_bias < 0 or self.k_stiff < 0:
            raise ValueError("f_bias and k_stiff must be non-negative")


@dataclass
class SettleResult:
    state: PlantState
    sample: SensorSample
    converged: bool
    elapsed: float


class TrajectoryRecorder:
    """Per-step log (t, theta, f, l, f_ref), dumpable as CSV."""

    def __init__(self, n_muscles: int):
        self.n_muscles = n_muscles
        self.rows: list[tuple] = []

    def add(self, t, theta, f, l, f_ref):
        self.rows.append((t, theta, tuple(f), tuple(l), tuple(f_ref)))

    def write_csv(self, path) -> None:
        m = self.n_muscles
        with open(path, "w") as out:
            cols = (
                ["t", "theta"]
                + [f"f_{i}" for i in range(m)]
                + [f"l_{i}" for i in range(m)]
                + [f"f_ref_{i}" for i in range(m)]
            )
            out.write(",".join(cols) + "\n")
            for t, theta, f, l, fr in self.rows:
                vals = [t, theta, *f, *l, *fr]
                out.write(",".join(f"{v:.9g}" for v in vals) + "\n")


class Plant:
    """Owns a PlantConfig; all stepping is deterministic and pure."""

    def __init__(self, config: PlantConfig):
        config.validate()
        self.config = config

    @property
    def n_muscles(self) -> int:
        return len(self.config.muscles)

    @property
    def flexor_indices(self) -> list[int]:
        return [i for i, m in enumerate(self.config.muscles) if m.side == "flexor"]

    def moment_arm(self, i: int, theta: float) -> float:
        m = self.config.muscles[i]
        return m.arm_const + m.arm_cos * math.cos(theta + m.arm_phase)

    def path_length(self, i: int, theta: float) -> float:
        """c(theta) = c0 - sign * integral of r; flexors shorten with flexion."""
        m = self.config.muscles[i]
        theta = min(max(theta, self.config.joint.theta_min), self.config.joint.theta_max)
        integral = m.arm_const * theta + m.arm_cos * (
            math.sin(theta + m.arm_phase) - math.sin(m.arm_phase)
        )
        return m.slack_length - m.sign * integral

    def elastic_tension(self, i: int, stretch: float) -> float:
        m = self.config.muscles[i]
        if stretch <= 0.0:
            return 0.0
        f = m.elastic_gain * (math.exp(min(m.elastic_rate * stretch, 30.0)) - 1.0)
        return min(f, TENSION_CAP)

    def initial_state(self, theta: float | None = None, pretension: float = 5.0) -> PlantState:
        """At-rest state with every muscle wound to the given pretension."""
        j = self.config.joint
        theta = j.theta_min if theta is None else float(theta)
        m = self.n_muscles
        winch = np.empty(m)
        cache = np.empty(m)
        for i, spec in enumerate(self.config.muscles):
            stretch = math.log(pretension / spec.elastic_gain + 1.0) / spec.elastic_rate
            cache[i] = self.path_length(i, theta)
            winch[i] = cache[i] - stretch
        return PlantState(
            theta, 0.0, winch, np.zeros(m), np.ones(m), cache, 0.0
        )

    # -- core dynamics ------------------------------------------------------

    def _unpack(self, state: PlantState):
        return (
            state.theta, state.theta_dot, list(state.winch), list(state.winch_vel),
            list(state.fric_dir), state.time,
        )

    def _step_scalar(self, th, om, p, pv, fdir, t, commands, dt, meas_f=None, meas_fr=None):
        """One integration step on plain scalars/lists (hot path)."""
        cfg = self.config
        j = cfg.joint
        torque = -j.load_mass * j.gravity * j.load_arm * math.sin(th + j.gravity_phase)
        torque -= j.viscous * om
        for i, (spec, cmd) in enumerate(zip(cfg.muscles, commands)):
            s = spec.sign
            arm = spec.arm_const + spec.arm_cos * math.cos(th + spec.arm_phase)
            c = spec.slack_length - s * (
                spec.arm_const * th
                + spec.arm_cos * (math.sin(th + spec.arm_phase) - math.sin(spec.arm_phase))
            )
            stretch = c - p[i]
            if stretch <= 0.0:
                f_raw = 0.0
            else:
                f_raw = spec.elastic_gain * (
                    math.exp(min(spec.elastic_rate * stretch, 30.0)) - 1.0
                )
                if f_raw > TENSION_CAP:
                    f_raw = TENSION_CAP
            d_stretch = -s * arm * om - pv[i]
            if d_stretch > DIR_DEADBAND:
                fdir[i] = 1.0
            elif d_stretch < -DIR_DEADBAND:
                fdir[i] = -1.0
            f = f_raw / spec.friction_eta if fdir[i] > 0 else f_raw * spec.friction_eta
            f_ref = cmd.f_bias + cmd.k_stiff * (p[i] - cmd.l_ref)
            if f_ref < 0.0:
                f_ref = 0.0
            v = spec.tension_gain * (f - f_ref)
            if v > spec.max_winch_speed:
                v = spec.max_winch_speed
            elif v < -spec.max_winch_speed:
                v = -spec.max_winch_speed
            pv[i] = v
            p[i] += dt * v
            torque += s * arm * f
            if meas_f is not None:
                meas_f[i] = f
                meas_fr[i] = f_ref
        om += dt * torque / j.inertia
        th += dt * om
        if th < j.theta_min:
            th = j.theta_min
            if om < 0.0:
                om = 0.0
        elif th > j.theta_max:
            th = j.theta_max
            if om > 0.0:
                om = 0.0
        return th, om, t + dt

    def measure(self, state: PlantState, commands) -> SensorSample:
        """Sensor readout (theta, delivered tensions, winch lengths)."""
        f = np.empty(self.n_muscles)
        for i, spec in enumerate(self.config.muscles):
            f_raw = self.elastic_tension(i, state.path_cache[i] - state.winch[i])
            f[i] = f_raw / spec.friction_eta if state.fric_dir[i] > 0 else f_raw * spec.friction_eta
        return SensorSample(np.array([state.theta]), f, state.winch.copy())

    def step(self, state: PlantState, commands, dt: float | None = None) -> PlantState:
        """Advance one step; returns a new state, inputs untouched."""
        dt = self.config.joint.dt if dt is None else float(dt)
        if not 0.0 < dt <= MAX_DT:
            raise ValueError(f"dt must be in (0, {MAX_DT}], got {dt}")
        commands = self._check_commands(commands)
        th, om, p, pv, fdir, t = self._unpack(state)
        th, om, t = self._step_scalar(th, om, p, pv, fdir, t, commands, dt)
        if not (math.isfinite(th) and math.isfinite(om) and all(map(math.isfinite, p))):
            raise SimulationFault(f"non-finite state at t={t:.4f}")
        cache = np.array([self.path_length(i, th) for i in range(self.n_muscles)])
        return PlantState(th, om, np.array(p), np.array(pv), np.array(fdir), cache, t)

    def _check_commands(self, commands):
        commands = list(commands)
        if len(commands) != self.n_muscles:
            raise ValueError(
                f"{len(commands)} commands for {self.n_muscles} muscles"
            )
        return commands

    def settle(
        self,
        state: PlantState,
        commands,
        timeout_s: float = 10.0,
        recorder: TrajectoryRecorder | None = None,
    ) -> SettleResult:
        """Step until the joint and all tensions are quiet for a hold
        window, or the timeout elapses (converged flag says which)."""
        if timeout_s <= 0:
            raise ValueError("timeout must be positive")
        commands = self._check_commands(commands)
        dt = self.config.joint.dt
        hold_steps = max(1, int(round(SETTLE_HOLD / dt)))
        max_steps = int(math.ceil(timeout_s / dt))

        th, om, p, pv, fdir, t = self._unpack(state)
        m = self.n_muscles
        f_now = [0.0] * m
        fr_now = [0.0] * m
        f_prev = None
        quiet = 0
        converged = False
        elapsed = 0.0
        for k in range(max_steps):
            th, om, t = self._step_scalar(
                th, om, p, pv, fdir, t, commands, dt, f_now, fr_now
            )
            elapsed += dt
            if recorder is not None:
                recorder.add(t, th, f_now, p, fr_now)
            if f_prev is not None:
                fdot_ok = all(abs(a - b) / dt <= SETTLE_FDOT for a, b in zip(f_now, f_prev))
                if abs(om) < SETTLE_OMEGA and fdot_ok:
                    quiet += 1
                    if quiet >= hold_steps:
                        converged = True
                        break
                else:
                    quiet = 0
            f_prev = list(f_now)
            if k % 256 == 0 and not (math.isfinite(th) and math.isfinite(om)):
                raise SimulationFault(f"non-finite state at t={t:.4f}")
        if not all(map(math.isfinite, p)) or not math.isfinite(th):
            raise SimulationFault(f"non-finite state at t={t:.4f}")

        cache = np.array([self.path_length(i, th) for i in range(m)])
        out = PlantState(th, om, np.array(p), np.array(pv), np.array(fdir), cache, t)
        return SettleResult(out, self.measure(out, commands), converged, elapsed)


def default_plant(n_muscles: int = 3) -> Plant:
    """The stock elbow: one extensor, two flexors; a third flexor when grown.

    All constants are artifact defaults sized to a human-forearm scale and
    overridable through the plant config file.
    """
    muscles = [
        MuscleSpec("m1", "extensor", 0.025, 0.004, 0.3, 0.32),
        MuscleSpec("m2", "flexor", 0.028, 0.005, -0.2, 0.30),
        MuscleSpec("m3", "flexor", 0.022, -0.004, 0.4, 0.29),
        MuscleSpec("m4", "flexor", 0.025, 0.006, 0.1, 0.31),
    ]
    if not 1 <= n_muscles <= len(muscles):
        raise ValueError(f"default plant supports 1..{len(muscles)} muscles")
    return Plant(PlantConfig(JointParams(), muscles[:n_muscles]))


# ---------------------------------------------------------------------------
# plant configuration file: structured key-value text

_JOINT_FIELDS = (
    "inertia", "load_mass", "load_arm", "viscous", "gravity",
    "gravity_phase", "theta_min", "theta_max", "dt",
)
_MUSCLE_FIELDS = (
    "arm_const", "arm_cos", "arm_phase", "slack_length", "elastic_gain",
    "elastic_rate", "friction_eta", "max_winch_speed", "tension_gain",
)


def save_plant_config(config: PlantConfig, path) -> None:
    with open(path, "w") as out:
        out.write("plant v1\n")
        out.write("[joint]\n")
        for name in _JOINT_FIELDS:
            out.write(f"{name} {getattr(config.joint, name)!r}\n")
        for m in config.muscles:
            out.write(f"[muscle {m.name}]\n")
            out.write(f"side {m.side}\n")
            for name in _MUSCLE_FIELDS:
                out.write(f"{name} {getattr(m, name)!r}\n")


def load_plant_config(path) -> PlantConfig:
    joint_kv: dict[str, float] = {}
    muscles: list[MuscleSpec] = []
    current: dict | None = None

    def flush():
        if current is not None:
            kv = dict(current)
            name = kv.pop("__name__")
            side = kv.pop("side")
            muscles.append(MuscleSpec(name=name, side=side, **kv))

    with open(path) as inp:
        first = inp.readline().split()
        if first != ["plant", "v1"]:
            raise ValueError(f"not a plant config: {path}")
        section = None
        for raw in inp:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                flush()
                current = None
                head = line.strip("[]").split()
                if head[0] == "joint":
                    section = "joint"
                elif head[0] == "muscle":
                    section = "muscle"
                    current = {"__name__": head[1] if len(head) > 1 else f"m{len(muscles) + 1}"}
                else:
                    raise ValueError(f"unknown section {line} in {path}")
                continue
            key, _, value = line.partition(" ")
            if section == "joint":
                if key not in _JOINT_FIELDS:
                    raise ValueError(f"unknown joint key {key!r} in {path}")
                joint_kv[key] = float(value)
            elif section == "muscle":
                if key == "side":
                    current["side"] = value.strip()
                elif key in _MUSCLE_FIELDS:
                    current[key] = float(value)
                else:
                    raise ValueError(f"unknown muscle key {key!r} in {path}")
            else:
                raise ValueError(f"key {key!r} outside any section in {path}")
        flush()
    config = PlantConfig(JointParams(**joint_kv), muscles)
    config.validate()
    return config
