"""Planar vehicle dynamics models with per-wheel torque and steering inputs.

Two continuous-time models share the same control interface (four drive
torques, four steering angles) and the same three core states:

* ``base_derivative`` -- simplified model: linear tires, no load transfer,
  drive force applied directly as torque / wheel radius.
* ``gt_derivative`` -- higher-fidelity surrogate: Pacejka tires on both
  axes, friction-ellipse coupling, quasi-static load transfer and wheel
  spin dynamics (four extra states).

The structural gap between the two is what the learned corrector is
trained to predict.  All functions here are pure and operate on plain
tuples of floats so that tight integration loops stay cheap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from typing import Callable, NamedTuple, Sequence

G = 9.81

# Below this longitudinal speed the slip angle degenerates to the steer
# angle alone (atan2 of near-zero components is meaningless there).
V_EPS = 0.1

# Floor on the slip-ratio denominator.  A smaller floor makes the wheel
# spin ODE stiffer than a fixed-step integrator at the step sizes used
# here can handle, so this is intentionally larger than V_EPS.
SLIP_V_FLOOR = 1.0

STEER_MAX = 0.5
TORQUE_MAX = 1500.0

WHEEL_NAMES = ("FL", "FR", "RL", "RR")


class IntegrationError(RuntimeError):
    """A derivative evaluation produced a non-finite component."""


class DynState(NamedTuple):
    """Core dynamics state: longitudinal/lateral velocity and yaw rate."""

    v_x: float
    v_y: float
    w_z: float


class ExtendedState(NamedTuple):
    """Surrogate state: core dynamics plus four wheel angular velocities."""

    v_x: float
    v_y: float
    w_z: float
    omega_fl: float
    omega_fr: float
    omega_rl: float
    omega_rr: float

    @property
    def core(self) -> DynState:
        return DynState(self.v_x, self.v_y, self.w_z)

    @property
    def wheel_speeds(self) -> tuple[float, float, float, float]:
        return (self.omega_fl, self.omega_fr, self.omega_rl, self.omega_rr)


class WheelCommand(NamedTuple):
    """Per-wheel drive torques (N*m) and steering angles (rad), FL FR RL RR."""

    torques: tuple[float, float, float, float]
    steers: tuple[float, float, float, float]

    def validate(self) -> None:
        for i, t in enumerate(self.torques):
            if abs(t) > TORQUE_MAX:
                raise ValueError(f"torque {WHEEL_NAMES[i]} = {t} exceeds {TORQUE_MAX} N*m")
        for i, s in enumerate(self.steers):
            if abs(s) > STEER_MAX:
                raise ValueError(f"steer {WHEEL_NAMES[i]} = {s} exceeds {STEER_MAX} rad")

    @staticmethod
    def zero() -> "WheelCommand":
        return WheelCommand((0.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 0.0))


@dataclass(frozen=True)
class VehicleConfig:
    """Physical parameters shared by both models.

    ``c_f``/``c_r`` are per-axle cornering stiffnesses of the simplified
    model (each wheel of an axle carries half).  The Pacejka set and
    wheel spin inertia only matter to the surrogate.
    """

    mass: float = 2000.0        # kg
    i_z: float = 3200.0         # yaw inertia, kg*m^2
    a: float = 1.2              # CoG to front axle, m
    b: float = 1.6              # CoG to rear axle, m
    half_track: float = 0.8     # half track width, m
    r_w: float = 0.35           # wheel radius, m
    h: float = 0.6              # CoG height, m
    c_f: float = 80000.0        # front axle cornering stiffness, N/rad
    c_r: float = 80000.0        # rear axle cornering stiffness, N/rad
    pacejka_b: float = 10.0
    pacejka_c: float = 1.9
    pacejka_d: float = 1.0
    pacejka_e: float = 0.97
    mu: float = 0.9             # friction coefficient
    i_w: float = 1.5            # wheel spin inertia, kg*m^2
    f_r: float = 0.012          # rolling resistance coefficient
    c_d: float = 0.4            # aero drag, N*s^2/m^2 (lumped)

    def validate(self) -> None:
        for name in ("mass", "i_z", "r_w", "a", "b", "half_track"):
            if getattr(self, name) <= 0:
                raise ValueError(f"VehicleConfig.{name} must be positive")
        if not 0.0 < self.mu <= 2.0:
            raise ValueError("VehicleConfig.mu must be in (0, 2]")
        if self.c_f <= 0 or self.c_r <= 0:
            raise ValueError("cornering stiffnesses must be positive")

    def with_mass(self, mass: float) -> "VehicleConfig":
        """Config at a different mass, yaw inertia scaled proportionally."""
        return replace(self, mass=mass, i_z=self.i_z * mass / self.mass)

    def wheel_positions(self) -> tuple[tuple[float, float], ...]:
        """Body-frame (x, y) of FL, FR, RL, RR; x forward, y left."""
        a, b, ht = self.a, self.b, self.half_track
        return ((a, ht), (a, -ht), (-b, ht), (-b, -ht))

    @classmethod
    def from_dict(cls, raw: dict) -> "VehicleConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown vehicle config keys: {sorted(unknown)}")
        cfg = cls(**{k: float(v) for k, v in raw.items()})
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str) -> "VehicleConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def slip_angle(wheel_index: int, state: Sequence[float], steer: float,
               config: VehicleConfig) -> float:
    """Tire slip angle of one wheel; below V_EPS it is the steer angle alone."""
    v_x, v_y, w_z = state[0], state[1], state[2]
    if v_x < V_EPS:
        return steer
    x_i, y_i = config.wheel_positions()[wheel_index]
    return steer - math.atan2(v_y + x_i * w_z, v_x - y_i * w_z)


def linear_lateral_force(alpha: float, stiffness: float) -> float:
    """Small-angle linear tire: F_y = stiffness * alpha."""
    return stiffness * alpha


def pacejka_force(slip: float, normal_load: float, config: VehicleConfig) -> float:
    """Magic-formula tire force for a slip quantity (ratio or angle).

    F = mu * F_z * D * sin(C * atan(B*s - E*(B*s - atan(B*s)))).  Odd in
    slip, magnitude bounded by mu * F_z * D.
    """
    bs = config.pacejka_b * slip
    arg = bs - config.pacejka_e * (bs - math.atan(bs))
    return config.mu * normal_load * config.pacejka_d * math.sin(
        config.pacejka_c * math.atan(arg))


def normal_loads(state: Sequence[float], ax: float, ay: float,
                 config: VehicleConfig) -> tuple[float, float, float, float]:
    """Quasi-static per-wheel normal loads under planar acceleration.

    Static split is proportional to b/(a+b) front and a/(a+b) rear;
    longitudinal transfer moves m*ax*h/(2(a+b)) per wheel rearward and
    lateral transfer m*ay*h/(2*track) per wheel across each axle.
    Loads clamp at zero (a wheel cannot pull on the road).
    """
    m, h = config.mass, config.h
    wheelbase = config.a + config.b
    track = 2.0 * config.half_track
    static_front = m * G * config.b / (2.0 * wheelbase)
    static_rear = m * G * config.a / (2.0 * wheelbase)
    d_long = m * ax * h / (2.0 * wheelbase)
    d_lat = m * ay * h / (2.0 * track)
    fl = static_front - d_long - d_lat
    fr = static_front - d_long + d_lat
    rl = static_rear + d_long - d_lat
    rr = static_rear + d_long + d_lat
    return (max(fl, 0.0), max(fr, 0.0), max(rl, 0.0), max(rr, 0.0))


def _resistance(v_x: float, config: VehicleConfig) -> float:
    sign = 1.0 if v_x > 0 else (-1.0 if v_x < 0 else 0.0)
    return config.f_r * config.mass * G * sign + config.c_d * v_x * abs(v_x)


def base_derivative(state: Sequence[float], cmd: WheelCommand,
                    config: VehicleConfig) -> tuple[float, float, float]:
    """Simplified model right-hand side: linear tires, no load transfer.

    Each wheel pushes T_i / r_w along its heading and a linear lateral
    force (half the axle stiffness times slip angle) across it; both are
    rotated into the body frame by the steer angle.
    """
    v_x, v_y, w_z = state[0], state[1], state[2]
    positions = config.wheel_positions()
    sum_fx = 0.0
    sum_fy = 0.0
    sum_mz = 0.0
    for i in range(4):
        steer = cmd.steers[i]
        x_i, y_i = positions[i]
        stiffness = config.c_f if i < 2 else config.c_r
        alpha = slip_angle(i, state, steer, config)
        f_lat = linear_lateral_force(alpha, 0.5 * stiffness)
        f_long = cmd.torques[i] / config.r_w
        cd = math.cos(steer)
        sd = math.sin(steer)
        fx = f_long * cd - f_lat * sd
        fy = f_long * sd + f_lat * cd
        sum_fx += fx
        sum_fy += fy
        sum_mz += x_i * fy - y_i * fx
    m = config.mass
    return (
        (sum_fx - _resistance(v_x, config)) / m + v_y * w_z,
        sum_fy / m - v_x * w_z,
        sum_mz / config.i_z,
    )


def gt_derivative(state: Sequence[float], cmd: WheelCommand,
                  config: VehicleConfig) -> tuple[float, ...]:
    """Surrogate right-hand side over (v_x, v_y, w_z, omega_1..4).

    Pacejka forces on both tire axes, coupled through a friction
    ellipse (lateral force scaled by sqrt(1 - (F_x / mu F_z)^2)), with
    quasi-static load transfer and wheel spin I_w * omega_dot =
    T_i - r_w * F_x.  Load transfer uses accelerations from a first
    force pass at static loads, so the function stays a pure map of its
    arguments.  For fixed slip every tire force is linear in normal
    load, so the slip/trig work is done once and both passes only
    rescale per-wheel unit forces.
    """
    v_x, v_y, w_z = state[0], state[1], state[2]
    m = config.mass
    mu = config.mu
    r_w = config.r_w
    p_b, p_c, p_d, p_e = (config.pacejka_b, config.pacejka_c,
                          config.pacejka_d, config.pacejka_e)
    positions = config.wheel_positions()
    atan = math.atan
    sin = math.sin
    low_speed = v_x < V_EPS

    # Per-wheel unit forces (per unit mu * F_z) in the body frame, and the
    # longitudinal unit force in the wheel frame for the spin dynamics.
    unit_fx = [0.0] * 4
    unit_fy = [0.0] * 4
    unit_mz = [0.0] * 4
    unit_long = [0.0] * 4
    for i in range(4):
        steer = cmd.steers[i]
        x_i, y_i = positions[i]
        cd = math.cos(steer)
        sd = math.sin(steer)
        v_wx = v_x - y_i * w_z
        v_wy = v_y + x_i * w_z
        v_long = v_wx * cd + v_wy * sd
        slip = (r_w * state[3 + i] - v_long) / max(abs(v_long), SLIP_V_FLOOR)
        bs = p_b * slip
        shape_x = p_d * sin(p_c * atan(bs - p_e * (bs - atan(bs))))
        alpha = steer if low_speed else steer - math.atan2(v_wy, v_wx)
        ba = p_b * alpha
        shape_y = p_d * sin(p_c * atan(ba - p_e * (ba - atan(ba))))
        shape_y *= math.sqrt(max(0.0, 1.0 - shape_x * shape_x))
        ux = shape_x * cd - shape_y * sd
        uy = shape_x * sd + shape_y * cd
        unit_fx[i] = ux
        unit_fy[i] = uy
        unit_mz[i] = x_i * uy - y_i * ux
        unit_long[i] = shape_x

    resist = _resistance(v_x, config)
    static = normal_loads(state, 0.0, 0.0, config)
    fx1 = mu * (static[0] * unit_fx[0] + static[1] * unit_fx[1]
                + static[2] * unit_fx[2] + static[3] * unit_fx[3])
    fy1 = mu * (static[0] * unit_fy[0] + static[1] * unit_fy[1]
                + static[2] * unit_fy[2] + static[3] * unit_fy[3])
    loads = normal_loads(state, (fx1 - resist) / m, fy1 / m, config)
    sum_fx = mu * (loads[0] * unit_fx[0] + loads[1] * unit_fx[1]
                   + loads[2] * unit_fx[2] + loads[3] * unit_fx[3])
    sum_fy = mu * (loads[0] * unit_fy[0] + loads[1] * unit_fy[1]
                   + loads[2] * unit_fy[2] + loads[3] * unit_fy[3])
    sum_mz = mu * (loads[0] * unit_mz[0] + loads[1] * unit_mz[1]
                   + loads[2] * unit_mz[2] + loads[3] * unit_mz[3])
    i_w = config.i_w
    return (
        (sum_fx - resist) / m + v_y * w_z,
        sum_fy / m - v_x * w_z,
        sum_mz / config.i_z,
        (cmd.torques[0] - r_w * mu * loads[0] * unit_long[0]) / i_w,
        (cmd.torques[1] - r_w * mu * loads[1] * unit_long[1]) / i_w,
        (cmd.torques[2] - r_w * mu * loads[2] * unit_long[2]) / i_w,
        (cmd.torques[3] - r_w * mu * loads[3] * unit_long[3]) / i_w,
    )


def rk4_step(derivative_fn: Callable, state: Sequence[float], cmd, config,
             dt: float) -> tuple[float, ...]:
    """One classical Runge-Kutta step with the command held constant.

    Raises IntegrationError if any stage derivative is non-finite.
    """
    isfinite = math.isfinite
    k1 = derivative_fn(state, cmd, config)
    if not all(map(isfinite, k1)):
        raise IntegrationError("non-finite derivative (stage 1)")
    half = 0.5 * dt
    s2 = tuple(x + half * k for x, k in zip(state, k1))
    k2 = derivative_fn(s2, cmd, config)
    if not all(map(isfinite, k2)):
        raise IntegrationError("non-finite derivative (stage 2)")
    s3 = tuple(x + half * k for x, k in zip(state, k2))
    k3 = derivative_fn(s3, cmd, config)
    if not all(map(isfinite, k3)):
        raise IntegrationError("non-finite derivative (stage 3)")
    s4 = tuple(x + dt * k for x, k in zip(state, k3))
    k4 = derivative_fn(s4, cmd, config)
    if not all(map(isfinite, k4)):
        raise IntegrationError("non-finite derivative (stage 4)")
    sixth = dt / 6.0
    return tuple(
        x + sixth * (a + 2.0 * (b + c) + d)
        for x, a, b, c, d in zip(state, k1, k2, k3, k4)
    )
