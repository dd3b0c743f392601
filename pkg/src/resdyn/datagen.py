"""Dataset generation: sine-wave driving programs run through the simplified
model and the surrogate in lockstep, filtered for stability and written out
as per-condition CSV files plus a split manifest.

Both models receive identical control sequences and run closed-loop from the
same initial state; neither ever sees the other's trajectory.  The recorded
pair (estimated state, surrogate state) per step is the raw material for
residual learning.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .vehicle import (
    DynState,
    IntegrationError,
    STEER_MAX,
    TORQUE_MAX,
    VehicleConfig,
    WheelCommand,
    base_derivative,
    gt_derivative,
    rk4_step,
)

# Integration substeps per recorded step.  The surrogate's wheel spin
# dynamics are much faster than the 10 ms recording grid.
BASE_SUBSTEPS = 2
GT_SUBSTEPS = 25

CSV_HEADER = ("cond,step,t,T1,T2,T3,T4,st1,st2,st3,st4,"
              "vx_hat,vy_hat,wz_hat,vx_gt,vy_gt,wz_gt,mass")

# Draw ranges for the random condition pool.
TORQUE_AMP_RANGE = (0.0, 800.0)
TORQUE_OFFSET_RANGE = (-200.0, 600.0)
STEER_AMP_RANGE = (0.0, 0.15)
FREQ_RANGE = (0.05, 0.5)
INIT_SPEED_RANGE = (5.0, 12.0)


@dataclass(frozen=True)
class SinePattern:
    """One sine channel: offset + amplitude * sin(2*pi*freq*t + phase)."""

    amplitude: float = 0.0
    freq_hz: float = 0.0
    phase: float = 0.0
    offset: float = 0.0

    def value(self, t: float) -> float:
        return self.offset + self.amplitude * math.sin(
            2.0 * math.pi * self.freq_hz * t + self.phase)


@dataclass(frozen=True)
class ConditionSpec:
    """One driving condition: duration, initial state and control sines."""

    id: str
    duration: float = 20.0
    dt: float = 0.01
    initial_state: DynState = DynState(10.0, 0.0, 0.0)
    torque: SinePattern = SinePattern()
    front_steer: SinePattern = SinePattern()
    rear_steer_ratio: float = 0.3
    torque_scale: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0

    def n_steps(self) -> int:
        return round(self.duration / self.dt)

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError(f"{self.id}: duration must be positive")
        if self.torque.freq_hz < 0 or self.front_steer.freq_hz < 0:
            raise ValueError(f"{self.id}: frequencies must be >= 0")
        t_extreme = abs(self.torque.offset) + abs(self.torque.amplitude)
        for i, scale in enumerate(self.torque_scale):
            if abs(scale) * t_extreme > TORQUE_MAX:
                raise ValueError(
                    f"{self.id}: torque channel (wheel {i}) can reach "
                    f"{abs(scale) * t_extreme:.1f} N*m, beyond {TORQUE_MAX}")
        s_extreme = abs(self.front_steer.offset) + abs(self.front_steer.amplitude)
        if s_extreme > STEER_MAX:
            raise ValueError(
                f"{self.id}: front_steer channel can reach {s_extreme:.3f} rad, "
                f"beyond {STEER_MAX}")
        if abs(self.rear_steer_ratio) * s_extreme > STEER_MAX:
            raise ValueError(
                f"{self.id}: rear_steer channel can reach "
                f"{abs(self.rear_steer_ratio) * s_extreme:.3f} rad, beyond {STEER_MAX}")


@dataclass(frozen=True)
class DatasetRecord:
    """One co-simulation step: controls plus both models' states."""

    condition_id: str
    step: int
    t: float
    u: WheelCommand
    s_hat: DynState
    s_gt: DynState
    mass: float


@dataclass(frozen=True)
class FilterBounds:
    v_y_max: float = 5.0
    w_z_max: float = 1.5
    v_x_max: float = 45.0

    def as_dict(self) -> dict:
        return {"v_y_max": self.v_y_max, "w_z_max": self.w_z_max,
                "v_x_max": self.v_x_max}


@dataclass(frozen=True)
class SplitRecipe:
    """How many conditions go where, and at which masses."""

    n_train_conditions: int
    train_masses: tuple[float, ...]
    holdout_mass: float
    n_val2_conditions: int
    duration: float = 20.0
    dt: float = 0.01

    def validate(self) -> None:
        if self.n_train_conditions <= 0 or self.n_val2_conditions <= 0:
            raise ValueError("split recipe needs positive condition counts")
        if self.holdout_mass in self.train_masses:
            raise ValueError("holdout mass must differ from every train mass")

    @staticmethod
    def desk() -> "SplitRecipe":
        return SplitRecipe(n_train_conditions=8,
                           train_masses=(1800.0, 2000.0, 2200.0),
                           holdout_mass=2100.0, n_val2_conditions=4)

    @staticmethod
    def paper() -> "SplitRecipe":
        masses = (1600.0, 1700.0, 1800.0, 1900.0, 2000.0,
                  2200.0, 2300.0, 2400.0, 2500.0)
        return SplitRecipe(n_train_conditions=28, train_masses=masses,
                           holdout_mass=2100.0, n_val2_conditions=28)


@dataclass
class SplitManifest:
    """Assignment of (condition, mass) pairs to train/val1/val2 plus files."""

    seed: int
    dt: float
    splits: dict[str, list[dict]]
    filter_bounds: dict = field(default_factory=lambda: FilterBounds().as_dict())

    def entries(self, split: str) -> list[dict]:
        return self.splits[split]

    def validate(self) -> None:
        train_conds = {e["condition_id"] for e in self.splits["train"]}
        train_masses = {e["mass"] for e in self.splits["train"]}
        for e in self.splits["val1"]:
            if e["condition_id"] not in train_conds:
                raise ValueError("val1 conditions must be train conditions")
            if e["mass"] in train_masses:
                raise ValueError("val1 mass must be unseen in train")
        for e in self.splits["val2"]:
            if e["condition_id"] in train_conds:
                raise ValueError("val2 conditions must be unseen in train")
            if e["mass"] in train_masses:
                raise ValueError("val2 mass must be unseen in train")
        pairs = [(e["condition_id"], e["mass"])
                 for entries in self.splits.values() for e in entries]
        if len(pairs) != len(set(pairs)):
            raise ValueError("a (condition, mass) pair appears in two splits")

    def to_json(self) -> str:
        payload = {"seed": self.seed, "dt": self.dt, "splits": self.splits,
                   "filter_bounds": self.filter_bounds}
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SplitManifest":
        raw = json.loads(text)
        return SplitManifest(seed=raw["seed"], dt=raw["dt"],
                             splits=raw["splits"],
                             filter_bounds=raw["filter_bounds"])


def gen_controls(spec: ConditionSpec) -> list[WheelCommand]:
    """Expand a condition spec into its per-step wheel commands.

    Left and right wheels of an axle steer identically, the rear axle
    counter-steers at ``rear_steer_ratio`` of the front, and all four
    torques follow the same sine scaled per wheel.
    """
    spec.validate()
    out = []
    scale = spec.torque_scale
    ratio = spec.rear_steer_ratio
    for k in range(spec.n_steps()):
        t = k * spec.dt
        torque = spec.torque.value(t)
        front = spec.front_steer.value(t)
        rear = -ratio * front
        out.append(WheelCommand(
            (scale[0] * torque, scale[1] * torque,
             scale[2] * torque, scale[3] * torque),
            (front, front, rear, rear)))
    return out


def cosim_run(spec: ConditionSpec, mass: float, base_config: VehicleConfig,
              gt_config: VehicleConfig,
              base_substeps: int = BASE_SUBSTEPS,
              gt_substeps: int = GT_SUBSTEPS) -> list[DatasetRecord]:
    """Run both models closed-loop on identical controls and record pairs.

    The two configs must agree on mass and geometry.  Raises
    IntegrationError if either model produces a non-finite derivative.
    """
    for name in ("mass", "a", "b", "half_track", "r_w"):
        if getattr(base_config, name) != getattr(gt_config, name):
            raise ValueError(f"configs disagree on {name}")
    if base_config.mass != mass:
        raise ValueError("configs must be built at the requested mass")

    controls = gen_controls(spec)
    base_state = tuple(spec.initial_state)
    omega0 = spec.initial_state.v_x / gt_config.r_w
    gt_state = tuple(spec.initial_state) + (omega0,) * 4
    h_base = spec.dt / base_substeps
    h_gt = spec.dt / gt_substeps

    records = []
    for k, u in enumerate(controls):
        records.append(DatasetRecord(
            condition_id=spec.id, step=k, t=k * spec.dt, u=u,
            s_hat=DynState(*base_state[:3]), s_gt=DynState(*gt_state[:3]),
            mass=mass))
        for _ in range(base_substeps):
            base_state = rk4_step(base_derivative, base_state, u, base_config, h_base)
        for _ in range(gt_substeps):
            gt_state = rk4_step(gt_derivative, gt_state, u, gt_config, h_gt)
    return records


def stability_filter(records: Iterable[DatasetRecord],
                     bounds: FilterBounds = FilterBounds()) -> tuple[bool, str | None]:
    """Accept a run only if both trajectories stay inside the bounds."""
    for rec in records:
        for label, s in (("estimate", rec.s_hat), ("surrogate", rec.s_gt)):
            if not all(math.isfinite(v) for v in s):
                return False, f"{rec.condition_id} step {rec.step}: non-finite {label}"
            if abs(s.v_y) > bounds.v_y_max:
                return False, (f"{rec.condition_id} step {rec.step}: "
                               f"|v_y| = {abs(s.v_y):.2f} > {bounds.v_y_max} ({label})")
            if abs(s.w_z) > bounds.w_z_max:
                return False, (f"{rec.condition_id} step {rec.step}: "
                               f"|w_z| = {abs(s.w_z):.2f} > {bounds.w_z_max} ({label})")
            if abs(s.v_x) > bounds.v_x_max:
                return False, (f"{rec.condition_id} step {rec.step}: "
                               f"|v_x| = {abs(s.v_x):.2f} > {bounds.v_x_max} ({label})")
    return True, None


def draw_condition_pool(n: int, seed: int, duration: float = 20.0,
                        dt: float = 0.01, prefix: str = "cond") -> list[ConditionSpec]:
    """Seeded random pool of sine-wave driving conditions."""
    rng = np.random.default_rng(seed)
    pool = []
    for i in range(n):
        torque = SinePattern(
            amplitude=float(rng.uniform(*TORQUE_AMP_RANGE)),
            freq_hz=float(rng.uniform(*FREQ_RANGE)),
            phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            offset=float(rng.uniform(*TORQUE_OFFSET_RANGE)))
        steer = SinePattern(
            amplitude=float(rng.uniform(*STEER_AMP_RANGE)),
            freq_hz=float(rng.uniform(*FREQ_RANGE)),
            phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            offset=0.0)
        v0 = float(rng.uniform(*INIT_SPEED_RANGE))
        pool.append(ConditionSpec(
            id=f"{prefix}{i:03d}", duration=duration, dt=dt,
            initial_state=DynState(v0, 0.0, 0.0),
            torque=torque, front_steer=steer, seed=seed))
    return pool


def build_splits(condition_pool: Sequence[ConditionSpec],
                 recipe: SplitRecipe,
                 seed: int = 0,
                 bounds: FilterBounds = FilterBounds()) -> SplitManifest:
    """Assign pool conditions to splits per the recipe.

    The first ``n_train_conditions`` of the pool become train (at every
    train mass) and val1 (at the holdout mass); the next
    ``n_val2_conditions`` become val2 at the holdout mass.
    """
    recipe.validate()
    needed = recipe.n_train_conditions + recipe.n_val2_conditions
    if len(condition_pool) < needed:
        raise ValueError(
            f"condition pool has {len(condition_pool)} entries, "
            f"recipe needs {needed}")
    train_conds = condition_pool[:recipe.n_train_conditions]
    val2_conds = condition_pool[recipe.n_train_conditions:needed]

    def entry(spec: ConditionSpec, mass: float) -> dict:
        return {"condition_id": spec.id, "mass": mass,
                "file": f"{spec.id}__m{mass:g}.csv"}

    splits = {
        "train": [entry(c, m) for c in train_conds for m in recipe.train_masses],
        "val1": [entry(c, recipe.holdout_mass) for c in train_conds],
        "val2": [entry(c, recipe.holdout_mass) for c in val2_conds],
    }
    manifest = SplitManifest(seed=seed, dt=recipe.dt, splits=splits,
                             filter_bounds=bounds.as_dict())
    manifest.validate()
    return manifest


def _fmt(x: float) -> str:
    # 17 significant digits: float64 round-trips exactly through text
    return format(x, ".17g")


def write_dataset(runs: dict[str, list[DatasetRecord]],
                  manifest: SplitManifest, out_dir: str) -> list[str]:
    """Write one CSV per manifest entry plus manifest.json.

    ``runs`` maps the manifest 'file' key to its records.  Returns the
    list of paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for split in ("train", "val1", "val2"):
        for e in manifest.entries(split):
            fname = e["file"]
            if fname not in runs:
                raise ValueError(f"no records supplied for {fname}")
            path = os.path.join(out_dir, fname)
            try:
                with open(path, "w", newline="", encoding="utf-8") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(CSV_HEADER.split(","))
                    for r in runs[fname]:
                        writer.writerow([
                            r.condition_id, r.step, _fmt(r.t),
                            *[_fmt(v) for v in r.u.torques],
                            *[_fmt(v) for v in r.u.steers],
                            *[_fmt(v) for v in r.s_hat],
                            *[_fmt(v) for v in r.s_gt],
                            _fmt(r.mass),
                        ])
            except OSError as exc:
                raise OSError(f"failed writing {path}: {exc}") from exc
            written.append(path)
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())
    written.append(manifest_path)
    return written


def read_condition_csv(path: str) -> list[DatasetRecord]:
    records = []
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER.split(","):
                raise ValueError(f"{path}: unexpected CSV header")
            for row in reader:
                vals = [float(x) for x in row[2:]]
                records.append(DatasetRecord(
                    condition_id=row[0], step=int(row[1]), t=vals[0],
                    u=WheelCommand(tuple(vals[1:5]), tuple(vals[5:9])),
                    s_hat=DynState(*vals[9:12]), s_gt=DynState(*vals[12:15]),
                    mass=vals[15]))
    except OSError as exc:
        raise OSError(f"failed reading {path}: {exc}") from exc
    return records


def load_manifest(data_dir: str) -> SplitManifest:
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        return SplitManifest.from_json(fh.read())


def load_split(data_dir: str, split: str) -> dict[tuple[str, float], list[DatasetRecord]]:
    """Load every condition of a split, keyed by (condition_id, mass)."""
    manifest = load_manifest(data_dir)
    out = {}
    for e in manifest.entries(split):
        out[(e["condition_id"], e["mass"])] = read_condition_csv(
            os.path.join(data_dir, e["file"]))
    return out


@dataclass
class GenerationReport:
    accepted: int = 0
    rejected: int = 0
    reasons: list[str] = field(default_factory=list)


def generate_dataset(out_dir: str, recipe: SplitRecipe,
                     vehicle: VehicleConfig, seed: int,
                     bounds: FilterBounds = FilterBounds(),
                     max_reject_fraction: float = 0.5) -> tuple[SplitManifest, GenerationReport]:
    """End-to-end dataset generation with stability filtering.

    Candidates are drawn from the seeded pool in order; a candidate is
    accepted for a role (train+val1, or val2) only if every one of its
    mass variants passes the stability filter.  Aborts if more than
    ``max_reject_fraction`` of the candidates tried were rejected.
    """
    recipe.validate()
    needed = recipe.n_train_conditions + recipe.n_val2_conditions
    pool = draw_condition_pool(4 * needed, seed, recipe.duration, recipe.dt)
    report = GenerationReport()
    accepted: list[ConditionSpec] = []
    runs: dict[str, list[DatasetRecord]] = {}

    for spec in pool:
        if len(accepted) >= needed:
            break
        train_role = len(accepted) < recipe.n_train_conditions
        masses = (tuple(recipe.train_masses) + (recipe.holdout_mass,)
                  if train_role else (recipe.holdout_mass,))
        candidate_runs = {}
        reason = None
        for mass in masses:
            cfg_m = vehicle.with_mass(mass)
            try:
                records = cosim_run(spec, mass, cfg_m, cfg_m)
            except IntegrationError as exc:
                reason = f"{spec.id} @ {mass:g} kg: {exc}"
                break
            ok, why = stability_filter(records, bounds)
            if not ok:
                reason = why
                break
            candidate_runs[f"{spec.id}__m{mass:g}.csv"] = records
        if reason is None:
            accepted.append(spec)
            runs.update(candidate_runs)
            report.accepted += 1
        else:
            report.rejected += 1
            report.reasons.append(reason)

    tried = report.accepted + report.rejected
    if len(accepted) < needed:
        raise RuntimeError(
            f"pool exhausted: only {len(accepted)}/{needed} conditions passed "
            f"the stability filter; first reasons: {report.reasons[:5]}")
    if tried and report.rejected / tried > max_reject_fraction:
        raise RuntimeError(
            f"stability filter rejected {report.rejected}/{tried} candidate "
            f"conditions (> {max_reject_fraction:.0%}); first reasons: "
            f"{report.reasons[:5]}")

    manifest = build_splits(accepted, recipe, seed=seed, bounds=bounds)
    write_dataset(runs, manifest, out_dir)
    return manifest, report
