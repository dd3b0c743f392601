"""Training loop for the residual correctors.

Sliding windows are cut per condition (never across boundaries), z-score
statistics come from the train split only, and the objective is a per-state
weighted smooth L1 on the corrected next-step state, evaluated in
normalized residual units.  Optimization is Adam with decoupled weight
decay.  Everything is seeded; two runs with the same seed produce
bit-identical checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, zero_grads
from .datagen import DatasetRecord, load_split
from .network import (
    DyTRConfig,
    DynamicsInput,
    NormStats,
    ResidualModel,
    normalize_input,
)

STATS_STD_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss at epoch {epoch} (loss={value})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-5
    alphas: tuple[float, float, float] = (1.0, 10.0, 1000.0)
    beta: float = 1.0              # smooth L1 width, in normalized units
    seed: int = 0
    precision: str = "float32"     # training speed; checks always run 64-bit

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if any(a <= 0 for a in self.alphas):
            raise ValueError("loss weights must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr": self.lr, "weight_decay": self.weight_decay,
                "alphas": list(self.alphas), "beta": self.beta,
                "seed": self.seed, "precision": self.precision}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "alphas" in raw:
            raw = dict(raw, alphas=tuple(raw["alphas"]))
        return cls(**raw)


@dataclass
class WindowSet:
    """Flattened sliding windows over one or more conditions."""

    hist_states: np.ndarray     # [N, T, 3] estimated states
    hist_controls: np.ndarray   # [N, T, 8]
    next_estimate: np.ndarray   # [N, 3] estimator's t+1 prediction
    target: np.ndarray          # [N, 3] surrogate state at t+1
    mass: np.ndarray            # [N, 1]
    condition: np.ndarray       # [N] index into `keys`
    step: np.ndarray            # [N] t index of the window end
    keys: list[tuple[str, float]] = field(default_factory=list)
    skipped: int = 0            # conditions shorter than T+1

    @property
    def n(self) -> int:
        return self.hist_states.shape[0]

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.hist_states[idx], self.hist_controls[idx],
                         self.next_estimate[idx], self.target[idx],
                         self.mass[idx], self.condition[idx], self.step[idx],
                         self.keys, self.skipped)


def make_windows(records_by_condition: dict[tuple[str, float], list[DatasetRecord]],
                 seq_len: int) -> WindowSet:
    """Cut length-T windows with a t+1 target inside each condition.

    A condition with N records yields N - T windows; conditions shorter
    than T + 1 are skipped and counted.
    """
    h_s, h_u, nxt, tgt, mass, cond, stp = [], [], [], [], [], [], []
    keys = sorted(records_by_condition.keys())
    skipped = 0
    for ci, key in enumerate(keys):
        records = sorted(records_by_condition[key], key=lambda r: r.step)
        n = len(records)
        if n < seq_len + 1:
            skipped += 1
            continue
        states = np.array([r.s_hat for r in records])
        controls = np.array([list(r.u.torques) + list(r.u.steers) for r in records])
        gt = np.array([r.s_gt for r in records])
        s_win = np.lib.stride_tricks.sliding_window_view(
            states, (seq_len, 3)).reshape(-1, seq_len, 3)[:n - seq_len]
        u_win = np.lib.stride_tricks.sliding_window_view(
            controls, (seq_len, 8)).reshape(-1, seq_len, 8)[:n - seq_len]
        h_s.append(s_win)
        h_u.append(u_win)
        nxt.append(states[seq_len:])
        tgt.append(gt[seq_len:])
        mass.append(np.full((n - seq_len, 1), key[1]))
        cond.append(np.full(n - seq_len, ci, dtype=np.int64))
        stp.append(np.arange(seq_len - 1, n - 1, dtype=np.int64))
    if not h_s:
        return WindowSet(np.zeros((0, seq_len, 3)), np.zeros((0, seq_len, 8)),
                         np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 1)),
                         np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                         keys, skipped)
    return WindowSet(np.concatenate(h_s), np.concatenate(h_u),
                     np.concatenate(nxt), np.concatenate(tgt),
                     np.concatenate(mass), np.concatenate(cond),
                     np.concatenate(stp), keys, skipped)


def compute_stats(windows: WindowSet) -> NormStats:
    """z-score statistics of the train windows; residuals get scale only."""
    steps = np.concatenate([windows.hist_states, windows.hist_controls], axis=-1)
    flat = steps.reshape(-1, steps.shape[-1])
    step_mean = flat.mean(axis=0)
    step_std = np.maximum(flat.std(axis=0), STATS_STD_FLOOR)
    residual = windows.target - windows.next_estimate
    scale = np.maximum(residual.std(axis=0), STATS_STD_FLOOR)
    return NormStats(
        step_mean=step_mean, step_std=step_std,
        state_mean=step_mean[:3].copy(), state_std=step_std[:3].copy(),
        mass_mean=float(windows.mass.mean()),
        mass_std=float(max(windows.mass.std(), STATS_STD_FLOOR)),
        residual_scale=scale)


def weighted_loss(delta_hat: Tensor, s_hat_next, s_gt_next,
                  alphas: Sequence[float] = (1.0, 10.0, 1000.0),
                  beta: float = 1.0, scale=None) -> Tensor:
    """Sum over states of alpha_i * smoothL1(corrected - truth), batch mean.

    ``scale`` (e.g. per-state residual std) divides the error first so the
    smooth L1 width acts in normalized units; default is physical units.
    """
    gap = np.asarray(s_hat_next, dtype=delta_hat.data.dtype) \
        - np.asarray(s_gt_next, dtype=delta_hat.data.dtype)
    err = ad.add(delta_hat, Tensor(gap))
    if scale is not None:
        err = ad.mul_const(err, 1.0 / np.asarray(scale, dtype=delta_hat.data.dtype))
    per_state = ad.mul_const(ad.smooth_l1(err, beta=beta),
                             np.asarray(alphas, dtype=delta_hat.data.dtype))
    return ad.mean(ad.tsum(per_state, axis=-1))


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """One Adam update with bias correction; weight decay is decoupled
    (applied as a direct shrink before the Adam delta)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m_hat = m / c1
        v_hat = v / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: ResidualModel                  # final-epoch parameters
    best_model: ResidualModel             # lowest validation loss (or final)
    history: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_epoch: int

    def write_history(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tr, va in self.history:
                writer.writerow([epoch, format(tr, ".17g"),
                                 "" if np.isnan(va) else format(va, ".17g")])


def _batch_input(windows: WindowSet, idx, stats: NormStats, dtype) -> DynamicsInput:
    return normalize_input(windows.hist_states[idx], windows.hist_controls[idx],
                           windows.next_estimate[idx], windows.mass[idx],
                           stats, dtype)


def dataset_loss(model: ResidualModel, windows: WindowSet,
                 config: TrainConfig, batch_size: int = 2048) -> float:
    """Tape-free objective value over a whole window set."""
    if windows.n == 0:
        return float("nan")
    total = 0.0
    scale = model.stats.residual_scale
    for lo in range(0, windows.n, batch_size):
        idx = slice(lo, min(lo + batch_size, windows.n))
        inp = _batch_input(windows, idx, model.stats, model.dtype)
        delta = model.forward(inp)
        loss = weighted_loss(delta, windows.next_estimate[idx],
                             windows.target[idx], config.alphas,
                             config.beta, scale=scale)
        total += float(loss.data) * (idx.stop - idx.start)
    return total / windows.n


def train_windows(train_set: WindowSet, model_kind: str,
                  net_config: DyTRConfig, train_config: TrainConfig,
                  val_set: WindowSet | None = None,
                  stats: NormStats | None = None) -> TrainResult:
    """Train a fresh model on pre-cut windows; deterministic given the seed."""
    if train_set.n == 0:
        raise ValueError("empty training window set")
    dtype = train_config.dtype
    if stats is None:
        stats = compute_stats(train_set)
    model = ResidualModel.create(model_kind, net_config, stats,
                                 seed=train_config.seed, dtype=dtype)
    adam = AdamState()
    rng = np.random.default_rng(train_config.seed)
    scale = stats.residual_scale
    history = []
    best_val = float("inf")
    best_epoch = -1
    best_params = None

    for epoch in range(train_config.epochs):
        perm = rng.permutation(train_set.n)
        running = 0.0
        for lo in range(0, train_set.n, train_config.batch_size):
            idx = perm[lo:lo + train_config.batch_size]
            inp = _batch_input(train_set, idx, stats, dtype)
            zero_grads(model.parameters())
            with Tape() as tape:
                delta = model.forward(inp)
                loss = weighted_loss(delta, train_set.next_estimate[idx],
                                     train_set.target[idx],
                                     train_config.alphas, train_config.beta,
                                     scale=scale)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            backward(tape, loss)
            adam_step(model.params, adam, train_config.lr,
                      train_config.weight_decay)
            running += value * len(idx)
        train_loss = running / train_set.n
        val_loss = (dataset_loss(model, val_set, train_config)
                    if val_set is not None and val_set.n else float("nan"))
        history.append((epoch, train_loss, val_loss))
        if not np.isnan(val_loss) and val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}

    if best_params is None:
        best_model = model
        best_epoch = train_config.epochs - 1
    else:
        best_model = ResidualModel(model.kind, model.config, model.stats,
                                   {k: Tensor(v, dtype=dtype)
                                    for k, v in best_params.items()})
    return TrainResult(model, best_model, history, best_epoch)


def train(data_dir: str, model_kind: str, net_config: DyTRConfig,
          train_config: TrainConfig, val_split: str | None = "val1") -> TrainResult:
    """Load the train split from disk, cut windows, and train."""
    train_records = load_split(data_dir, "train")
    train_set = make_windows(train_records, net_config.seq_len)
    val_set = None
    if val_split is not None:
        val_set = make_windows(load_split(data_dir, val_split), net_config.seq_len)
    return train_windows(train_set, model_kind, net_config, train_config,
                         val_set=val_set)
