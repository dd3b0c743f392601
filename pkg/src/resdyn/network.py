"""Residual corrector networks.

Three architectures share the same inputs (a window of estimated states and
controls, the estimator's next-step prediction, and the vehicle mass) and
the same output (a 3-dim correction in physical units):

* ``dytr``      -- per-step MLP features, Transformer encoder over time, a
                   single learned query built from [next estimate, mass]
                   that cross-attends the fused features, linear head.
* ``mlp``       -- per-step MLP features (next estimate and mass appended to
                   every step), flatten, MLP fuse, MLP head.
* ``mlp-trans`` -- like ``dytr`` up to the encoder, but the head reads the
                   mean-pooled encoder output instead of a query decoder.

Inputs are z-scored with training statistics; the residual output is scaled
(not shifted) so that a zeroed head is exactly the identity correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

QUERY_MODES = ("full", "none", "config_only", "state_only")

STATE_DIM = 3
CONTROL_DIM = 8
STEP_DIM = STATE_DIM + CONTROL_DIM          # per-step input of the encoder
QUERY_DIM = STATE_DIM + 1                   # [next estimate, mass]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DyTRConfig:
    """Architecture hyperparameters shared by all three model kinds."""

    feature_dim: int = 64
    seq_len: int = 15
    depth: int = 2
    num_heads: int = 4
    ffn_dim: int | None = None        # defaults to 3 * feature_dim
    query_mode: str = "full"

    def __post_init__(self):
        if self.feature_dim % self.num_heads:
            raise ValueError("feature_dim must be divisible by num_heads")
        if self.seq_len < 1 or self.depth < 1:
            raise ValueError("seq_len and depth must be >= 1")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 3 * self.feature_dim

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "seq_len": self.seq_len,
                "depth": self.depth, "num_heads": self.num_heads,
                "ffn_dim": self.ffn_dim, "query_mode": self.query_mode}

    @classmethod
    def from_dict(cls, raw: dict) -> "DyTRConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class NormStats:
    """Training-split normalization constants, stored in checkpoints."""

    step_mean: np.ndarray       # [11] per-channel mean of [state, control]
    step_std: np.ndarray        # [11]
    state_mean: np.ndarray      # [3] for the next-step estimate
    state_std: np.ndarray       # [3]
    mass_mean: float
    mass_std: float
    residual_scale: np.ndarray  # [3]; output scaling only, never shifted

    @staticmethod
    def identity() -> "NormStats":
        return NormStats(np.zeros(STEP_DIM), np.ones(STEP_DIM),
                         np.zeros(STATE_DIM), np.ones(STATE_DIM),
                         0.0, 1.0, np.ones(STATE_DIM))

    def to_dict(self) -> dict:
        return {"step_mean": self.step_mean.tolist(),
                "step_std": self.step_std.tolist(),
                "state_mean": self.state_mean.tolist(),
                "state_std": self.state_std.tolist(),
                "mass_mean": self.mass_mean, "mass_std": self.mass_std,
                "residual_scale": self.residual_scale.tolist()}

    @staticmethod
    def from_dict(raw: dict) -> "NormStats":
        return NormStats(np.array(raw["step_mean"]), np.array(raw["step_std"]),
                         np.array(raw["state_mean"]), np.array(raw["state_std"]),
                         float(raw["mass_mean"]), float(raw["mass_std"]),
                         np.array(raw["residual_scale"]))


@dataclass
class DynamicsInput:
    """Normalized network inputs; arrays may carry a leading batch axis."""

    hist_states: np.ndarray     # [*, T, 3]
    hist_controls: np.ndarray   # [*, T, 8]
    next_estimate: np.ndarray   # [*, 3]
    config_c: np.ndarray        # [*, 1]


def normalize_input(hist_states, hist_controls, next_estimate, mass,
                    stats: NormStats, dtype=np.float64) -> DynamicsInput:
    """z-score raw physical window arrays into a DynamicsInput.

    ``mass`` must already be shaped [*, 1] to match the leading dims of
    ``next_estimate``.
    """
    steps = np.concatenate([hist_states, hist_controls], axis=-1)
    steps = (steps - stats.step_mean) / stats.step_std
    nxt = (np.asarray(next_estimate) - stats.state_mean) / stats.state_std
    c = (np.asarray(mass, dtype=np.float64) - stats.mass_mean) / stats.mass_std
    return DynamicsInput(
        hist_states=steps[..., :STATE_DIM].astype(dtype),
        hist_controls=steps[..., STATE_DIM:].astype(dtype),
        next_estimate=np.asarray(nxt, dtype=dtype),
        config_c=np.asarray(c, dtype=dtype))


# ------------------------------------------------------------- parameters

def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), dtype=dtype)


def _embedding(rng, shape, dtype):
    scale = np.sqrt(3.0 / shape[-1])
    return Tensor(rng.uniform(-scale, scale, size=shape), dtype=dtype)


def _add_mlp(params, rng, prefix, dims, dtype):
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        params[f"{prefix}.w{i}"] = _xavier(rng, d_in, d_out, dtype)
        params[f"{prefix}.b{i}"] = _zeros(d_out, dtype)


def _add_attn_block(params, rng, prefix, c, ffn, dtype):
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{name}"] = _xavier(rng, c, c, dtype)
        params[f"{prefix}.attn.{name.replace('w', 'b')}"] = _zeros(c, dtype)
    params[f"{prefix}.ln1.g"] = _ones(c, dtype)
    params[f"{prefix}.ln1.b"] = _zeros(c, dtype)
    _add_mlp(params, rng, f"{prefix}.ffn", (c, ffn, c), dtype)
    params[f"{prefix}.ln2.g"] = _ones(c, dtype)
    params[f"{prefix}.ln2.b"] = _zeros(c, dtype)


def init_params(kind: str, config: DyTRConfig, seed: int,
                dtype=np.float64) -> dict[str, Tensor]:
    """Seeded parameter dictionary; draw order is fixed by construction."""
    rng = np.random.default_rng(seed)
    c, t, ffn = config.feature_dim, config.seq_len, config.ffn
    params: dict[str, Tensor] = {}
    if kind == "dytr":
        _add_mlp(params, rng, "enc", (STEP_DIM, c, c), dtype)
        params["pos_s"] = _embedding(rng, (t, c), dtype)
        for l in range(config.depth):
            _add_attn_block(params, rng, f"enc{l}", c, ffn, dtype)
        params["pos_q"] = _embedding(rng, (1, c), dtype)
        _add_mlp(params, rng, "query", (QUERY_DIM, c), dtype)
        for l in range(config.depth):
            _add_attn_block(params, rng, f"dec{l}", c, ffn, dtype)
        _add_mlp(params, rng, "head", (c, STATE_DIM), dtype)
    elif kind == "mlp":
        _add_mlp(params, rng, "feat", (STEP_DIM + QUERY_DIM, c, c), dtype)
        _add_mlp(params, rng, "fuse", (t * c, c, c), dtype)
        _add_mlp(params, rng, "head", (c, c, STATE_DIM), dtype)
    elif kind == "mlp-trans":
        _add_mlp(params, rng, "feat", (STEP_DIM + QUERY_DIM, c, c), dtype)
        params["pos_s"] = _embedding(rng, (t, c), dtype)
        for l in range(config.depth):
            _add_attn_block(params, rng, f"enc{l}", c, ffn, dtype)
        _add_mlp(params, rng, "head", (c, c, STATE_DIM), dtype)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


# ----------------------------------------------------------- forward pieces

def _mlp2(params, prefix, x):
    h = ad.relu(ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _mha(params, prefix, q_in, kv_in, num_heads):
    q = ad.linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = ad.linear(kv_in, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = ad.linear(kv_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    att = ad.attention(q, k, v, num_heads=num_heads)
    return ad.linear(att, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _block(params, prefix, x, kv, num_heads):
    """Post-norm Transformer block: attention + residual + LN, FFN + residual + LN."""
    att = _mha(params, f"{prefix}.attn", x, kv, num_heads)
    x = ad.layer_norm(ad.add(x, att), params[f"{prefix}.ln1.g"],
                      params[f"{prefix}.ln1.b"])
    ffn = _mlp2(params, f"{prefix}.ffn", x)
    return ad.layer_norm(ad.add(x, ffn), params[f"{prefix}.ln2.g"],
                         params[f"{prefix}.ln2.b"])


def encode_features(inp: DynamicsInput, params: dict) -> Tensor:
    """Per-step [state, control] -> feature vector, weights shared over time."""
    steps = np.concatenate([inp.hist_states, inp.hist_controls], axis=-1)
    return _mlp2(params, "enc", Tensor(steps))


def temporal_fuse(e_s: Tensor, params: dict, depth: int, num_heads: int) -> Tensor:
    """Add the learned temporal embedding, then run the encoder stack."""
    x = ad.add(e_s, params["pos_s"])
    for l in range(depth):
        x = _block(params, f"enc{l}", x, x, num_heads)
    return x


def make_query(next_estimate: Tensor, config_c: Tensor, params: dict,
               query_mode: str = "full") -> Tensor:
    """Project [next estimate, mass] to a single query token.

    Ablation modes zero one or both components without changing shapes.
    """
    if query_mode in ("none", "config_only"):
        next_estimate = ad.mul_const(next_estimate, 0.0)
    if query_mode in ("none", "state_only"):
        config_c = ad.mul_const(config_c, 0.0)
    q_in = ad.concat([next_estimate, config_c], axis=-1)
    q = ad.linear(q_in, params["query.w1"], params["query.b1"])
    return ad.reshape(q, q.data.shape[:-1] + (1, q.data.shape[-1]))


def decode_residual(q: Tensor, e_f: Tensor, params: dict, depth: int,
                    num_heads: int) -> Tensor:
    """Cross-attend the query token to the fused features, depth times.

    Self-attention over the single token is a no-op and is omitted.
    """
    x = ad.add(q, params["pos_q"])
    for l in range(depth):
        x = _block(params, f"dec{l}", x, e_f, num_heads)
    return x


def project_residual(q: Tensor, params: dict, stats: NormStats) -> Tensor:
    """Linear head, rescaled to physical units (scale only, no shift)."""
    flat = ad.reshape(q, q.data.shape[:-2] + (q.data.shape[-1],))
    out = ad.linear(flat, params["head.w1"], params["head.b1"])
    return ad.mul_const(out, stats.residual_scale)


def dytr_forward(inp: DynamicsInput, params: dict, config: DyTRConfig,
                 stats: NormStats) -> Tensor:
    e_s = encode_features(inp, params)
    e_f = temporal_fuse(e_s, params, config.depth, config.num_heads)
    q = make_query(Tensor(inp.next_estimate), Tensor(inp.config_c), params,
                   config.query_mode)
    q = decode_residual(q, e_f, params, config.depth, config.num_heads)
    return project_residual(q, params, stats)


def _per_step_with_query(inp: DynamicsInput) -> np.ndarray:
    """Baseline feature input: next estimate and mass appended to every step."""
    t = inp.hist_states.shape[-2]
    nxt = np.repeat(np.expand_dims(inp.next_estimate, -2), t, axis=-2)
    c = np.repeat(np.expand_dims(inp.config_c, -2), t, axis=-2)
    return np.concatenate([inp.hist_states, inp.hist_controls, nxt, c], axis=-1)


def baseline_mlp_forward(inp: DynamicsInput, params: dict, config: DyTRConfig,
                         stats: NormStats) -> Tensor:
    feats = _mlp2(params, "feat", Tensor(_per_step_with_query(inp)))
    flat = ad.reshape(feats, feats.data.shape[:-2]
                      + (feats.data.shape[-2] * feats.data.shape[-1],))
    fused = _mlp2(params, "fuse", flat)
    out = _mlp2(params, "head", fused)
    return ad.mul_const(out, stats.residual_scale)


def baseline_mlp_trans_forward(inp: DynamicsInput, params: dict,
                               config: DyTRConfig, stats: NormStats) -> Tensor:
    feats = _mlp2(params, "feat", Tensor(_per_step_with_query(inp)))
    e_f = temporal_fuse(feats, params, config.depth, config.num_heads)
    pooled = ad.mean(e_f, axis=-2)
    out = _mlp2(params, "head", pooled)
    return ad.mul_const(out, stats.residual_scale)


_FORWARDS = {
    "dytr": dytr_forward,
    "mlp": baseline_mlp_forward,
    "mlp-trans": baseline_mlp_trans_forward,
}

MODEL_KINDS = tuple(_FORWARDS)


# ------------------------------------------------------------------- model

@dataclass
class ResidualModel:
    """A parameterized corrector: kind, config, normalization, parameters."""

    kind: str
    config: DyTRConfig
    stats: NormStats
    params: dict[str, Tensor] = field(default_factory=dict)

    @staticmethod
    def create(kind: str, config: DyTRConfig, stats: NormStats | None = None,
               seed: int = 0, dtype=np.float64) -> "ResidualModel":
        if kind not in _FORWARDS:
            raise ValueError(f"unknown model kind {kind!r}; pick from {MODEL_KINDS}")
        stats = stats if stats is not None else NormStats.identity()
        return ResidualModel(kind, config, stats,
                             init_params(kind, config, seed, dtype))

    def forward(self, inp: DynamicsInput) -> Tensor:
        """Physical-units residual prediction; records on any active tape."""
        return _FORWARDS[self.kind](inp, self.params, self.config, self.stats)

    def predict(self, hist_states, hist_controls, next_estimate, mass) -> np.ndarray:
        """Tape-free forward from raw physical arrays."""
        dtype = next(iter(self.params.values())).data.dtype
        inp = normalize_input(hist_states, hist_controls, next_estimate,
                              np.asarray(mass).reshape(-1, 1), self.stats, dtype)
        return self.forward(inp).data

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return param_count(self.params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path: str, model: ResidualModel, meta: dict | None = None) -> None:
    """JSON checkpoint; float64 values round-trip bit-exactly through text."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "dtype": str(model.dtype),
        "config": model.config.to_dict(),
        "normalization_stats": model.stats.to_dict(),
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.data.shape),
                   "values": [float(v) for v in p.data.reshape(-1)]}
            for name, p in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path: str) -> ResidualModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    config = DyTRConfig.from_dict(payload["config"])
    stats = NormStats.from_dict(payload["normalization_stats"])
    dtype = np.float32 if payload["dtype"] == "float32" else np.float64
    model = ResidualModel(payload["kind"], config, stats, {})
    reference = init_params(model.kind, config, seed=0, dtype=dtype)
    for name, ref in reference.items():
        if name not in payload["params"]:
            raise ValueError(f"checkpoint missing parameter {name}")
        entry = payload["params"][name]
        arr = np.array(entry["values"], dtype=dtype).reshape(entry["shape"])
        if arr.shape != ref.data.shape:
            raise ValueError(f"checkpoint parameter {name} has shape "
                             f"{arr.shape}, expected {ref.data.shape}")
        model.params[name] = Tensor(arr, dtype=dtype)
    return model
