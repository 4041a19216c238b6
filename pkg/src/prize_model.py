# src/prize_model.py
"""
Statistical layer of the ML-CO policy: turns a state into one prize per
customer for the CPCTSP oracle.

    Q_p          empirical quantiles of each customer's demand history
    phi1         ReLU(Q_p + w1.Phi_t + Phi_t' W2 Phi_t), per look-ahead period t
    cum_{p,h}    sum of phi1 over periods 0..h
    theta_i      sum_{p,h} w3[h,p] kappa_i ReLU(I_i - cum)
                 + sum_{p,h} w4[h,p] kappa_i rho ReLU(cum - I_i)

W2 is symmetric with a zero diagonal and is parameterised by its strict
upper triangle. Gradients are computed by hand in reverse mode; the ReLU
derivative at 0 is 0.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from config import DEFAULT_QUANTILES
from errors import RejectedInputError, SchemaError
from instance_generator import N_FEATURES, Instance
from inventory_mdp import State

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class QuantileConfig:
    levels: Tuple[float, ...] = DEFAULT_QUANTILES
    horizon: int = 6

    def __post_init__(self):
        levels = tuple(float(p) for p in self.levels)
        if not levels or any(not 0.0 < p < 1.0 for p in levels):
            raise RejectedInputError(f"quantile levels must lie in (0, 1), got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise RejectedInputError(f"quantile levels must be strictly increasing, got {levels}")
        if self.horizon < 1:
            raise RejectedInputError("look-ahead horizon must be >= 1")
        object.__setattr__(self, "levels", levels)

    @property
    def P(self) -> int:
        return len(self.levels)

    @property
    def H(self) -> int:
        return self.horizon


def _n_pairs(n_features: int) -> int:
    return n_features * (n_features - 1) // 2


@dataclass(eq=False)
class ModelParams:
    """w1 (F,), w2 strict upper triangle (F(F-1)/2,), w3 and w4 (H, P)"""
    w1: np.ndarray
    w2_upper: np.ndarray
    w3: np.ndarray
    w4: np.ndarray

    def __post_init__(self):
        self.w1 = np.array(self.w1, dtype=float)
        self.w2_upper = np.array(self.w2_upper, dtype=float)
        self.w3 = np.array(self.w3, dtype=float)
        self.w4 = np.array(self.w4, dtype=float)
        if self.w2_upper.size != _n_pairs(self.w1.size):
            raise RejectedInputError("w2 upper triangle does not match the feature count")
        if self.w3.shape != self.w4.shape or self.w3.ndim != 2:
            raise RejectedInputError("w3 and w4 must both be H x P")
        for name in ("w1", "w2_upper", "w3", "w4"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise RejectedInputError(f"{name} must be finite")

    @classmethod
    def initial(cls, config: QuantileConfig, n_features: int = N_FEATURES) -> "ModelParams":
        """w1 = w2 = 0; w3 = -1/(P H) on holding, w4 = +1/(P H) on stock-outs"""
        scale = 1.0 / (config.P * config.H)
        return cls(np.zeros(n_features), np.zeros(_n_pairs(n_features)),
                   np.full((config.H, config.P), -scale), np.full((config.H, config.P), scale))

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(np.zeros_like(other.w1), np.zeros_like(other.w2_upper),
                   np.zeros_like(other.w3), np.zeros_like(other.w4))

    @property
    def n_features(self) -> int:
        return self.w1.size

    def w2_matrix(self) -> np.ndarray:
        """Symmetric zero-diagonal W2"""
        F = self.n_features
        W2 = np.zeros((F, F))
        W2[np.triu_indices(F, k=1)] = self.w2_upper
        return W2 + W2.T

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1, self.w2_upper, self.w3.ravel(), self.w4.ravel()])

    def from_vector(self, vector: np.ndarray) -> "ModelParams":
        """New parameters with this record's shapes"""
        vector = np.asarray(vector, dtype=float)
        sizes = np.cumsum([self.w1.size, self.w2_upper.size, self.w3.size, self.w4.size])
        if vector.size != sizes[-1]:
            raise RejectedInputError(f"expected a vector of {sizes[-1]} parameters, got {vector.size}")
        w1, w2, w3, w4, _ = np.split(vector, sizes)
        return ModelParams(w1, w2, w3.reshape(self.w3.shape), w4.reshape(self.w4.shape))

    def copy(self) -> "ModelParams":
        return self.from_vector(self.to_vector())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ModelParams) and self.w3.shape == other.w3.shape \
            and np.array_equal(self.to_vector(), other.to_vector())


def empirical_quantile(history: Sequence[float], p: float) -> float:
    """inf{d in history : F(d) >= p} for the empirical CDF F of the multiset"""
    values = np.sort(np.asarray(history, dtype=float).ravel())
    if values.size == 0:
        raise RejectedInputError("empirical quantile of an empty history")
    if not 0.0 < p < 1.0:
        raise RejectedInputError(f"quantile level must lie in (0, 1), got {p}")
    cdf = np.arange(1, values.size + 1) / values.size
    return float(values[int(np.searchsorted(cdf, p, side="left"))])


def quantile_matrix(history: np.ndarray, levels: Sequence[float]) -> np.ndarray:
    """Q[i, p] for every customer row of an n x L history"""
    history = np.asarray(history, dtype=float)
    if history.ndim != 2 or history.shape[1] == 0:
        raise RejectedInputError("history must be a non-empty n x L matrix")
    ordered = np.sort(history, axis=1)
    cdf = np.arange(1, history.shape[1] + 1) / history.shape[1]
    positions = np.searchsorted(cdf, np.asarray(levels, dtype=float), side="left")
    return ordered[:, positions]


def phi1(q: float, features: Optional[np.ndarray], params: ModelParams) -> float:
    """Demand estimate for one quantile and one period"""
    if features is None:
        return max(float(q), 0.0)
    features = np.asarray(features, dtype=float)
    if features.shape != (params.n_features,):
        raise RejectedInputError(f"expected {params.n_features} features, got shape {features.shape}")
    value = float(q) + float(params.w1 @ features) + float(features @ params.w2_matrix() @ features)
    return max(value, 0.0)


def _features(state: State, instance: Instance, params: ModelParams, config: QuantileConfig) -> Optional[np.ndarray]:
    if not instance.is_contextual:
        return None
    window = state.context_window
    if window is None or window.shape[0] < config.H:
        have = 0 if window is None else window.shape[0]
        raise RejectedInputError(f"state at t={state.t} has context for {have} of {config.H} look-ahead periods")
    if window.shape[1] != params.n_features:
        raise RejectedInputError(f"context has {window.shape[1]} features, model expects {params.n_features}")
    return window[:config.H]


def _check_shapes(state: State, instance: Instance, params: ModelParams, config: QuantileConfig):
    if params.w3.shape != (config.H, config.P):
        raise RejectedInputError(f"params are {params.w3.shape}, config expects ({config.H}, {config.P})")
    if state.n != instance.n:
        raise RejectedInputError("state and instance disagree on n")


@dataclass
class _Tape:
    features: Optional[np.ndarray]
    pre: np.ndarray      # n x P x H, argument of the phi1 ReLU
    cum: np.ndarray      # n x P x H
    hold: np.ndarray     # n x P x H, ReLU(I - cum)
    short: np.ndarray    # n x P x H, ReLU(cum - I)
    theta: np.ndarray


def _forward(state: State, instance: Instance, params: ModelParams, config: QuantileConfig) -> _Tape:
    _check_shapes(state, instance, params, config)
    features = _features(state, instance, params, config)
    Q = quantile_matrix(state.history, config.levels)
    if features is None:
        shift = np.zeros(config.H)
    else:
        shift = features @ params.w1 + np.einsum("ta,ab,tb->t", features, params.w2_matrix(), features)
    pre = Q[:, :, None] + shift[None, None, :]
    cum = np.cumsum(np.maximum(pre, 0.0), axis=2)
    inventories = state.inventories[:, None, None]
    hold = np.maximum(inventories - cum, 0.0)
    short = np.maximum(cum - inventories, 0.0)
    kappa = instance.kappa
    # w3/w4 are indexed [h, p]; tape arrays are [i, p, h]
    phi2 = kappa * np.einsum("iph,hp->i", hold, params.w3)
    phi3 = kappa * instance.rho * np.einsum("iph,hp->i", short, params.w4)
    return _Tape(features, pre, cum, hold, short, phi2 + phi3)


def prize_forward(state: State, instance: Instance, params: ModelParams, config: QuantileConfig) -> np.ndarray:
    """One prize per customer"""
    return _forward(state, instance, params, config).theta


def prize_backward(state: State, instance: Instance, params: ModelParams, config: QuantileConfig,
                   dtheta: np.ndarray) -> ModelParams:
    """Gradient of theta . dtheta with respect to every parameter"""
    tape = _forward(state, instance, params, config)
    dtheta = np.asarray(dtheta, dtype=float)
    if dtheta.shape != (instance.n,):
        raise RejectedInputError(f"dtheta must have {instance.n} entries")
    kappa = instance.kappa
    hold_up = (dtheta * kappa)[:, None, None]
    short_up = (dtheta * kappa * instance.rho)[:, None, None]

    grad = ModelParams.zeros_like(params)
    grad.w3 = np.einsum("iph->hp", hold_up * tape.hold)
    grad.w4 = np.einsum("iph->hp", short_up * tape.short)
    if tape.features is None:
        return grad

    inventories = state.inventories[:, None, None]
    w3 = params.w3.T[None, :, :]
    w4 = params.w4.T[None, :, :]
    dcum = (-hold_up * w3 * (inventories - tape.cum > 0)
            + short_up * w4 * (tape.cum - inventories > 0))
    # cum_h = sum_{t<=h} phi1_t  =>  dphi1_t = sum_{h>=t} dcum_h
    dphi1 = np.flip(np.cumsum(np.flip(dcum, axis=2), axis=2), axis=2)
    dshift = np.einsum("ipt->t", dphi1 * (tape.pre > 0))
    features = tape.features
    grad.w1 = features.T @ dshift
    rows, cols = np.triu_indices(params.n_features, k=1)
    grad.w2_upper = 2.0 * np.einsum("t,ta,ta->a", dshift, features[:, rows], features[:, cols])
    return grad


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, config: QuantileConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "schema_version": SCHEMA_VERSION,
        "P": list(config.levels),
        "H": config.H,
        "w1": params.w1.tolist(),
        "w2_upper_triangle": params.w2_upper.tolist(),
        "w3": params.w3.tolist(),
        "w4": params.w4.tolist(),
    }
    path.write_text(json.dumps(document, indent=2))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, QuantileConfig]:
    try:
        data: Dict[str, Any] = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", str(path)) from e
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object", str(path))
    expected = {"schema_version", "P", "H", "w1", "w2_upper_triangle", "w3", "w4"}
    missing = sorted(expected - set(data))
    if missing:
        raise SchemaError("missing field", missing[0])
    unknown = sorted(set(data) - expected)
    if unknown:
        raise SchemaError("unknown field", unknown[0])
    if data["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"unsupported version {data['schema_version']}", "schema_version")
    try:
        config = QuantileConfig(tuple(data["P"]), int(data["H"]))
        params = ModelParams(data["w1"], data["w2_upper_triangle"], data["w3"], data["w4"])
    except (TypeError, ValueError) as e:
        raise SchemaError(str(e), str(path)) from e
    if params.w3.shape != (config.H, config.P):
        raise SchemaError(f"expected shape ({config.H}, {config.P})", "w3")
    return params, config
