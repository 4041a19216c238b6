# src/instance_generator.py
"""
Synthetic DSIRP instances and demand episodes.

Four demand patterns are supported (normal, uniform, bimodal, contextual).
Every artifact is a pure function of its inputs and an integer seed fed to
numpy's PCG64 generator (``np.random.default_rng``), so any worker can
regenerate it without shared state.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.spatial import distance

from errors import RejectedInputError, SchemaError

logger = logging.getLogger(__name__)

PATTERNS = ("normal", "uniform", "bimodal", "contextual")
PENALTIES = {"low": 200.0, "high": 400.0}
HISTORY_LENGTH = 50
N_FEATURES = 8
FEATURE_DISTRIBUTIONS = ("arcsin", "uniform", "truncated-normal")
GRID_MAX = 500
DEFAULT_BIMODAL_MIX = 0.5
# truncated-normal features live on [-1, 1] with this standard deviation
FEATURE_TRUNCNORM_SIGMA = 0.5


@dataclass(frozen=True)
class NormalDemand:
    mu: float
    sigma: float
    kind: ClassVar[str] = "normal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise RejectedInputError(f"normal demand needs sigma > 0, got {self.sigma}")


@dataclass(frozen=True)
class UniformDemand:
    upper: float
    kind: ClassVar[str] = "uniform"

    def __post_init__(self):
        if self.upper < 0:
            raise RejectedInputError(f"uniform demand needs upper >= 0, got {self.upper}")


@dataclass(frozen=True)
class BimodalDemand:
    mu1: float
    sigma1: float
    mu2: float
    sigma2: float
    mix: float = DEFAULT_BIMODAL_MIX
    kind: ClassVar[str] = "bimodal"

    def __post_init__(self):
        if not self.mu1 < self.mu2:
            raise RejectedInputError(f"bimodal demand needs mu1 < mu2, got {self.mu1} >= {self.mu2}")
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise RejectedInputError("bimodal demand needs positive sigmas")
        if not 0.0 < self.mix < 1.0:
            raise RejectedInputError(f"bimodal mix must lie in (0, 1), got {self.mix}")


@dataclass(frozen=True)
class ContextualDemand:
    mu: float
    noise_sigma: float
    kind: ClassVar[str] = "contextual"

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise RejectedInputError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


DemandSpec = Union[NormalDemand, UniformDemand, BimodalDemand, ContextualDemand]

_DEMAND_TYPES = {cls.kind: cls for cls in (NormalDemand, UniformDemand, BimodalDemand, ContextualDemand)}
_DEMAND_FIELDS = {
    "normal": ("mu", "sigma"),
    "uniform": ("upper",),
    "bimodal": ("mu1", "sigma1", "mu2", "sigma2", "mix"),
    "contextual": ("mu", "noise_sigma"),
}


@dataclass(frozen=True)
class ContextSpec:
    """Feature generator shared by all customers of a contextual instance"""
    informative_mask: Tuple[bool, ...]
    feature_dist: Tuple[str, ...]
    scale: Tuple[float, ...]
    alpha_lin: Tuple[float, ...]
    alpha_pair: Tuple[Tuple[float, ...], ...]
    n_features: int = N_FEATURES

    def __post_init__(self):
        k = self.n_features
        for name in ("informative_mask", "feature_dist", "scale", "alpha_lin"):
            if len(getattr(self, name)) != k:
                raise RejectedInputError(f"context {name} must have {k} entries")
        if any(tag not in FEATURE_DISTRIBUTIONS for tag in self.feature_dist):
            raise RejectedInputError(f"unknown feature distribution in {self.feature_dist}")
        pair = np.asarray(self.alpha_pair, dtype=float)
        if pair.shape != (k, k) or not np.array_equal(pair, pair.T) or np.any(np.diag(pair) != 0):
            raise RejectedInputError("alpha_pair must be a symmetric zero-diagonal matrix")
        for i, informative in enumerate(self.informative_mask):
            if not informative and self.alpha_lin[i] != 0:
                raise RejectedInputError(f"non-informative feature {i} has a linear coefficient")

    def pair_upper(self) -> np.ndarray:
        """Strict upper triangle of alpha_pair; sums each unordered pair once"""
        return np.triu(np.asarray(self.alpha_pair, dtype=float), k=1)

    def sample_features(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` feature vectors, returned as an (n_features, size) matrix"""
        features = np.empty((self.n_features, size))
        for f, tag in enumerate(self.feature_dist):
            if tag == "arcsin":
                raw = 2.0 * stats.arcsine.rvs(size=size, random_state=rng) - 1.0
            elif tag == "uniform":
                raw = rng.uniform(-1.0, 1.0, size=size)
            else:
                bound = 1.0 / FEATURE_TRUNCNORM_SIGMA
                raw = stats.truncnorm.rvs(-bound, bound, loc=0.0, scale=FEATURE_TRUNCNORM_SIGMA,
                                          size=size, random_state=rng)
            features[f] = raw * self.scale[f]
        return features


@dataclass(eq=False)
class Instance:
    id: str
    n: int
    coords: np.ndarray
    gamma: np.ndarray
    C: np.ndarray
    I0: np.ndarray
    kappa: np.ndarray
    rho: float
    B: float
    demand: Tuple[DemandSpec, ...]
    context: Optional[ContextSpec] = None

    @property
    def is_contextual(self) -> bool:
        return self.context is not None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "id": self.id,
            "n": self.n,
            "coords": self.coords.tolist(),
            "gamma": self.gamma.tolist(),
            "C": self.C.tolist(),
            "I0": self.I0.tolist(),
            "kappa": self.kappa.tolist(),
            "rho": self.rho,
            "B": self.B,
            "demand_spec": [_demand_to_dict(spec) for spec in self.demand],
        }
        if self.context is not None:
            data["context_spec"] = _context_to_dict(self.context)
        return data

    @classmethod
    def from_dict(cls, data: Any) -> "Instance":
        _check_keys(data, required=("id", "n", "coords", "gamma", "C", "I0", "kappa", "rho", "B", "demand_spec"),
                    optional=("context_spec",), path="")
        if not isinstance(data["id"], str):
            raise SchemaError("expected a string", "id")
        n = _as_int(data["n"], "n")
        if n < 1:
            raise SchemaError("expected a positive customer count", "n")
        coords = _as_array(data["coords"], (n + 1, 2), "coords")
        gamma = _as_array(data["gamma"], (n + 1, n + 1), "gamma")
        demand_raw = data["demand_spec"]
        if not isinstance(demand_raw, list) or len(demand_raw) != n:
            raise SchemaError(f"expected a list of {n} demand specs", "demand_spec")
        demand = tuple(_demand_from_dict(entry, f"demand_spec[{i}]") for i, entry in enumerate(demand_raw))
        context = None
        if "context_spec" in data:
            context = _context_from_dict(data["context_spec"], "context_spec")
        return cls(
            id=data["id"], n=n,
            coords=coords.astype(int), gamma=gamma,
            C=_as_array(data["C"], (n,), "C"),
            I0=_as_array(data["I0"], (n,), "I0"),
            kappa=_as_array(data["kappa"], (n,), "kappa"),
            rho=_as_float(data["rho"], "rho"),
            B=_as_float(data["B"], "B"),
            demand=demand, context=context,
        )

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Instance) and self.to_dict() == other.to_dict()


@dataclass(eq=False)
class Episode:
    """Exogenous noise over T periods; also the storage format of histories"""
    T: int
    demand: np.ndarray
    context: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {"T": self.T, "demand": self.demand.tolist()}
        if self.context is not None:
            data["context"] = self.context.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Any) -> "Episode":
        _check_keys(data, required=("T", "demand"), optional=("context",), path="")
        T = _as_int(data["T"], "T")
        if T < 1:
            raise SchemaError("expected T >= 1", "T")
        demand = np.asarray(_as_matrix(data["demand"], "demand"))
        if demand.shape[1] != T:
            raise SchemaError(f"expected {T} columns, got {demand.shape[1]}", "demand")
        context = None
        if "context" in data:
            context = _as_matrix(data["context"], "context")
            if context.shape[0] != N_FEATURES or context.shape[1] < T:
                raise SchemaError(f"expected {N_FEATURES} rows and at least {T} columns", "context")
        return cls(T=T, demand=demand, context=context)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Episode) and self.to_dict() == other.to_dict()


class InstanceGenerator:
    def __init__(self, bimodal_mix: float = DEFAULT_BIMODAL_MIX,
                 scale_choices: Sequence[int] = tuple(range(10, 101))):
        self.bimodal_mix = bimodal_mix
        # feature scale factor is sqrt(k) with k drawn from these integers
        self.scale_choices = tuple(scale_choices)
        self.generation_history: List[Dict[str, Any]] = []

    def generate_instance(self, pattern: str, n: int, penalty: str, seed: int) -> Instance:
        """
        Draw one instance following the instance-design rules.

        Args:
            pattern: one of PATTERNS
            n: number of customers (>= 2)
            penalty: 'low' (rho=200) or 'high' (rho=400)
            seed: integer seed; same inputs give bit-identical instances
        """
        if pattern not in PATTERNS:
            raise RejectedInputError(f"unknown demand pattern '{pattern}', expected one of {PATTERNS}")
        if penalty not in PENALTIES:
            raise RejectedInputError(f"unknown penalty level '{penalty}', expected 'low' or 'high'")
        if n < 2:
            raise RejectedInputError(f"an instance needs at least 2 customers, got {n}")

        rng = np.random.default_rng(seed)
        coords = rng.integers(0, GRID_MAX + 1, size=(n + 1, 2))
        gamma = distance.cdist(coords, coords)

        demand: List[DemandSpec] = []
        capacity = np.empty(n)
        proxy = np.empty(n)
        for i in range(n):
            multiple = int(rng.integers(2, 5))
            if pattern == "bimodal":
                mean_gap = int(rng.integers(4, 21))
                mu1 = int(rng.integers(10, 50 - mean_gap + 1))
                mu2 = int(rng.integers(50 - mean_gap, 101))
                while mu2 <= mu1:
                    mu2 = int(rng.integers(50 - mean_gap, 101))
                sigma1 = int(rng.integers(2, 11))
                sigma2 = int(rng.integers(2, 11))
                proxy[i] = (mu1 + mu2) / 2.0
                capacity[i] = proxy[i] * multiple
                demand.append(BimodalDemand(float(mu1), float(sigma1), float(mu2), float(sigma2), self.bimodal_mix))
            else:
                mu = int(rng.integers(10, 101))
                sigma = int(rng.integers(2, 11))
                proxy[i] = float(mu)
                capacity[i] = float(mu * multiple)
                if pattern == "normal":
                    demand.append(NormalDemand(float(mu), float(sigma)))
                elif pattern == "uniform":
                    demand.append(UniformDemand(capacity[i] / 2.0))
                else:
                    demand.append(ContextualDemand(float(mu), float(sigma)))

        kappa = rng.uniform(0.02, 0.10, size=n)
        context = self._draw_context(rng) if pattern == "contextual" else None

        instance = Instance(
            id=f"{pattern}_{penalty}_n{n}_s{seed}",
            n=n, coords=coords, gamma=gamma,
            C=capacity, I0=capacity - proxy, kappa=kappa,
            rho=PENALTIES[penalty], B=1.5 * float(proxy.sum()),
            demand=tuple(demand), context=context,
        )
        self.generation_history.append({"id": instance.id, "pattern": pattern, "n": n, "seed": seed})
        logger.debug("generated instance %s (B=%.1f)", instance.id, instance.B)
        return instance

    def _draw_context(self, rng: np.random.Generator) -> ContextSpec:
        k = N_FEATURES
        informative_count = int(rng.integers(2, 7))
        mask = np.zeros(k, dtype=bool)
        mask[rng.permutation(k)[:informative_count]] = True
        dist = tuple(FEATURE_DISTRIBUTIONS[int(j)] for j in rng.integers(0, len(FEATURE_DISTRIBUTIONS), size=k))
        scale = tuple(math.sqrt(self.scale_choices[int(j)])
                      for j in rng.integers(0, len(self.scale_choices), size=k))
        alpha_lin = np.where(mask, rng.uniform(-1.0, 1.0, size=k), 0.0)
        pair = np.zeros((k, k))
        for a in range(k):
            for b in range(a + 1, k):
                coefficient = rng.uniform(-1.0, 1.0)
                # each pair is non-informative with probability 1/2
                if rng.random() < 0.5:
                    coefficient = 0.0
                pair[a, b] = pair[b, a] = coefficient
        return ContextSpec(
            informative_mask=tuple(bool(x) for x in mask),
            feature_dist=dist,
            scale=scale,
            alpha_lin=tuple(float(x) for x in alpha_lin),
            alpha_pair=tuple(tuple(float(x) for x in row) for row in pair),
        )

    def sample_episode(self, instance: Instance, T: int, seed: int, context_padding: int = 0) -> Episode:
        """
        Sample T periods of demand (n x T). Contextual instances also get
        T + context_padding shared feature vectors so late states still see
        a full look-ahead window.
        """
        if T < 1:
            raise RejectedInputError(f"an episode needs T >= 1, got {T}")
        if context_padding < 0:
            raise RejectedInputError("context_padding must be >= 0")
        rng = np.random.default_rng(seed)
        features = None
        if instance.is_contextual:
            features = instance.context.sample_features(rng, T + context_padding)
        demand = np.empty((instance.n, T))
        for i, spec in enumerate(instance.demand):
            demand[i] = _sample_series(spec, instance.C[i], rng, T,
                                       None if features is None else features[:, :T], instance.context)
        return Episode(T=T, demand=demand, context=features)

    def sample_history(self, instance: Instance, length: int = HISTORY_LENGTH, seed: int = 0) -> Episode:
        """Historical observations, oldest first, drawn from the same law as episodes"""
        if length < 1:
            raise RejectedInputError(f"history length must be >= 1, got {length}")
        return self.sample_episode(instance, length, seed)

    def get_generation_stats(self) -> Dict[str, Any]:
        patterns = [record["pattern"] for record in self.generation_history]
        return {
            "total_instances": len(self.generation_history),
            "per_pattern": {p: patterns.count(p) for p in sorted(set(patterns))},
        }


def contextual_value(spec: ContextualDemand, features: np.ndarray, context: ContextSpec) -> float:
    """Linear + pairwise contextual demand before noise and clamping"""
    features = np.asarray(features, dtype=float)
    if features.shape != (context.n_features,):
        raise RejectedInputError(f"expected {context.n_features} features, got shape {features.shape}")
    linear = float(np.dot(context.alpha_lin, features))
    pairwise = float(features @ context.pair_upper() @ features)
    return spec.mu + linear + pairwise


def sample_demand(spec: DemandSpec, capacity: float, rng: np.random.Generator,
                  context_features: Optional[np.ndarray] = None,
                  context: Optional[ContextSpec] = None) -> float:
    """Draw one demand value in [0, capacity] for a single customer"""
    if isinstance(spec, ContextualDemand):
        if context_features is None or context is None:
            raise RejectedInputError("contextual demand needs the period's features and the context spec")
        value = contextual_value(spec, context_features, context) + rng.normal(0.0, spec.noise_sigma)
        return float(min(max(value, 0.0), capacity))
    if context_features is not None:
        raise RejectedInputError(f"{spec.kind} demand does not take context features")
    return float(_sample_series(spec, capacity, rng, 1, None, None)[0])


def _truncated_normal(mu: float, sigma: float, capacity: float, rng: np.random.Generator, size: int) -> np.ndarray:
    a, b = (0.0 - mu) / sigma, (capacity - mu) / sigma
    return stats.truncnorm.rvs(a, b, loc=mu, scale=sigma, size=size, random_state=rng)


def _sample_series(spec: DemandSpec, capacity: float, rng: np.random.Generator, size: int,
                   features: Optional[np.ndarray], context: Optional[ContextSpec]) -> np.ndarray:
    if isinstance(spec, NormalDemand):
        values = _truncated_normal(spec.mu, spec.sigma, capacity, rng, size)
    elif isinstance(spec, UniformDemand):
        values = rng.uniform(0.0, spec.upper, size=size)
    elif isinstance(spec, BimodalDemand):
        first = rng.random(size) < spec.mix
        low = _truncated_normal(spec.mu1, spec.sigma1, capacity, rng, size)
        high = _truncated_normal(spec.mu2, spec.sigma2, capacity, rng, size)
        values = np.where(first, low, high)
    else:
        linear = np.asarray(context.alpha_lin) @ features
        pairwise = np.einsum("at,ab,bt->t", features, context.pair_upper(), features)
        values = spec.mu + linear + pairwise + rng.normal(0.0, spec.noise_sigma, size=size)
    return np.clip(values, 0.0, capacity)


# ---------------------------------------------------------------------------
# persistence: one JSON document per instance / episode

def save_instance(instance: Instance, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(instance.to_dict(), indent=1))
    return path


def load_instance(path: Union[str, Path]) -> Instance:
    return Instance.from_dict(_read_json(path))


def save_episode(episode: Episode, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(episode.to_dict()))
    return path


def load_episode(path: Union[str, Path]) -> Episode:
    return Episode.from_dict(_read_json(path))


def _read_json(path: Union[str, Path]) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid or truncated JSON in {path}: {e.msg}") from e


def _check_keys(data: Any, required: Sequence[str], optional: Sequence[str], path: str):
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object", path)
    for key in data:
        if key not in required and key not in optional:
            raise SchemaError("unknown field", _join(path, key))
    for key in required:
        if key not in data:
            raise SchemaError("missing required field", _join(path, key))


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _as_int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError("expected an integer", path)
    return value


def _as_float(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SchemaError("expected a finite number", path)
    return float(value)


def _as_matrix(value: Any, path: str) -> np.ndarray:
    if not isinstance(value, list) or not value or not all(isinstance(row, list) for row in value):
        raise SchemaError("expected a non-empty list of rows", path)
    width = len(value[0])
    for r, row in enumerate(value):
        if len(row) != width:
            raise SchemaError("ragged matrix", f"{path}[{r}]")
        for c, x in enumerate(row):
            _as_float(x, f"{path}[{r}][{c}]")
    return np.asarray(value, dtype=float)


def _as_array(value: Any, shape: Tuple[int, ...], path: str) -> np.ndarray:
    if len(shape) == 1:
        if not isinstance(value, list) or len(value) != shape[0]:
            raise SchemaError(f"expected a list of {shape[0]} numbers", path)
        return np.asarray([_as_float(x, f"{path}[{i}]") for i, x in enumerate(value)])
    matrix = _as_matrix(value, path)
    if matrix.shape != shape:
        raise SchemaError(f"expected shape {shape}, got {matrix.shape}", path)
    return matrix


def _demand_to_dict(spec: DemandSpec) -> Dict[str, Any]:
    data = {"kind": spec.kind}
    for name in _DEMAND_FIELDS[spec.kind]:
        data[name] = getattr(spec, name)
    return data


def _demand_from_dict(data: Any, path: str) -> DemandSpec:
    if not isinstance(data, dict) or data.get("kind") not in _DEMAND_TYPES:
        raise SchemaError(f"expected an object with kind in {tuple(_DEMAND_TYPES)}", _join(path, "kind"))
    kind = data["kind"]
    fields = _DEMAND_FIELDS[kind]
    _check_keys(data, required=("kind",) + fields, optional=(), path=path)
    values = {name: _as_float(data[name], _join(path, name)) for name in fields}
    try:
        return _DEMAND_TYPES[kind](**values)
    except RejectedInputError as e:
        raise SchemaError(str(e), path) from e


def _context_to_dict(context: ContextSpec) -> Dict[str, Any]:
    return {
        "n_features": context.n_features,
        "informative_mask": list(context.informative_mask),
        "feature_dist": list(context.feature_dist),
        "scale": list(context.scale),
        "alpha_lin": list(context.alpha_lin),
        "alpha_pair": [list(row) for row in context.alpha_pair],
    }


def _context_from_dict(data: Any, path: str) -> ContextSpec:
    fields = ("n_features", "informative_mask", "feature_dist", "scale", "alpha_lin", "alpha_pair")
    _check_keys(data, required=fields, optional=(), path=path)
    k = _as_int(data["n_features"], _join(path, "n_features"))
    mask = data["informative_mask"]
    if not isinstance(mask, list) or len(mask) != k or not all(isinstance(x, bool) for x in mask):
        raise SchemaError(f"expected {k} booleans", _join(path, "informative_mask"))
    dist = data["feature_dist"]
    if not isinstance(dist, list) or len(dist) != k or any(tag not in FEATURE_DISTRIBUTIONS for tag in dist):
        raise SchemaError(f"expected {k} tags from {FEATURE_DISTRIBUTIONS}", _join(path, "feature_dist"))
    scale = _as_array(data["scale"], (k,), _join(path, "scale"))
    alpha_lin = _as_array(data["alpha_lin"], (k,), _join(path, "alpha_lin"))
    alpha_pair = _as_array(data["alpha_pair"], (k, k), _join(path, "alpha_pair"))
    try:
        return ContextSpec(
            informative_mask=tuple(mask), feature_dist=tuple(dist),
            scale=tuple(float(x) for x in scale), alpha_lin=tuple(float(x) for x in alpha_lin),
            alpha_pair=tuple(tuple(float(x) for x in row) for row in alpha_pair), n_features=k,
        )
    except RejectedInputError as e:
        raise SchemaError(str(e), path) from e


_default_generator = InstanceGenerator()


def generate_instance(pattern: str, n: int, penalty: str, seed: int) -> Instance:
    return _default_generator.generate_instance(pattern, n, penalty, seed)


def sample_episode(instance: Instance, T: int, seed: int, context_padding: int = 0) -> Episode:
    return _default_generator.sample_episode(instance, T, seed, context_padding)


def sample_history(instance: Instance, length: int = HISTORY_LENGTH, seed: int = 0) -> Episode:
    return _default_generator.sample_history(instance, length, seed)


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed derived from a tuple of integers (manifest seeds)"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class BatchSeeds:
    instance: int
    history: int
    validation: Tuple[int, ...]
    evaluation: Tuple[int, ...]


def instance_batch_seeds(seed: int, pattern_index: int, k: int, validation_episodes: int = 5,
                         evaluation_episodes: int = 10) -> BatchSeeds:
    """All seeds of the k-th instance of one pattern, regenerable from the manifest"""
    base = derive_seed(seed, pattern_index, k)
    return BatchSeeds(
        instance=base,
        history=derive_seed(base, 1),
        validation=tuple(derive_seed(base, 2, j) for j in range(validation_episodes)),
        evaluation=tuple(derive_seed(base, 3, e) for e in range(evaluation_episodes)),
    )
