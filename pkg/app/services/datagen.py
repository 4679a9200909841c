# app/services/datagen.py
"""
Simulation data: coefficient pairs with controlled sine distance, datasets drawn
from a ScenarioConfig, and the large-sample true-PATT oracles.

Every replication draws from its own counter-based stream keyed by
(seed, replication, attempt), so replications can run in any order on any number
of workers and still produce the same datasets.
"""

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from app.core.config import MIN_ORACLE_DRAWS, settings
from app.core.errors import (
    DegenerateSample,
    DimensionMismatch,
    InvalidParameter,
    SchemaError,
    Unsatisfiable,
    ZeroVector,
)
from app.core.logging import get_logger
from app.services.design import covariate_name
from app.services.scenario import ScenarioConfig

logger = get_logger(__name__)

# spawn keys of length 1 never collide with the (replication, attempt) keys
ORACLE_STREAM = 0x0AC1E
IMPORTANCE_STREAM = 0x1AC1E
CALIBRATION_STREAM = 0x2AC1E

_COVARIATE_COLUMN = re.compile(r"^x(\d+)$")


@dataclass(frozen=True)
class Dataset:
    """Rectangular sample: covariates X (n x p), binary treatment W, outcome Y."""

    X: np.ndarray
    W: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        W = np.asarray(self.W)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim != 2 or W.shape != (X.shape[0],) or Y.shape != (X.shape[0],):
            raise DimensionMismatch(
                f"Inconsistent shapes X{X.shape}, W{W.shape}, Y{Y.shape}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise SchemaError("Dataset contains non-finite values")
        if not np.all((W == 0) | (W == 1)):
            raise SchemaError("Treatment column must contain only 0 and 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W", W.astype(np.int8))
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def treated_count(self) -> int:
        return int(self.W.sum())

    @property
    def treated_mask(self) -> np.ndarray:
        return self.W == 1

    @property
    def covariate_names(self) -> list[str]:
        return [covariate_name(j) for j in range(self.p)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"y": self.Y, "w": self.W.astype(int)})
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.X[:, j]
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "Dataset":
        """Build a Dataset from a frame with columns y, w, x1..xp."""
        missing = [c for c in ("y", "w") if c not in frame.columns]
        if missing:
            raise SchemaError(f"Missing required columns: {missing}")
        numbers = sorted(
            int(m.group(1)) for c in frame.columns if (m := _COVARIATE_COLUMN.match(str(c)))
        )
        if not numbers:
            raise SchemaError("No covariate columns named x1..xp")
        if numbers != list(range(1, len(numbers) + 1)):
            raise SchemaError(f"Covariate columns must be x1..x{len(numbers)} without gaps")
        extras = set(frame.columns) - {"y", "w"} - {f"x{j}" for j in numbers}
        if extras:
            logger.warning(f"Ignoring unrecognized columns: {sorted(extras)}")
        try:
            w = pd.to_numeric(frame["w"], errors="raise").to_numpy()
            y = pd.to_numeric(frame["y"], errors="raise").to_numpy(dtype=float)
            X = frame[[f"x{j}" for j in numbers]].apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
        except (ValueError, TypeError) as e:
            raise SchemaError(f"Non-numeric value in dataset: {e}") from None
        if np.any(pd.isna(w)) or not np.all(np.isin(w, [0, 1])):
            bad = sorted(set(np.asarray(w)[~np.isin(w, [0, 1])].tolist()))
            raise SchemaError(f"Column w must be binary 0/1, found {bad}")
        return cls(X, w.astype(np.int8), y)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        if not path.is_file():
            raise SchemaError(f"Dataset file not found: {path}")
        return cls.from_frame(pd.read_csv(path))


@dataclass(frozen=True)
class CoefficientPair:
    """Treatment coefficients alpha1 (norm 1) and outcome coefficients beta2 (norm k)."""

    alpha1: np.ndarray
    beta2: np.ndarray
    sine_distance: float

    @classmethod
    def from_directions(
        cls, alpha_direction: np.ndarray, beta_direction: np.ndarray, k: float, alpha_scale: float = 1.0
    ) -> "CoefficientPair":
        alpha_direction = np.asarray(alpha_direction, dtype=float)
        beta_direction = np.asarray(beta_direction, dtype=float)
        alpha1 = alpha_scale * alpha_direction / np.linalg.norm(alpha_direction)
        beta2 = k * beta_direction / np.linalg.norm(beta_direction)
        return cls(alpha1, beta2, sine_distance(alpha1, beta2))


@dataclass(frozen=True)
class OracleEstimate:
    value: float
    standard_error: float
    draws: int
    method: str


def sine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """sqrt(1 - cos^2) of the angle between u and v, in [0, 1]."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimensionMismatch(f"Vectors of lengths {u.size} and {v.size}")
    norm_u, norm_v = np.linalg.norm(u), np.linalg.norm(v)
    if norm_u == 0 or norm_v == 0:
        raise ZeroVector("Sine distance is undefined for a zero vector")
    cos = float(np.clip(u @ v / (norm_u * norm_v), -1.0, 1.0))
    return math.sqrt(max(0.0, 1.0 - cos * cos))


def _draw_direction(rng: np.random.Generator, p: int) -> np.ndarray:
    magnitudes = rng.integers(1, 10, size=p).astype(float)
    signs = np.where(rng.random(p) < 0.5, -1.0, 1.0)
    return signs * magnitudes / np.linalg.norm(magnitudes)


def generate_coefficient_pairs(
    p: int,
    count: int,
    k: Optional[float] = None,
    seed: int = 0,
    bins: Optional[int] = None,
    max_draws: Optional[int] = None,
) -> list[CoefficientPair]:
    """
    Draw (alpha1, beta2) pairs whose sine distances cover [0, 1] evenly.

    Each coordinate is an integer in 1..9, the vector is normalized and each sign
    flipped with probability 1/2; alpha1 keeps unit length, beta2 is scaled by k.
    A pair is kept only while its sine-distance bin is below its quota, so the
    final bin counts differ by at most one.
    """
    k = settings.PAIR_SCALE_K if k is None else k
    bins = settings.SINE_DISTANCE_BINS if bins is None else bins
    max_draws = settings.MAX_PAIR_DRAWS if max_draws is None else max_draws
    if count < 1:
        raise InvalidParameter("count must be at least 1")
    if p < 2:
        raise InvalidParameter("Coefficient pairs need p >= 2")

    rng = np.random.default_rng(seed)
    base, extra = divmod(count, bins)
    occupancy = np.zeros(bins, dtype=int)
    pairs: list[CoefficientPair] = []
    draws = 0
    while len(pairs) < count:
        if draws >= max_draws:
            raise Unsatisfiable(
                f"Only {len(pairs)}/{count} pairs after {draws} draws for p={p}; "
                f"bin occupancy {occupancy.tolist()}"
            )
        draws += 1
        pair = CoefficientPair.from_directions(_draw_direction(rng, p), _draw_direction(rng, p), k)
        b = min(int(pair.sine_distance * bins), bins - 1)
        # the remainder goes out one per bin once every bin holds `base`
        overflow = extra > 0 and occupancy[b] == base and occupancy.min() >= base
        if occupancy[b] < base or overflow:
            if overflow:
                extra -= 1
            occupancy[b] += 1
            pairs.append(pair)
    logger.debug(f"Accepted {count} coefficient pairs from {draws} draws (p={p})")
    return pairs


def coefficient_pairs_frame(pairs: list[CoefficientPair]) -> pd.DataFrame:
    rows = []
    for pair_id, pair in enumerate(pairs):
        row = {"pair_id": pair_id, "sine_distance": pair.sine_distance}
        row.update({f"alpha1_{j + 1}": v for j, v in enumerate(pair.alpha1)})
        row.update({f"beta2_{j + 1}": v for j, v in enumerate(pair.beta2)})
        rows.append(row)
    return pd.DataFrame(rows)


def replication_rng(seed: int, replication_index: int, attempt: int = 0) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=(replication_index, attempt))
    return np.random.Generator(np.random.Philox(sequence))


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


def _response_surface(
    X: np.ndarray, coef: np.ndarray, nonlinear: bool, scale: float, quadratic_weight: float, interaction_weight: float
) -> np.ndarray:
    linear = X @ coef
    if not nonlinear:
        return linear
    # squares are centered at the covariate variance so E(surface) stays 0
    quadratic = quadratic_weight * ((X**2 - scale**2) @ coef) / scale
    adjacent = interaction_weight * np.sum(coef[:-1] * X[:, :-1] * X[:, 1:], axis=1) / scale
    return linear + quadratic + adjacent


def treatment_index(config: ScenarioConfig, X: np.ndarray) -> np.ndarray:
    """phi(X), the covariate part of the treatment logit."""
    return _response_surface(
        X,
        np.asarray(config.alpha1),
        config.nonlinear_treatment,
        config.covariate_scale,
        config.quadratic_weight,
        config.interaction_weight,
    )


def outcome_surface(config: ScenarioConfig, X: np.ndarray) -> np.ndarray:
    """g(X), the covariate part of the outcome mean."""
    return _response_surface(
        X,
        np.asarray(config.beta2),
        config.nonlinear_outcome,
        config.covariate_scale,
        config.quadratic_weight,
        config.interaction_weight,
    )


def true_propensity(config: ScenarioConfig, X: np.ndarray) -> np.ndarray:
    return expit(config.alpha0 + treatment_index(config, X))


def individual_effects(config: ScenarioConfig, X: np.ndarray) -> np.ndarray:
    """tau_i = beta1 + X_subset . theta"""
    tau = np.full(X.shape[0], config.beta1, dtype=float)
    if config.theta:
        tau = tau + X[:, list(config.interaction_columns)] @ np.asarray(config.theta)
    return tau


def _draw_covariates(config: ScenarioConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.normal(0.0, config.covariate_scale, size=(n, config.p))


def generate_dataset(config: ScenarioConfig, replication_index: int, attempt: int = 0) -> Dataset:
    """Draw one dataset; deterministic in (config.seed, replication_index, attempt)."""
    rng = replication_rng(config.seed, replication_index, attempt)
    X = _draw_covariates(config, rng, config.n)
    W = (rng.random(config.n) < true_propensity(config, X)).astype(np.int8)
    noise = rng.normal(0.0, config.error_sd, size=config.n)
    Y = config.beta0 + individual_effects(config, X) * W + outcome_surface(config, X) + noise
    if W.min() == W.max():
        raise DegenerateSample(
            f"Replication {replication_index} (attempt {attempt}) has constant treatment"
        )
    return Dataset(X, W, Y)


def draw_dataset(config: ScenarioConfig, replication_index: int, max_redraws: Optional[int] = None) -> Dataset:
    """generate_dataset with redraws on perturbed substreams when W comes out constant."""
    max_redraws = settings.MAX_REDRAWS if max_redraws is None else max_redraws
    for attempt in range(max_redraws + 1):
        try:
            return generate_dataset(config, replication_index, attempt)
        except DegenerateSample:
            logger.debug(f"Replication {replication_index}: redraw {attempt + 1} after constant W")
    raise DegenerateSample(
        f"Replication {replication_index} still has constant treatment after {max_redraws} redraws"
    )


def _resolve_draws(draws: Optional[int]) -> int:
    draws = settings.ORACLE_DRAWS if draws is None else draws
    if draws < MIN_ORACLE_DRAWS:
        raise InvalidParameter(f"Oracle needs at least {MIN_ORACLE_DRAWS} draws, got {draws}")
    return draws


def _chunks(draws: int, chunk_size: Optional[int]):
    chunk_size = settings.ORACLE_CHUNK_SIZE if chunk_size is None else chunk_size
    remaining = draws
    while remaining > 0:
        size = min(chunk_size, remaining)
        yield size
        remaining -= size


def true_patt_oracle(
    config: ScenarioConfig,
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    chunk_size: Optional[int] = None,
) -> OracleEstimate:
    """
    Monte-Carlo E(tau | W=1): simulate units, keep the treated ones and average
    their individual effects. Homogeneous scenarios return beta1 exactly.
    """
    if not config.is_heterogeneous:
        return OracleEstimate(float(config.beta1), 0.0, 0, "exact")
    draws = _resolve_draws(draws)
    rng = _stream_rng(config.seed if seed is None else seed, ORACLE_STREAM)

    # running mean / M2 merged chunk by chunk
    count, mean, m2 = 0, 0.0, 0.0
    for size in _chunks(draws, chunk_size):
        X = _draw_covariates(config, rng, size)
        treated = rng.random(size) < true_propensity(config, X)
        tau = individual_effects(config, X[treated])
        if tau.size == 0:
            continue
        chunk_mean = float(tau.mean())
        chunk_m2 = float(np.sum((tau - chunk_mean) ** 2))
        total = count + tau.size
        delta = chunk_mean - mean
        mean += delta * tau.size / total
        m2 += chunk_m2 + delta**2 * count * tau.size / total
        count = total
    if count < 2:
        raise DegenerateSample("Oracle simulation produced fewer than two treated units")
    standard_error = math.sqrt(m2 / (count - 1) / count)
    logger.debug(f"True PATT oracle {mean:.5f} (SE {standard_error:.2g}) from {draws} draws")
    return OracleEstimate(mean, standard_error, draws, "treated-average")


def true_patt_importance(
    config: ScenarioConfig,
    draws: Optional[int] = None,
    seed: Optional[int] = None,
    chunk_size: Optional[int] = None,
) -> OracleEstimate:
    """
    Independent oracle: E(tau * e(X)) / E(e(X)) over covariate draws only,
    weighting each unit by its true propensity instead of sampling W.
    """
    if not config.is_heterogeneous:
        return OracleEstimate(float(config.beta1), 0.0, 0, "exact")
    draws = _resolve_draws(draws)
    rng = _stream_rng(config.seed if seed is None else seed, IMPORTANCE_STREAM)

    s_e = s_et = s_ee = s_eet = s_etet = 0.0
    for size in _chunks(draws, chunk_size):
        X = _draw_covariates(config, rng, size)
        e = true_propensity(config, X)
        et = e * individual_effects(config, X)
        s_e += float(e.sum())
        s_et += float(et.sum())
        s_ee += float(e @ e)
        s_eet += float(e @ et)
        s_etet += float(et @ et)
    ratio = s_et / s_e
    # delta method on the ratio estimator
    residual_ss = s_etet - 2.0 * ratio * s_eet + ratio**2 * s_ee
    variance = residual_ss / draws / (draws * (s_e / draws) ** 2)
    return OracleEstimate(ratio, math.sqrt(max(variance, 0.0)), draws, "propensity-weighted")


def expected_prevalence(
    config: ScenarioConfig, alpha0: Optional[float] = None, draws: int = 200_000, seed: Optional[int] = None
) -> float:
    """E(e(X)) under the scenario, optionally with a different intercept."""
    rng = _stream_rng(config.seed if seed is None else seed, CALIBRATION_STREAM)
    index = treatment_index(config, _draw_covariates(config, rng, draws))
    intercept = config.alpha0 if alpha0 is None else alpha0
    return float(expit(intercept + index).mean())


def calibrate_alpha0(
    config: ScenarioConfig, target_prevalence: float, draws: int = 200_000, seed: Optional[int] = None
) -> float:
    """Intercept that makes the expected treated fraction equal the target."""
    if not 0.0 < target_prevalence < 1.0:
        raise InvalidParameter(f"Target prevalence must lie in (0, 1), got {target_prevalence}")
    rng = _stream_rng(config.seed if seed is None else seed, CALIBRATION_STREAM)
    index = treatment_index(config, _draw_covariates(config, rng, draws))

    def gap(intercept: float) -> float:
        return float(expit(intercept + index).mean()) - target_prevalence

    alpha0 = brentq(gap, -30.0, 30.0, xtol=1e-10)
    logger.info(f"Calibrated alpha0={alpha0:.4f} for prevalence {target_prevalence:.3f}")
    return float(alpha0)
