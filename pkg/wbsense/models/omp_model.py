"""Orthogonal matching pursuit for joint (multi-snapshot) band recovery.

Each iteration runs four steps over the K x Q residual block:
matching (correlate every unselected column with the residual),
identification (keep the strongest column), least squares (project the
measurements onto the selected columns) and approximation (update the
residual).
"""
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import BaseModel, Field, model_validator

from wbsense.models.signal_model import (
    ChannelModel,
    Dimensions,
    OccupancyMask,
    SensingMatrix,
    capture,
    generate_spectrum,
)
from wbsense.utils.errors import InvalidInputError, RankDeficientError, ShapeMismatchError
from wbsense.utils.logger import logger
from wbsense.utils.storage import read_json, write_json

RANK_TOLERANCE = 1e-10
EPSILON_FLOOR = 1e-12


class StopRule(str, Enum):
    KNOWN_SPARSITY = "known_sparsity"
    RESIDUAL_THRESHOLD = "residual_threshold"


class OmpConfig(BaseModel):
    """Stopping rule plus a safety cap on iterations (defaults to K)."""

    stop: StopRule = StopRule.KNOWN_SPARSITY
    sparsity: Optional[int] = Field(None, ge=1)
    epsilon: Optional[float] = Field(None, ge=0.0)
    max_iterations: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_rule(self):
        if self.stop is StopRule.KNOWN_SPARSITY and self.sparsity is None:
            raise ValueError("known_sparsity stopping needs a sparsity")
        if self.stop is StopRule.RESIDUAL_THRESHOLD and self.epsilon is None:
            raise ValueError("residual_threshold stopping needs an epsilon")
        return self

    @classmethod
    def known_sparsity(cls, sparsity, max_iterations=None):
        return cls(stop=StopRule.KNOWN_SPARSITY, sparsity=sparsity, max_iterations=max_iterations)

    @classmethod
    def true_sparsity(cls, sparsity, K):
        """Known-sparsity rule for a sample's true popcount, capped at K."""
        if sparsity > K:
            logger.warning(f"True sparsity {sparsity} exceeds K={K}; recovering only {K} bands")
            sparsity = K
        return cls.known_sparsity(sparsity)

    @classmethod
    def residual_threshold(cls, epsilon, max_iterations=None):
        return cls(stop=StopRule.RESIDUAL_THRESHOLD, epsilon=epsilon, max_iterations=max_iterations)

    def iteration_cap(self, K, N):
        cap = min(self.max_iterations or K, K, N)
        if self.stop is StopRule.KNOWN_SPARSITY:
            if self.sparsity > K:
                raise InvalidInputError(f"Sparsity {self.sparsity} exceeds the branch count K={K}")
            cap = min(cap, self.sparsity)
        return cap


@dataclass
class OmpResult:
    occupied_bands: List[int]
    residual_norms: List[float]
    iterations: int
    initial_residual_norm: float = 0.0

    @property
    def final_residual_norm(self):
        return self.residual_norms[-1] if self.residual_norms else self.initial_residual_norm

    def to_mask(self, n_bands) -> OccupancyMask:
        return OccupancyMask.from_support(n_bands, self.occupied_bands)


@dataclass
class OpCounter:
    """Real-operation counters per OMP step.

    Accounting: correlating one column with the K x Q residual costs 2KQ;
    rebuilding the residual from i selected columns costs 2KQi; the argmax
    over the N column scores costs 2NQ once per run. Least squares is
    charged with the analytic per-iteration constant.
    """

    matching: int = 0
    identification: int = 0
    least_squares: int = 0
    approximation: int = 0

    def as_dict(self):
        return {
            "matching": self.matching,
            "identification": self.identification,
            "least_squares": self.least_squares,
            "approximation": self.approximation,
            "total": self.matching + self.identification + self.least_squares + self.approximation,
        }


def column_normalize(A: Union[SensingMatrix, np.ndarray]) -> SensingMatrix:
    entries = np.asarray(A.entries if isinstance(A, SensingMatrix) else A)
    norms = np.linalg.norm(entries, axis=0)
    if np.any(norms == 0):
        zero = np.flatnonzero(norms == 0).tolist()
        raise InvalidInputError(f"Sensing matrix has zero columns {zero}")
    seed = A.seed if isinstance(A, SensingMatrix) else None
    return SensingMatrix(entries=entries / norms, seed=seed)


def _least_squares_residual(Y, As, iteration):
    """Residual of Y after projection onto span(As), via economic QR."""
    Qm, R = scipy.linalg.qr(As, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= RANK_TOLERANCE * max(diag.max(), 1.0):
        raise RankDeficientError("Selected columns are linearly dependent", iteration)
    return Y - Qm @ (Qm.conj().T @ Y)


def omp_recover(A, Y, config: OmpConfig, counter: Optional[OpCounter] = None) -> OmpResult:
    """Recover the occupied bands of one capture.

    Args:
        A: K x N sensing matrix (SensingMatrix or array).
        Y: K x Q capture (SnsCapture or array).
        config: stopping rule.
        counter: optional OpCounter filled with per-step operation counts.

    Returns:
        OmpResult with the selection order and residual norms after each iteration.
    """
    entries = np.asarray(A.entries if isinstance(A, SensingMatrix) else A)
    samples = np.asarray(getattr(Y, "samples", Y))
    if samples.ndim == 1:
        samples = samples[:, None]
    K, N = entries.shape
    if samples.shape[0] != K:
        raise ShapeMismatchError(f"Capture has {samples.shape[0]} rows, sensing matrix has {K}")
    Q = samples.shape[1]
    A_norm = column_normalize(entries).entries
    cap = config.iteration_cap(K, N)

    residual = samples.astype(np.complex128, copy=True)
    selected: List[int] = []
    norms: List[float] = []
    initial = float(np.linalg.norm(residual))
    current = initial
    if counter is not None:
        counter.identification += 2 * N * Q

    while len(selected) < cap:
        if config.stop is StopRule.RESIDUAL_THRESHOLD and current < config.epsilon:
            break
        iteration = len(selected) + 1
        # Matching over unselected columns only; projected-out columns score zero anyway
        candidates = np.array([j for j in range(N) if j not in selected], dtype=int)
        scores = np.linalg.norm(A_norm[:, candidates].conj().T @ residual, axis=1)
        # Identification: np.argmax keeps the lowest index on ties
        chosen = int(candidates[int(np.argmax(scores))])
        selected.append(chosen)
        residual = _least_squares_residual(samples, A_norm[:, selected], iteration)
        current = float(np.linalg.norm(residual))
        norms.append(current)
        if counter is not None:
            i = iteration
            counter.matching += 2 * K * Q * candidates.size
            counter.least_squares += ((i - 1) * (4 * K - 1) + 3 * K + 1 + 2 * K + i * i) * Q
            counter.approximation += 2 * K * Q * len(selected)
        logger.debug(f"OMP iteration {iteration}: selected band {chosen}, residual {current:.3e}")

    return OmpResult(occupied_bands=selected, residual_norms=norms, iterations=len(selected), initial_residual_norm=initial)


def exhaustive_support(A, Y, sparsity) -> Tuple[int, ...]:
    """Support of size ``sparsity`` with the smallest least-squares residual (brute force)."""
    entries = np.asarray(A.entries if isinstance(A, SensingMatrix) else A)
    samples = np.asarray(getattr(Y, "samples", Y))
    best, best_norm = None, np.inf
    for support in combinations(range(entries.shape[1]), sparsity):
        As = entries[:, support]
        coeffs, *_ = np.linalg.lstsq(As, samples, rcond=None)
        norm = np.linalg.norm(samples - As @ coeffs)
        if norm < best_norm:
            best, best_norm = support, norm
    return best


@dataclass
class EpsilonTable:
    """Residual thresholds indexed by SNR for one channel model."""

    entries: Dict[float, float]
    channel: ChannelModel = field(default_factory=ChannelModel)
    per_sparsity: Dict[float, Dict[int, float]] = field(default_factory=dict)

    def __post_init__(self):
        bad = {snr: eps for snr, eps in self.entries.items() if not eps > 0}
        if bad:
            raise InvalidInputError(f"Epsilon values must be positive, got {bad}")

    @property
    def snr_grid(self):
        return sorted(self.entries)

    def lookup(self, snr_db):
        snr_db = float(snr_db)
        if snr_db in self.entries:
            return self.entries[snr_db]
        finite = [s for s in self.snr_grid if np.isfinite(s)]
        if np.isinf(snr_db) or not finite:
            return min(self.entries.values())
        return float(np.interp(snr_db, finite, [self.entries[s] for s in finite]))

    def sparsity_spread(self):
        """Per SNR, max minus min epsilon across sparsity levels."""
        return {
            snr: (max(levels.values()) - min(levels.values())) if levels else 0.0
            for snr, levels in self.per_sparsity.items()
        }

    def snr_spread(self):
        values = list(self.entries.values())
        return max(values) - min(values) if values else 0.0

    def to_dict(self):
        return {
            "channel": self.channel.model_dump(mode="json"),
            "entries": [
                {
                    "snr_db": snr,
                    "epsilon": self.entries[snr],
                    "per_sparsity": {str(s): v for s, v in self.per_sparsity.get(snr, {}).items()},
                }
                for snr in self.snr_grid
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            entries = {float(e["snr_db"]): float(e["epsilon"]) for e in doc["entries"]}
            per_sparsity = {
                float(e["snr_db"]): {int(s): float(v) for s, v in e.get("per_sparsity", {}).items()}
                for e in doc["entries"]
            }
            return cls(entries=entries, channel=ChannelModel.model_validate(doc["channel"]), per_sparsity=per_sparsity)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidInputError(f"Malformed epsilon table: {e}") from e

    def save(self, path):
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def calibrate_epsilon(A: SensingMatrix, snr_grid, channel: ChannelModel, sparsity_range, trials, seed, Q=None) -> EpsilonTable:
    """Mean terminal residual of known-sparsity OMP per SNR.

    For every SNR and every sparsity in ``sparsity_range`` ``trials``
    synthetic captures are recovered with the true sparsity; the epsilon of
    that SNR is the mean terminal residual over all of them.
    """
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    entries_arr = np.asarray(A.entries)
    K, N = entries_arr.shape
    dims = Dimensions(K=K, N=N, Q=Q or Dimensions().Q)
    low, high = sparsity_range
    if not 1 <= low <= high <= K:
        raise InvalidInputError(f"Calibration sparsity range {sparsity_range} must lie within [1, {K}]")

    entries: Dict[float, float] = {}
    per_sparsity: Dict[float, Dict[int, float]] = {}
    logger.info(f"Calibrating epsilon over {len(snr_grid)} SNRs, channel {channel.label}, {trials} trials")
    for snr_index, snr_db in enumerate(snr_grid):
        snr_db = float(snr_db)
        levels = {}
        for sparsity in range(low, high + 1):
            rng = np.random.default_rng([seed, snr_index, sparsity])
            residuals = []
            for _ in range(trials):
                support = rng.choice(N, size=sparsity, replace=False)
                mask = OccupancyMask.from_support(N, support)
                spectrum_seed, noise_seed = rng.integers(0, 2**63 - 1, size=2)
                X = generate_spectrum(dims, mask, channel, int(spectrum_seed))
                Y = capture(A, X, snr_db, int(noise_seed), channel=channel)
                result = omp_recover(A, Y, OmpConfig.known_sparsity(sparsity))
                residuals.append(result.final_residual_norm)
            levels[sparsity] = float(np.mean(residuals))
        per_sparsity[snr_db] = levels
        entries[snr_db] = max(float(np.mean(list(levels.values()))), EPSILON_FLOOR)
        logger.debug(f"epsilon({snr_db} dB) = {entries[snr_db]:.4e}")
    return EpsilonTable(entries=entries, channel=channel, per_sparsity=per_sparsity)


def epsilon_channel_sensitivity(tables: List[EpsilonTable], threshold=0.1):
    """Per-SNR max relative deviation of epsilon across channels.

    Deviation is ``max |eps_c - mean| / mean`` over the channels at one SNR.

    Returns:
        dict with ``deviations`` (snr -> deviation), ``max_deviation`` and
        ``within_threshold``.
    """
    if not tables:
        raise InvalidInputError("No epsilon tables given")
    grid = tables[0].snr_grid
    for table in tables[1:]:
        if table.snr_grid != grid:
            raise InvalidInputError(f"SNR grid mismatch: {table.snr_grid} vs {grid}")
    deviations = {}
    for snr in grid:
        values = np.array([t.entries[snr] for t in tables])
        mean = values.mean()
        deviations[snr] = float(np.max(np.abs(values - mean)) / mean) if mean > 0 else 0.0
    worst = max(deviations.values()) if deviations else 0.0
    return {
        "channels": [t.channel.label for t in tables],
        "deviations": deviations,
        "max_deviation": worst,
        "threshold": threshold,
        "within_threshold": worst <= threshold,
    }
