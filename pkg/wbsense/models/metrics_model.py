"""Detection metrics and operation-count estimates for OMP and the DL pipeline.

Operation accounting: one real multiply-add is two operations, and the
formulas below charge complex products with the same constants the
instrumented OMP counters use, so analytic and counted values agree.
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wbsense.models.network_model import NetworkSpec
from wbsense.models.omp_model import OmpConfig, OpCounter, omp_recover
from wbsense.models.signal_model import Dimensions, OccupancyMask
from wbsense.utils.errors import InvalidInputError, ShapeMismatchError, UndefinedMetricError
from wbsense.utils.logger import logger

OMP_STEPS = ("matching", "identification", "least_squares", "approximation")


@dataclass
class Metrics:
    pd_all_bands: float
    pd_occupied_bands: Optional[float]
    sample_count: int

    def as_dict(self):
        return {
            "pd_all_bands": self.pd_all_bands,
            "pd_occupied_bands": self.pd_occupied_bands,
            "samples": self.sample_count,
        }


def _as_bits(masks) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        return np.atleast_2d(masks.astype(bool))
    masks = list(masks)
    if not masks:
        return np.zeros((0, 0), dtype=bool)
    rows = [m.bits if isinstance(m, OccupancyMask) else np.asarray(m, dtype=bool) for m in masks]
    widths = {row.size for row in rows}
    if len(widths) != 1:
        raise ShapeMismatchError(f"Masks disagree on the band count: {sorted(widths)}")
    return np.stack(rows)


def _paired_bits(preds, truths):
    pred_bits, truth_bits = _as_bits(preds), _as_bits(truths)
    if pred_bits.shape[0] != truth_bits.shape[0]:
        raise ShapeMismatchError(f"{pred_bits.shape[0]} predictions for {truth_bits.shape[0]} ground-truth masks")
    if pred_bits.shape != truth_bits.shape:
        raise ShapeMismatchError(f"Predictions cover {pred_bits.shape[1]} bands, ground truth {truth_bits.shape[1]}")
    if pred_bits.size == 0:
        raise InvalidInputError("No samples to score")
    return pred_bits, truth_bits


def pd_all_bands(preds, truths) -> float:
    """Percent of all band decisions (samples x N) that match the ground truth."""
    pred_bits, truth_bits = _paired_bits(preds, truths)
    return float(100.0 * np.count_nonzero(pred_bits == truth_bits) / truth_bits.size)


def pd_occupied_bands(preds, truths) -> float:
    """Percent of truly occupied bands that were detected as occupied.

    Raises:
        UndefinedMetricError: the ground truth has no occupied band.
    """
    pred_bits, truth_bits = _paired_bits(preds, truths)
    occupied = np.count_nonzero(truth_bits)
    if occupied == 0:
        raise UndefinedMetricError("Pd over occupied bands is undefined when no band is occupied")
    return float(100.0 * np.count_nonzero(pred_bits & truth_bits) / occupied)


def evaluate(preds, truths) -> Metrics:
    """Both detection rates; an undefined Pd^OB is reported as None."""
    pd_ab = pd_all_bands(preds, truths)
    try:
        pd_ob = pd_occupied_bands(preds, truths)
    except UndefinedMetricError as e:
        logger.warning(f"{e}; reporting it as missing")
        pd_ob = None
    return Metrics(pd_all_bands=pd_ab, pd_occupied_bands=pd_ob, sample_count=len(_as_bits(truths)))


class ComplexityParams(BaseModel):
    """K, N, Q of the capture plus P, the number of recovered bands."""

    model_config = ConfigDict(frozen=True)

    K: int = Field(8, ge=1)
    N: int = Field(14, ge=1)
    Q: int = Field(299, ge=1)
    P: int = Field(1, ge=0)

    @model_validator(mode="after")
    def _check_p(self):
        if self.P > self.K:
            raise ValueError(f"P ({self.P}) cannot exceed K ({self.K})")
        if self.P > self.N:
            raise ValueError(f"P ({self.P}) cannot exceed N ({self.N})")
        return self

    @classmethod
    def from_dims(cls, dims: Dimensions, P):
        return cls(K=dims.K, N=dims.N, Q=dims.Q, P=P)


def _with_total(counts):
    counts = dict(counts)
    counts["total"] = sum(counts[step] for step in OMP_STEPS)
    counts["dominant"] = max(OMP_STEPS, key=lambda step: counts[step])
    return counts


def omp_op_count(p: ComplexityParams):
    """Analytic real-operation count of each OMP step over P iterations.

    Returns:
        dict with ``matching``, ``identification``, ``least_squares``,
        ``approximation``, ``total`` and the name of the ``dominant`` step.
    """
    K, N, Q, P = p.K, p.N, p.Q, p.P
    iterations = range(1, P + 1)
    return _with_total({
        "matching": sum(2 * K * Q * (N - i + 1) for i in iterations),
        "identification": 2 * N * Q,
        "least_squares": sum(((i - 1) * (4 * K - 1) + 3 * K + 1 + 2 * K + i * i) * Q for i in iterations),
        "approximation": sum(2 * K * Q * i for i in iterations),
    })


def instrumented_omp_op_count(A, Y, P):
    """Run OMP for exactly P iterations and return what its counters saw.

    The layout matches :func:`omp_op_count`.
    """
    if P < 0:
        raise InvalidInputError(f"P must be >= 0, got {P}")
    counter = OpCounter()
    if P == 0:
        config = OmpConfig.residual_threshold(float("inf"))
    else:
        config = OmpConfig.known_sparsity(P)
    result = omp_recover(A, Y, config, counter=counter)
    if result.iterations != P:
        raise InvalidInputError(f"OMP stopped after {result.iterations} iterations, expected {P}")
    counts = counter.as_dict()
    counts.pop("total")
    return _with_total(counts)


def dlwss_op_count(spec: NetworkSpec, dims: Optional[Dimensions] = None):
    """Real operations of one forward pass: 2 per multiply-add.

    A conv layer costs N * (L - T + 1) * 2T * filters * in_channels, the
    fully connected layer 2 * in * out. Activations are not counted.
    """
    if dims is not None and (dims.N != spec.n_bands or dims.Q != spec.n_snapshots):
        raise ShapeMismatchError(
            f"Network expects {spec.n_bands}x{spec.n_snapshots} inputs, dimensions are N={dims.N}, Q={dims.Q}"
        )
    layers: List[dict] = []
    lengths = spec.time_lengths()
    for index, layer in enumerate(spec.conv_layers):
        out_len = lengths[index + 1]
        ops = spec.n_bands * out_len * 2 * layer.kernel_len * layer.filters * layer.in_channels
        layers.append({"layer": f"conv{index}", "ops": ops})
    layers.append({"layer": "fc", "ops": 2 * spec.fc_in * spec.fc_out})
    return {"layers": layers, "total": sum(entry["ops"] for entry in layers)}


def complexity_summary(spec: NetworkSpec, params: ComplexityParams):
    """OMP and DL op counts side by side, with the ratio of their totals."""
    omp = omp_op_count(params)
    dl = dlwss_op_count(spec)
    return {
        "params": params.model_dump(),
        "omp": omp,
        "dlwss": dl,
        "dlwss_to_omp_ratio": dl["total"] / omp["total"] if omp["total"] else None,
    }

