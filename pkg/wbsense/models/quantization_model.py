"""Fixed-point <W, I> emulation of network inference.

A format with W total bits and I integer bits (sign included) has step
2^(I - W) and range [-2^(I - 1), 2^(I - 1) - 2^(I - W)]. Values are rounded
half-to-even onto the grid and saturated at the range ends.
"""
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wbsense.models.metrics_model import evaluate
from wbsense.models.network_model import (
    NetworkSpec,
    WeightSet,
    forward,
    forward_trace,
)
from wbsense.utils.errors import InvalidInputError
from wbsense.utils.logger import logger

SWEEP_COLUMNS = ["Wa", "Ia", "Ww", "Iw", "pd_ob", "pd_ab", "saturation_events", "samples"]


class FixedPointFormat(BaseModel):
    model_config = ConfigDict(frozen=True)

    W: int = Field(ge=1, le=64)
    I: int = Field(ge=1, le=64)

    @model_validator(mode="after")
    def _check_bits(self):
        if self.I > self.W:
            raise ValueError(f"integer bits I={self.I} exceed word length W={self.W}")
        return self

    @property
    def step(self):
        return math.ldexp(1.0, self.I - self.W)

    @property
    def min_value(self):
        return -math.ldexp(1.0, self.I - 1)

    @property
    def max_value(self):
        return math.ldexp(1.0, self.I - 1) - self.step

    def __str__(self):
        return f"<{self.W},{self.I}>"


@dataclass
class SaturationStats:
    events: Dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def add(self, name, count):
        self.events[name] += int(count)

    @property
    def total(self):
        return int(sum(self.events.values()))

    def as_dict(self):
        return dict(self.events)


def quantize(x, fmt: FixedPointFormat, stats: Optional[SaturationStats] = None, name="value"):
    """Round to the nearest multiple of the step (ties to even), then saturate.

    Scalars in, scalars out; arrays are quantized elementwise.
    """
    values = np.asarray(x, dtype=np.float64)
    q = np.round(values / fmt.step) * fmt.step
    saturated = (q < fmt.min_value) | (q > fmt.max_value)
    if stats is not None:
        stats.add(name, np.count_nonzero(saturated))
    q = np.clip(q, fmt.min_value, fmt.max_value)
    if np.ndim(x) == 0:
        return float(q)
    return q


def min_integer_bits(min_value, max_value) -> int:
    """Smallest sign-inclusive integer width covering [min, max] with one guard bit."""
    if min_value > max_value:
        raise InvalidInputError(f"min {min_value} exceeds max {max_value}")
    max_abs = max(abs(min_value), abs(max_value))
    return int(math.ceil(math.log2(max_abs + 1.0))) + 1


@dataclass
class RangeEntry:
    name: str
    kind: str  # "activation" or "weight"
    layer_type: str  # "CV", "FC" or "IN"
    min_value: float
    max_value: float

    @property
    def i_min(self):
        return min_integer_bits(self.min_value, self.max_value)

    def as_dict(self):
        return {
            "name": self.name,
            "kind": self.kind,
            "layer_type": self.layer_type,
            "min": self.min_value,
            "max": self.max_value,
            "i_min": self.i_min,
        }


@dataclass
class RangeReport:
    entries: List[RangeEntry]

    def by_name(self, name, kind):
        for entry in self.entries:
            if entry.name == name and entry.kind == kind:
                return entry
        raise KeyError(f"{kind} range for {name}")

    def summary(self):
        """Rows of the Type x Layer table (Activation/Weight x CV/FC)."""
        rows = []
        for kind in ("activation", "weight"):
            for layer_type in ("CV", "FC"):
                group = [e for e in self.entries if e.kind == kind and e.layer_type == layer_type]
                if not group:
                    continue
                low = min(e.min_value for e in group)
                high = max(e.max_value for e in group)
                rows.append({
                    "type": kind.capitalize(),
                    "layer": layer_type,
                    "min": low,
                    "max": high,
                    "i_min": min_integer_bits(low, high),
                })
        return rows

    def activation_i_min(self):
        return max(e.i_min for e in self.entries if e.kind == "activation")

    def weight_i_min(self):
        return max(e.i_min for e in self.entries if e.kind == "weight")

    def to_frame(self):
        return pd.DataFrame([e.as_dict() for e in self.entries])


def analyze_dynamic_range(spec: NetworkSpec, weights: WeightSet, inputs) -> RangeReport:
    """Exact min/max of the input, every pre-activation and every weight tensor."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3:
        inputs = inputs[None]
    if inputs.shape[0] == 0:
        raise InvalidInputError("Dynamic range analysis needs at least one sample")
    trace = forward_trace(spec, weights, inputs)
    entries = [RangeEntry("input", "activation", "IN", float(inputs.min()), float(inputs.max()))]
    for i, pre in enumerate(trace.pre_activations):
        entries.append(RangeEntry(f"conv{i}", "activation", "CV", float(pre.min()), float(pre.max())))
    entries.append(RangeEntry("fc", "activation", "FC", float(trace.logits.min()), float(trace.logits.max())))
    for i, (kernel, bias) in enumerate(zip(weights.kernels, weights.biases)):
        both = np.concatenate([kernel.ravel(), bias.ravel()])
        entries.append(RangeEntry(f"conv{i}", "weight", "CV", float(both.min()), float(both.max())))
    both = np.concatenate([weights.fc_weight.ravel(), weights.fc_bias.ravel()])
    entries.append(RangeEntry("fc", "weight", "FC", float(both.min()), float(both.max())))
    return RangeReport(entries)


class QuantizationPolicy(BaseModel):
    """Activation and weight formats; rounding is half-to-even, overflow saturates."""

    activation_format: FixedPointFormat
    weight_format: FixedPointFormat
    rounding: str = "nearest-even"
    overflow: str = "saturate"

    @classmethod
    def from_range_report(cls, report: RangeReport, extra_integer_bits=0, activation_width=32, weight_width=32):
        ia = min(report.activation_i_min() + extra_integer_bits, activation_width)
        iw = min(report.weight_i_min() + extra_integer_bits, weight_width)
        return cls(
            activation_format=FixedPointFormat(W=activation_width, I=ia),
            weight_format=FixedPointFormat(W=weight_width, I=iw),
        )

    def label(self):
        return f"act{self.activation_format} w{self.weight_format}"


def activation_sweep_policies(widths=range(29, 21, -1), activation_integer_bits=9, weight_format=FixedPointFormat(W=16, I=2)):
    """Activation sweep <W, 9> for W = 29..22 at weights <16, 2>."""
    return [
        QuantizationPolicy(activation_format=FixedPointFormat(W=w, I=activation_integer_bits), weight_format=weight_format)
        for w in widths
    ]


@dataclass
class QuantizedOutput:
    probabilities: np.ndarray
    saturation: SaturationStats


def quantize_weights(weights: WeightSet, fmt: FixedPointFormat, stats: Optional[SaturationStats] = None) -> WeightSet:
    quantized = []
    for name, tensor in weights.named_tensors():
        quantized.append(quantize(tensor, fmt, stats, f"weight:{name}"))
    return WeightSet.from_tensors(quantized)


def quantized_forward(spec: NetworkSpec, weights: WeightSet, inputs, policy: QuantizationPolicy) -> QuantizedOutput:
    """Inference with quantized weights and quantized layer boundaries.

    Accumulation runs in float64; inputs, conv pre-activations and logits
    are rounded to the activation format; the sigmoid stays in float.
    """
    stats = SaturationStats()
    qweights = quantize_weights(weights, policy.weight_format, stats)

    def boundary(name, values):
        return quantize(values, policy.activation_format, stats, f"activation:{name}")

    trace = forward_trace(spec, qweights, inputs, boundary=boundary)
    if stats.total:
        logger.warning(f"Quantized inference with {policy.label()} saturated {stats.total} values")
    return QuantizedOutput(probabilities=trace.probabilities, saturation=stats)


def detection_rates(pred_bits: np.ndarray, truth_bits: np.ndarray):
    """(pd_all_bands, pd_occupied_bands) in percent; Pd^OB is NaN without occupied bands."""
    scored = evaluate(pred_bits, truth_bits)
    pd_ob = scored.pd_occupied_bands
    return scored.pd_all_bands, float("nan") if pd_ob is None else pd_ob


def wl_sweep(spec: NetworkSpec, weights: WeightSet, inputs, masks, policies: Sequence[QuantizationPolicy], threshold=0.5) -> pd.DataFrame:
    """Detection metrics and saturation counts for each quantization policy.

    Args:
        inputs: (S, N, Q, 2) preprocessed samples.
        masks: (S, N) truth bits or OccupancyMask list.

    Returns:
        DataFrame with columns Wa, Ia, Ww, Iw, pd_ob, pd_ab, saturation_events, samples.
    """
    if not policies:
        raise InvalidInputError("Word-length sweep needs at least one policy")
    inputs = np.asarray(inputs, dtype=np.float64)
    truth = np.stack([m.bits for m in masks]) if not isinstance(masks, np.ndarray) else masks.astype(bool)
    rows = []
    for policy in policies:
        out = quantized_forward(spec, weights, inputs, policy)
        pred = out.probabilities >= threshold
        pd_ab, pd_ob = detection_rates(pred, truth)
        rows.append({
            "Wa": policy.activation_format.W,
            "Ia": policy.activation_format.I,
            "Ww": policy.weight_format.W,
            "Iw": policy.weight_format.I,
            "pd_ob": pd_ob,
            "pd_ab": pd_ab,
            "saturation_events": out.saturation.total,
            "samples": int(inputs.shape[0]),
        })
        logger.info(f"WL sweep {policy.label()}: Pd^OB {pd_ob:.2f}, Pd^AB {pd_ab:.2f}")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def float_reference(spec: NetworkSpec, weights: WeightSet, inputs, masks, threshold=0.5):
    """Unquantized metrics in the same layout as a sweep row."""
    probs = forward(spec, weights, inputs)
    truth = np.stack([m.bits for m in masks]) if not isinstance(masks, np.ndarray) else masks.astype(bool)
    pd_ab, pd_ob = detection_rates(probs >= threshold, truth)
    return {"pd_ob": pd_ob, "pd_ab": pd_ab, "samples": int(np.asarray(inputs).shape[0])}


def predictions_match(spec: NetworkSpec, weights: WeightSet, inputs, policy: QuantizationPolicy, threshold=0.5):
    """Whether the quantized pass yields the same occupancy decisions as float."""
    reference = forward(spec, weights, inputs) >= threshold
    quantized = quantized_forward(spec, weights, inputs, policy).probabilities >= threshold
    return bool(np.array_equal(reference, quantized))
