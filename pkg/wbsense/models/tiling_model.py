"""Tiled execution and on-chip buffer / external-memory cost model for conv layers.

Geometry of a 1-D conv layer over a band grid: output rows are bands (N),
output columns are time positions (L - T + 1), input channels C and output
channels (filters) F. A tiling <To, Ti, Tr, Tc> blocks output channels,
input channels, rows and columns. The loop nest is output-channel tiles
outermost, then row tiles, then column tiles, then input-channel tiles;
edge tiles are clipped while buffers are sized for full tiles.

Sizes in Mib use 2^20 bits.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from wbsense.models.network_model import NetworkSpec, WeightSet
from wbsense.utils.errors import InvalidInputError, ShapeMismatchError
from wbsense.utils.logger import logger
from wbsense.utils.storage import write_json

MIB = float(2 ** 20)


class TilingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    To: int = Field(ge=1)
    Ti: int = Field(ge=1)
    Tr: int = Field(ge=1)
    Tc: int = Field(ge=1)

    @classmethod
    def reference_config(cls):
        return cls(To=20, Ti=16, Tr=20, Tc=20)

    @classmethod
    def whole_layer(cls, geometry: "ConvGeometry"):
        return cls(To=geometry.out_channels, Ti=geometry.in_channels, Tr=geometry.rows, Tc=geometry.out_cols)

    def as_tuple(self):
        return (self.To, self.Ti, self.Tr, self.Tc)


@dataclass(frozen=True)
class ConvGeometry:
    rows: int
    in_length: int
    taps: int
    in_channels: int
    out_channels: int

    @property
    def out_cols(self):
        return self.in_length - self.taps + 1

    @classmethod
    def from_spec(cls, spec: NetworkSpec, layer_index):
        layer = spec.conv_layers[layer_index]
        return cls(
            rows=spec.n_bands,
            in_length=spec.time_lengths()[layer_index],
            taps=layer.kernel_len,
            in_channels=layer.in_channels,
            out_channels=layer.filters,
        )

    @classmethod
    def from_arrays(cls, x, kernel):
        F, C, T = kernel.shape
        return cls(rows=x.shape[-3], in_length=x.shape[-2], taps=T, in_channels=C, out_channels=F)

    def input_bits(self, word_bits):
        return self.rows * self.in_length * self.in_channels * word_bits

    def weight_bits(self, word_bits):
        return self.out_channels * self.in_channels * self.taps * word_bits

    def output_bits(self, word_bits):
        return self.rows * self.out_cols * self.out_channels * word_bits

    def mac_count(self):
        return self.rows * self.out_cols * self.taps * self.in_channels * self.out_channels


@dataclass
class MemoryFootprint:
    input_tile_bits: int
    weight_tile_bits: int
    output_tile_bits: int

    @property
    def total_bits(self):
        return self.input_tile_bits + self.weight_tile_bits + self.output_tile_bits

    def as_dict(self):
        return {
            "input": {"bits": self.input_tile_bits, "mib": self.input_tile_bits / MIB},
            "weight": {"bits": self.weight_tile_bits, "mib": self.weight_tile_bits / MIB},
            "output": {"bits": self.output_tile_bits, "mib": self.output_tile_bits / MIB},
            "total": {"bits": self.total_bits, "mib": self.total_bits / MIB},
        }


@dataclass
class AccessTrace:
    ddr_reads_bits: int = 0
    ddr_writes_bits: int = 0
    tile_loads: int = 0
    mac_ops: int = 0

    def __iadd__(self, other):
        self.ddr_reads_bits += other.ddr_reads_bits
        self.ddr_writes_bits += other.ddr_writes_bits
        self.tile_loads += other.tile_loads
        self.mac_ops += other.mac_ops
        return self

    def as_dict(self):
        return {
            "ddr_reads_bits": self.ddr_reads_bits,
            "ddr_writes_bits": self.ddr_writes_bits,
            "tile_loads": self.tile_loads,
            "mac_ops": self.mac_ops,
        }


def _tiles(extent, size):
    return [(start, min(start + size, extent)) for start in range(0, extent, size)]


def footprint(geometry: ConvGeometry, cfg: TilingConfig, word_bits=32) -> MemoryFootprint:
    """On-chip buffers for one full tile of each kind."""
    if not 8 <= word_bits <= 64:
        raise InvalidInputError(f"word_bits must lie in [8, 64], got {word_bits}")
    T = geometry.taps
    return MemoryFootprint(
        input_tile_bits=cfg.Tr * (cfg.Tc + T - 1) * cfg.Ti * word_bits,
        weight_tile_bits=cfg.To * cfg.Ti * T * word_bits,
        output_tile_bits=cfg.To * cfg.Tr * cfg.Tc * word_bits,
    )


def no_tiling_footprint(spec: Optional[NetworkSpec], word_bits=32) -> int:
    """Bits to hold every weight and bias plus the network input on chip."""
    if spec is None:
        return 0
    input_values = spec.n_bands * spec.n_snapshots * 2
    return (spec.parameter_count(include_biases=True) + input_values) * word_bits


def simulate_schedule(geometry: ConvGeometry, cfg: TilingConfig, word_bits=32, on_tile=None) -> AccessTrace:
    """Walk the tiled loop nest and count loads, stores and MACs.

    ``on_tile(o_range, r_range, c_range, i_range)`` is called for every
    (output tile, input-channel tile) step in schedule order.
    """
    trace = AccessTrace()
    T = geometry.taps
    for o0, o1 in _tiles(geometry.out_channels, cfg.To):
        for r0, r1 in _tiles(geometry.rows, cfg.Tr):
            for c0, c1 in _tiles(geometry.out_cols, cfg.Tc):
                for i0, i1 in _tiles(geometry.in_channels, cfg.Ti):
                    rows, cols, outs, ins = r1 - r0, c1 - c0, o1 - o0, i1 - i0
                    trace.ddr_reads_bits += rows * (cols + T - 1) * ins * word_bits
                    trace.ddr_reads_bits += outs * ins * T * word_bits
                    trace.tile_loads += 1
                    trace.mac_ops += rows * cols * outs * ins * T
                    if on_tile is not None:
                        on_tile((o0, o1), (r0, r1), (c0, c1), (i0, i1))
                trace.ddr_writes_bits += (r1 - r0) * (c1 - c0) * (o1 - o0) * word_bits
    return trace


def tiled_conv_forward(x, kernel, bias, cfg: TilingConfig, word_bits=32):
    """Tiled conv layer; bit-identical to ``conv1d_forward(..., ordered=True)``.

    Partial sums of an output tile start from the bias and accumulate input
    channels in increasing order, taps innermost, exactly as the untiled
    ordered pass does.

    Args:
        x: (N, L, C) input of one sample.
        kernel: (F, C, T).
        bias: (F,).

    Returns:
        (output of shape (N, L - T + 1, F), AccessTrace)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"Tiled executor takes one (N, L, C) sample, got shape {x.shape}")
    F, C, T = kernel.shape
    if x.shape[-1] != C:
        raise ShapeMismatchError(f"Input has {x.shape[-1]} channels, kernel expects {C}")
    if x.shape[-2] < T:
        raise ShapeMismatchError(f"Input length {x.shape[-2]} is shorter than kernel length {T}")
    geometry = ConvGeometry.from_arrays(x, kernel)
    out = np.empty((geometry.rows, geometry.out_cols, F))

    def compute(o_range, r_range, c_range, i_range):
        (o0, o1), (r0, r1), (c0, c1), (i0, i1) = o_range, r_range, c_range, i_range
        cols = c1 - c0
        # Input tile: rows x (cols + T - 1) x channels, weight tile: outs x channels x T
        in_tile = x[r0:r1, c0:c1 + T - 1, i0:i1]
        w_tile = kernel[o0:o1, i0:i1, :]
        if i0 == 0:
            out[r0:r1, c0:c1, o0:o1] = bias[o0:o1]
        acc = out[r0:r1, c0:c1, o0:o1]
        for c in range(i1 - i0):
            for tau in range(T):
                acc += in_tile[:, tau:tau + cols, c, None] * w_tile[:, c, tau]

    trace = simulate_schedule(geometry, cfg, word_bits, on_tile=compute)
    return out, trace


def traffic_report(spec: NetworkSpec, cfgs: Sequence[TilingConfig], word_bits=32, weights: Optional[WeightSet] = None, x=None):
    """Per conv layer footprint and DDR traffic, plus the aggregate.

    With ``weights`` and one input sample ``x`` the layers are actually
    executed tile by tile and the counters come from that run; otherwise
    the schedule is only walked. Both give the same counts. The FC layer is
    not tiled.
    """
    if len(cfgs) != len(spec.conv_layers):
        raise InvalidInputError(f"Need one tiling config per conv layer ({len(spec.conv_layers)}), got {len(cfgs)}")
    executed = None
    if weights is not None and x is not None:
        _, executed = tiled_network_conv_stack(spec, weights, x, cfgs, word_bits)
    layers = []
    total = AccessTrace()
    for index, cfg in enumerate(cfgs):
        geometry = ConvGeometry.from_spec(spec, index)
        trace = executed[index] if executed is not None else simulate_schedule(geometry, cfg, word_bits)
        total += trace
        layers.append({
            "layer": f"conv{index}",
            "cfg": {"To": cfg.To, "Ti": cfg.Ti, "Tr": cfg.Tr, "Tc": cfg.Tc},
            "footprint": footprint(geometry, cfg, word_bits).as_dict(),
            **trace.as_dict(),
        })
        logger.debug(f"conv{index} {cfg.as_tuple()}: reads {trace.ddr_reads_bits} bits, {trace.tile_loads} tile loads")
    return {
        "word_bits": word_bits,
        "layers": layers,
        "aggregate": total.as_dict(),
        "no_tiling_bits": no_tiling_footprint(spec, word_bits),
        "no_tiling_mib": no_tiling_footprint(spec, word_bits) / MIB,
    }


def tiled_network_conv_stack(spec: NetworkSpec, weights: WeightSet, x, cfgs: Sequence[TilingConfig], word_bits=32):
    """Run every conv layer of one sample through the tiled executor.

    Returns:
        (final conv activations, list of per-layer AccessTrace)
    """
    if len(cfgs) != len(spec.conv_layers):
        raise InvalidInputError(f"Need one tiling config per conv layer ({len(spec.conv_layers)}), got {len(cfgs)}")
    current = np.asarray(x, dtype=np.float64)
    traces = []
    for kernel, bias, cfg in zip(weights.kernels, weights.biases, cfgs):
        pre, trace = tiled_conv_forward(current, kernel, bias, cfg, word_bits)
        current = np.maximum(pre, 0.0)
        traces.append(trace)
    return current, traces


def save_tiling_report(report, path):
    return write_json(path, report)
