"""Convolutional occupancy classifier written directly on numpy.

Tensors are laid out ``(batch, band, time, channel)``. Each conv layer is a
valid (unpadded) correlation along time, independently per band row:

    out[n, t, f] = bias[f] + sum_{c, tau} x[n, t + tau, c] * kernel[f, c, tau]

Kernels are stored as ``(filters, in_channels, taps)`` and are not flipped.
The conv stack is flattened band-major (band, then time, then filter) into
one fully connected layer with a sigmoid per band.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, computed_field, model_validator
from scipy.special import expit
from tqdm import tqdm

from wbsense.models.signal_model import OccupancyMask
from wbsense.utils import settings
from wbsense.utils.errors import CorruptFileError, InvalidInputError, ShapeMismatchError, TrainingDivergedError
from wbsense.utils.logger import logger
from wbsense.utils.storage import BlobReader, BlobWriter, manifest_paths, read_json, write_json

FLATTEN_ORDER = "band,time,filter"
PROB_CLAMP = 1e-7


class ConvLayerSpec(BaseModel):
    filters: int = Field(ge=1)
    kernel_len: int = Field(ge=1)
    in_channels: int = Field(ge=1)


class NetworkSpec(BaseModel):
    """Conv stack topology plus the input grid it expects."""

    n_bands: int = Field(14, ge=1)
    n_snapshots: int = Field(299, ge=1)
    conv_layers: List[ConvLayerSpec]

    @model_validator(mode="after")
    def _check_chain(self):
        if not self.conv_layers:
            raise ValueError("at least one conv layer is required")
        if self.conv_layers[0].in_channels != 2:
            raise ValueError("the first conv layer consumes the 2 real/imaginary channels")
        length = self.n_snapshots
        previous = None
        for index, layer in enumerate(self.conv_layers):
            if previous is not None and layer.in_channels != previous.filters:
                raise ValueError(f"layer {index} has {layer.in_channels} input channels, previous layer has {previous.filters} filters")
            if layer.kernel_len > length:
                raise ValueError(f"layer {index} kernel {layer.kernel_len} exceeds incoming length {length}")
            length = length - layer.kernel_len + 1
            previous = layer
        return self

    @classmethod
    def full(cls):
        return cls(
            n_bands=14,
            n_snapshots=299,
            conv_layers=[
                ConvLayerSpec(filters=256, kernel_len=150, in_channels=2),
                ConvLayerSpec(filters=128, kernel_len=100, in_channels=256),
                ConvLayerSpec(filters=64, kernel_len=51, in_channels=128),
            ],
        )

    @classmethod
    def desk(cls):
        return cls(
            n_bands=14,
            n_snapshots=299,
            conv_layers=[
                ConvLayerSpec(filters=32, kernel_len=150, in_channels=2),
                ConvLayerSpec(filters=16, kernel_len=100, in_channels=32),
                ConvLayerSpec(filters=8, kernel_len=51, in_channels=16),
            ],
        )

    @classmethod
    def tiny(cls, n_bands=3, n_snapshots=8, filters=(2, 2, 2), kernels=(3, 2, 2)):
        layers, channels = [], 2
        for f, t in zip(filters, kernels):
            layers.append(ConvLayerSpec(filters=f, kernel_len=t, in_channels=channels))
            channels = f
        return cls(n_bands=n_bands, n_snapshots=n_snapshots, conv_layers=layers)

    def time_lengths(self):
        """Time length entering each conv layer, plus the final one."""
        lengths = [self.n_snapshots]
        for layer in self.conv_layers:
            lengths.append(lengths[-1] - layer.kernel_len + 1)
        return lengths

    @property
    def input_shape(self):
        return (self.n_bands, self.n_snapshots, 2)

    @computed_field
    @property
    def fc_in(self) -> int:
        return self.n_bands * self.time_lengths()[-1] * self.conv_layers[-1].filters

    @computed_field
    @property
    def fc_out(self) -> int:
        return self.n_bands

    def shape_chain(self):
        lengths = self.time_lengths()
        chain = [self.input_shape]
        for layer, length in zip(self.conv_layers, lengths[1:]):
            chain.append((self.n_bands, length, layer.filters))
        chain.append((self.fc_in,))
        chain.append((self.fc_out,))
        return chain

    def parameter_count(self, include_biases=True):
        count = 0
        for layer in self.conv_layers:
            count += layer.filters * layer.in_channels * layer.kernel_len
            count += layer.filters if include_biases else 0
        count += self.fc_in * self.fc_out + (self.fc_out if include_biases else 0)
        return count


@dataclass
class WeightSet:
    kernels: List[np.ndarray]
    biases: List[np.ndarray]
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    @classmethod
    def zeros(cls, spec: NetworkSpec):
        return cls(
            kernels=[np.zeros((l.filters, l.in_channels, l.kernel_len)) for l in spec.conv_layers],
            biases=[np.zeros(l.filters) for l in spec.conv_layers],
            fc_weight=np.zeros((spec.fc_out, spec.fc_in)),
            fc_bias=np.zeros(spec.fc_out),
        )

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed):
        """Glorot-uniform kernels and FC weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights = cls.zeros(spec)
        for i, layer in enumerate(spec.conv_layers):
            fan_in = layer.in_channels * layer.kernel_len
            fan_out = layer.filters * layer.kernel_len
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.kernels[i] = rng.uniform(-limit, limit, weights.kernels[i].shape)
        limit = np.sqrt(6.0 / (spec.fc_in + spec.fc_out))
        weights.fc_weight = rng.uniform(-limit, limit, weights.fc_weight.shape)
        return weights

    def named_tensors(self):
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"conv{i}.kernel", k
            yield f"conv{i}.bias", b
        yield "fc.weight", self.fc_weight
        yield "fc.bias", self.fc_bias

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    @classmethod
    def from_tensors(cls, tensors):
        tensors = list(tensors)
        n_conv = (len(tensors) - 2) // 2
        return cls(
            kernels=[tensors[2 * i] for i in range(n_conv)],
            biases=[tensors[2 * i + 1] for i in range(n_conv)],
            fc_weight=tensors[-2],
            fc_bias=tensors[-1],
        )

    def map(self, fn):
        return WeightSet.from_tensors(fn(t) for t in self.tensors())

    def copy(self):
        return self.map(lambda t: np.array(t, copy=True))

    def check(self, spec: NetworkSpec):
        expected = WeightSet.zeros(spec)
        for (name, have), want in zip(self.named_tensors(), expected.tensors()):
            if have.shape != want.shape:
                raise ShapeMismatchError(f"{name} has shape {have.shape}, spec expects {want.shape}")
        if len(self.kernels) != len(spec.conv_layers):
            raise ShapeMismatchError(f"{len(self.kernels)} conv layers in weights, spec has {len(spec.conv_layers)}")
        if not all(np.all(np.isfinite(t)) for t in self.tensors()):
            raise InvalidInputError("Weights contain non-finite values")
        return self


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return expit(x)


def conv1d_forward(x, kernel, bias, ordered=False):
    """Valid correlation along time, per band row.

    Args:
        x: input of shape (..., N, L, C).
        kernel: (filters, C, T).
        bias: (filters,).
        ordered: accumulate elementwise in the fixed order bias, input
            channel, tap. Results are then bit-reproducible under any
            blocking of the loops (see the tiled executor); otherwise the
            per-tap products go through BLAS.

    Returns:
        array of shape (..., N, L - T + 1, filters).
    """
    x = np.asarray(x, dtype=np.float64)
    F, C, T = kernel.shape
    L = x.shape[-2]
    if x.shape[-1] != C:
        raise ShapeMismatchError(f"Input has {x.shape[-1]} channels, kernel expects {C}")
    if L < T:
        raise ShapeMismatchError(f"Input length {L} is shorter than kernel length {T}")
    Lo = L - T + 1
    out = np.empty(x.shape[:-2] + (Lo, F))
    out[...] = bias
    if ordered:
        for c in range(C):
            for tau in range(T):
                out += x[..., tau:tau + Lo, c, None] * kernel[:, c, tau]
        return out
    for tau in range(T):
        out += x[..., tau:tau + Lo, :] @ kernel[:, :, tau].T
    return out


def conv1d_backward(x, kernel, grad_out, need_input_grad=True):
    """Gradients of a conv layer given dLoss/dOut.

    Returns:
        (grad_kernel, grad_bias, grad_input or None)
    """
    F, C, T = kernel.shape
    Lo = grad_out.shape[-2]
    x2 = x.reshape(-1, x.shape[-2], C)
    g2 = grad_out.reshape(-1, Lo, F)
    grad_kernel = np.empty_like(kernel)
    for tau in range(T):
        grad_kernel[:, :, tau] = np.einsum("blf,blc->fc", g2, x2[:, tau:tau + Lo, :], optimize=True)
    grad_bias = g2.sum(axis=(0, 1))
    grad_input = None
    if need_input_grad:
        grad_input = np.zeros_like(x)
        for tau in range(T):
            grad_input[..., tau:tau + Lo, :] += grad_out @ kernel[:, :, tau]
    return grad_kernel, grad_bias, grad_input


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: List[np.ndarray] = field(default_factory=list)
    activations: List[np.ndarray] = field(default_factory=list)
    flat: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None


Boundary = Callable[[str, np.ndarray], np.ndarray]


def _check_input(spec: NetworkSpec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != spec.input_shape:
        raise ShapeMismatchError(f"Input shape {x.shape[-3:]} does not match network input {spec.input_shape}")
    return x


def forward_trace(spec: NetworkSpec, weights: WeightSet, x, ordered=False, boundary: Optional[Boundary] = None) -> ForwardTrace:
    """Forward pass keeping every intermediate.

    ``boundary(name, array)`` is applied to the network input ("input"),
    to each conv pre-activation ("conv{i}") and to the logits ("fc"); the
    quantized pass uses it to round values at layer boundaries.
    """
    x = _check_input(spec, x)
    if boundary is not None:
        x = boundary("input", x)
    trace = ForwardTrace(inputs=x)
    current = x
    for i, (kernel, bias) in enumerate(zip(weights.kernels, weights.biases)):
        pre = conv1d_forward(current, kernel, bias, ordered=ordered)
        if boundary is not None:
            pre = boundary(f"conv{i}", pre)
        current = relu(pre)
        trace.pre_activations.append(pre)
        trace.activations.append(current)
    batch_shape = current.shape[:-3]
    trace.flat = current.reshape(batch_shape + (-1,))
    logits = trace.flat @ weights.fc_weight.T + weights.fc_bias
    if boundary is not None:
        logits = boundary("fc", logits)
    trace.logits = logits
    trace.probabilities = sigmoid(logits)
    return trace


def forward(spec: NetworkSpec, weights: WeightSet, x, ordered=False):
    """Per-band occupancy probabilities, shape (..., N)."""
    return forward_trace(spec, weights, x, ordered=ordered).probabilities


def predict_occupancy(probabilities, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"Threshold must lie in (0, 1), got {threshold}")
    probabilities = np.asarray(probabilities)
    if probabilities.ndim == 1:
        return OccupancyMask(probabilities >= threshold)
    return [OccupancyMask(row >= threshold) for row in probabilities]


def _targets(mask):
    if isinstance(mask, OccupancyMask):
        return mask.bits.astype(np.float64)
    if isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], OccupancyMask):
        return np.stack([m.bits.astype(np.float64) for m in mask])
    return np.asarray(mask, dtype=np.float64)


def bce_loss(probabilities, mask):
    """Mean binary cross-entropy over bands (and batch), with clamped probabilities."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = _targets(mask)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def backward(spec: NetworkSpec, weights: WeightSet, x, mask, trace: Optional[ForwardTrace] = None) -> Tuple[WeightSet, float]:
    """Analytic gradients of ``bce_loss`` with respect to every weight and bias.

    Returns:
        (gradients shaped like ``weights``, loss)
    """
    if trace is None:
        trace = forward_trace(spec, weights, x)
    y = _targets(mask)
    p = trace.probabilities
    if y.shape != p.shape:
        raise ShapeMismatchError(f"Targets {y.shape} do not match predictions {p.shape}")
    loss = bce_loss(p, y)
    # bce_loss is flat where the clamp is active
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad_logits = np.where(inside, p - y, 0.0) / p.size
    grad_fc_weight = grad_logits.reshape(-1, spec.fc_out).T @ trace.flat.reshape(-1, spec.fc_in)
    grad_fc_bias = grad_logits.reshape(-1, spec.fc_out).sum(axis=0)
    grad = (grad_logits @ weights.fc_weight).reshape(trace.activations[-1].shape)

    grad_kernels = [None] * len(weights.kernels)
    grad_biases = [None] * len(weights.kernels)
    for i in reversed(range(len(weights.kernels))):
        grad = grad * (trace.pre_activations[i] > 0)
        layer_input = trace.inputs if i == 0 else trace.activations[i - 1]
        grad_kernels[i], grad_biases[i], grad = conv1d_backward(layer_input, weights.kernels[i], grad, need_input_grad=i > 0)
    return WeightSet(grad_kernels, grad_biases, grad_fc_weight, grad_fc_bias), loss


def _relu_masks(trace: ForwardTrace):
    return [pre > 0 for pre in trace.pre_activations]


def gradient_check(spec: NetworkSpec, weights: WeightSet, x, mask, step=1e-5, floor=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    Components whose perturbation flips any ReLU (a kink inside the
    difference interval) are skipped and counted.

    Returns:
        dict with ``max_relative_error``, ``checked`` and ``skipped``.
    """
    analytic, _ = backward(spec, weights, x, mask)
    base_masks = _relu_masks(forward_trace(spec, weights, x))
    worst, checked, skipped = 0.0, 0, 0
    perturbed = weights.copy()
    for tensor, grad in zip(perturbed.tensors(), analytic.tensors()):
        for index in np.ndindex(tensor.shape):
            original = tensor[index]
            tensor[index] = original + step
            plus = forward_trace(spec, perturbed, x)
            tensor[index] = original - step
            minus = forward_trace(spec, perturbed, x)
            tensor[index] = original
            flipped = any(
                not (np.array_equal(a, b) and np.array_equal(a, c))
                for a, b, c in zip(base_masks, _relu_masks(plus), _relu_masks(minus))
            )
            if flipped:
                skipped += 1
                continue
            numeric = (bce_loss(plus.probabilities, mask) - bce_loss(minus.probabilities, mask)) / (2.0 * step)
            exact = grad[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
            checked += 1
    return {"max_relative_error": worst, "checked": checked, "skipped": skipped}


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class TrainConfig(BaseModel):
    learning_rate: float = Field(1e-3, ge=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=1)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    seed: int = 0
    prediction_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    validation_fraction: float = Field(0.0, ge=0.0, lt=1.0)


class Optimizer:
    """SGD or Adam over the flat list of weight tensors (updated in place)."""

    def __init__(self, config: TrainConfig, tensors):
        self.config = config
        self.step_count = 0
        self.m = [np.zeros_like(t) for t in tensors]
        self.v = [np.zeros_like(t) for t in tensors]

    def step(self, tensors, grads):
        cfg = self.config
        lr = cfg.learning_rate
        if cfg.optimizer is OptimizerKind.SGD:
            for t, g in zip(tensors, grads):
                t -= lr * g
            return
        self.step_count += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for t, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)


@dataclass
class TrainResult:
    weights: WeightSet
    loss_trace: List[float]
    validation: List[Dict[str, float]] = field(default_factory=list)


def train(spec: NetworkSpec, inputs, targets, config: TrainConfig, initial: Optional[WeightSet] = None) -> TrainResult:
    """Mini-batch training on preprocessed inputs.

    Args:
        spec: network topology.
        inputs: (S, N, Q, 2) preprocessed tensors.
        targets: (S, N) occupancy bits (or a list of OccupancyMask).
        config: optimisation settings; ``seed`` fixes init and shuffling.
        initial: optional starting weights (copied).

    Returns:
        TrainResult with the weights and the mean training loss of each epoch.
    """
    inputs = _check_input(spec, inputs)
    targets = _targets(targets)
    if inputs.ndim != 4 or inputs.shape[0] == 0:
        raise InvalidInputError("Training needs a nonempty batch of inputs")
    if targets.shape != (inputs.shape[0], spec.n_bands):
        raise ShapeMismatchError(f"Targets {targets.shape} do not match inputs {inputs.shape}")

    init_seq, shuffle_seq, split_seq = np.random.SeedSequence(config.seed).spawn(3)
    weights = initial.copy() if initial is not None else WeightSet.initialize(spec, init_seq)
    weights.check(spec)

    order = np.arange(inputs.shape[0])
    val_idx = np.array([], dtype=int)
    if config.validation_fraction > 0:
        order = np.random.default_rng(split_seq).permutation(order)
        n_val = max(1, int(round(config.validation_fraction * order.size)))
        val_idx, order = order[:n_val], order[n_val:]
        if order.size == 0:
            raise InvalidInputError("Validation split leaves no training samples")

    tensors = weights.tensors()
    optimizer = Optimizer(config, tensors)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    result = TrainResult(weights=weights, loss_trace=[])
    logger.info(f"Training {len(spec.conv_layers)}-conv network on {order.size} samples for {config.epochs} epochs")

    for epoch in range(config.epochs):
        epoch_order = shuffle_rng.permutation(order)
        batch_losses = []
        batches = range(0, epoch_order.size, config.batch_size)
        for start in tqdm(batches, desc=f"epoch {epoch}", disable=not settings.SHOW_PROGRESS, leave=False):
            idx = epoch_order[start:start + config.batch_size]
            grads, loss = backward(spec, weights, inputs[idx], targets[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.tensors()):
                logger.error(f"Training diverged in epoch {epoch}")
                raise TrainingDivergedError("Loss became NaN or infinite", epoch)
            optimizer.step(tensors, grads.tensors())
            batch_losses.append(loss * idx.size)
        epoch_loss = float(np.sum(batch_losses) / epoch_order.size)
        result.loss_trace.append(epoch_loss)
        message = f"epoch {epoch}: loss {epoch_loss:.5f}"
        if val_idx.size:
            probs = forward(spec, weights, inputs[val_idx])
            preds = probs >= config.prediction_threshold
            truth = targets[val_idx] > 0.5
            stats = {
                "epoch": epoch,
                "loss": bce_loss(probs, targets[val_idx]),
                "pd_all_bands": float(100.0 * np.mean(preds == truth)),
                "pd_occupied_bands": float(100.0 * preds[truth].mean()) if truth.any() else float("nan"),
            }
            result.validation.append(stats)
            message += f", val loss {stats['loss']:.5f}, val Pd^AB {stats['pd_all_bands']:.2f}"
        logger.info(message)
    return result


def save_weights(path, spec: NetworkSpec, weights: WeightSet, dtype="float32"):
    """Write a JSON manifest plus a little-endian blob of the weight tensors.

    Tensors are stored layer by layer in the order of ``named_tensors``.
    """
    weights.check(spec)
    manifest_path, blob_path = manifest_paths(path)
    writer = BlobWriter(dtype)
    tensors = []
    for name, tensor in weights.named_tensors():
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": writer.add(tensor)})
    blob_digest = writer.write(blob_path)
    manifest = {
        "spec": spec.model_dump(mode="json", exclude={"fc_in", "fc_out"}),
        "fc": {"in": spec.fc_in, "out": spec.fc_out},
        "flatten_order": FLATTEN_ORDER,
        "kernel_layout": "filters,in_channels,taps",
        "dtype": dtype,
        "endianness": "little",
        "blob": blob_path.name,
        "sha256": blob_digest,
        "tensors": tensors,
    }
    write_json(manifest_path, manifest)
    logger.info(f"Saved weights to {manifest_path}")
    return manifest_path


def load_model(path) -> Tuple[NetworkSpec, WeightSet]:
    manifest_path, _ = manifest_paths(path)
    manifest = read_json(manifest_path)
    try:
        spec = NetworkSpec.model_validate(manifest["spec"])
        if manifest.get("flatten_order", FLATTEN_ORDER) != FLATTEN_ORDER:
            raise CorruptFileError(f"Unsupported flatten order {manifest['flatten_order']}", manifest_path)
        reader = BlobReader(manifest_path.parent / manifest["blob"], manifest["dtype"], expected_digest=manifest.get("sha256"))
        tensors = [reader.read(t["offset"], tuple(t["shape"])).astype(np.float64) for t in manifest["tensors"]]
    except (KeyError, TypeError, ValueError) as e:
        logger.error(f"Malformed weights manifest {manifest_path}: {e}")
        raise CorruptFileError("Malformed weights manifest", manifest_path) from e
    weights = WeightSet.from_tensors(tensors)
    weights.check(spec)
    return spec, weights


def load_weights(path, spec: Optional[NetworkSpec] = None) -> WeightSet:
    stored_spec, weights = load_model(path)
    if spec is not None:
        if stored_spec != spec:
            raise ShapeMismatchError(f"Weights file {path} was saved for a different network spec")
        weights.check(spec)
    return weights
