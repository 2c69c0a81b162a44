"""Synthetic sparse wideband spectra, channels, sub-Nyquist capture and datasets.

The measurement model is ``Y = A @ X + noise`` where ``A`` is the K x N
sensing matrix, ``X`` the N x Q band signals and ``Y`` the K x Q aliased
samples of the K low-rate branches.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wbsense.utils.errors import CorruptFileError, InvalidInputError, ShapeMismatchError
from wbsense.utils.logger import logger
from wbsense.utils.storage import (
    BlobReader,
    BlobWriter,
    array_digest,
    ensure_dir,
    manifest_paths,
    read_json,
    write_json,
)
from wbsense.utils.timestamps import add_timestamps

DEFAULT_RICIAN_K = 4.0
ESS_SPARSITY = (1, 3)
HSS_SPARSITY = (4, 7)
DEFAULT_SNR_GRID_DB = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0]


class Dimensions(BaseModel):
    """K branches (ADCs), N frequency bands, Q snapshots per capture."""

    model_config = ConfigDict(frozen=True)

    K: int = Field(8, ge=1)
    N: int = Field(14, ge=1)
    Q: int = Field(299, ge=1)

    @model_validator(mode="after")
    def _check_bands(self):
        if self.N < self.K:
            raise ValueError(f"N ({self.N}) must be >= K ({self.K})")
        return self


class ChannelKind(str, Enum):
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"
    RICIAN = "rician"


class ChannelModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ChannelKind = ChannelKind.AWGN
    rician_k_factor: float = Field(DEFAULT_RICIAN_K, ge=0.0)

    @property
    def label(self):
        if self.kind is ChannelKind.RICIAN:
            return f"rician(k={self.rician_k_factor:g})"
        return self.kind.value

    def draw_gains(self, rng, count):
        """Flat complex gains with unit mean power, one per band."""
        if self.kind is ChannelKind.AWGN:
            return np.ones(count, dtype=np.complex128)
        scattered = (rng.standard_normal(count) + 1j * rng.standard_normal(count)) / np.sqrt(2.0)
        if self.kind is ChannelKind.RAYLEIGH:
            return scattered
        k = self.rician_k_factor
        los = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, count))
        return np.sqrt(k / (k + 1.0)) * los + np.sqrt(1.0 / (k + 1.0)) * scattered


class DatasetSpec(BaseModel):
    """One dataset: every (sparsity, snr) cell holds ``samples_per_cell`` captures."""

    dims: Dimensions = Field(default_factory=Dimensions)
    sparsity_range: Tuple[int, int] = ESS_SPARSITY
    snr_grid_db: List[float] = Field(default_factory=lambda: list(DEFAULT_SNR_GRID_DB), min_length=1)
    channel: ChannelModel = Field(default_factory=ChannelModel)
    samples_per_cell: int = Field(1, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_sparsity(self):
        low, high = self.sparsity_range
        if not 0 <= low <= high <= self.dims.N:
            raise ValueError(f"sparsity_range {self.sparsity_range} must lie within [0, {self.dims.N}]")
        return self

    @classmethod
    def ess(cls, **kwargs):
        return cls(sparsity_range=ESS_SPARSITY, **kwargs)

    @classmethod
    def hss(cls, **kwargs):
        return cls(sparsity_range=HSS_SPARSITY, **kwargs)

    def cells(self):
        """(cell index, sparsity, snr) in generation order."""
        low, high = self.sparsity_range
        index = 0
        for sparsity in range(low, high + 1):
            for snr_db in self.snr_grid_db:
                yield index, sparsity, float(snr_db)
                index += 1


@dataclass
class OccupancyMask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).ravel()

    @property
    def n_bands(self):
        return self.bits.size

    @property
    def popcount(self):
        return int(self.bits.sum())

    @property
    def support(self):
        return np.flatnonzero(self.bits)

    def to_bits(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @classmethod
    def from_bits(cls, text: str):
        if any(ch not in "01" for ch in text):
            raise InvalidInputError(f"Invalid occupancy bit string: {text!r}")
        return cls(np.array([ch == "1" for ch in text], dtype=bool))

    @classmethod
    def from_support(cls, n_bands, support):
        bits = np.zeros(n_bands, dtype=bool)
        bits[list(support)] = True
        return cls(bits)

    def __eq__(self, other):
        return isinstance(other, OccupancyMask) and np.array_equal(self.bits, other.bits)


@dataclass
class SensingMatrix:
    entries: np.ndarray
    seed: Optional[int] = None

    @property
    def shape(self):
        return self.entries.shape

    @property
    def digest(self):
        return array_digest(np.asarray(self.entries, dtype=np.complex128))


@dataclass
class WidebandSpectrum:
    samples: np.ndarray


@dataclass
class SnsCapture:
    samples: np.ndarray
    snr_db: float
    channel: ChannelModel
    matrix_digest: Optional[str] = None


@dataclass
class Dataset:
    spec: DatasetSpec
    sensing_matrix: SensingMatrix
    captures: List[SnsCapture] = field(default_factory=list)
    masks: List[OccupancyMask] = field(default_factory=list)
    spectra: List[WidebandSpectrum] = field(default_factory=list)
    digest: Optional[str] = None

    def __len__(self):
        return len(self.captures)

    def __iter__(self):
        return iter(zip(self.captures, self.masks, self.spectra))

    def subset(self, indices):
        indices = list(indices)
        return Dataset(
            spec=self.spec,
            sensing_matrix=self.sensing_matrix,
            captures=[self.captures[i] for i in indices],
            masks=[self.masks[i] for i in indices],
            spectra=[self.spectra[i] for i in indices],
            digest=self.digest,
        )

    def snr_values(self):
        return sorted({c.snr_db for c in self.captures})


def generate_sensing_matrix(dims: Dimensions, seed) -> SensingMatrix:
    """I.i.d. circularly-symmetric complex Gaussian entries with unit variance."""
    rng = np.random.default_rng(seed)
    while True:
        entries = (rng.standard_normal((dims.K, dims.N)) + 1j * rng.standard_normal((dims.K, dims.N))) / np.sqrt(2.0)
        # A zero column has probability zero; redraw rather than return an unobservable band
        if np.all(np.linalg.norm(entries, axis=0) > 0):
            return SensingMatrix(entries=entries, seed=seed)


def generate_spectrum(dims: Dimensions, occupied: OccupancyMask, channel: ChannelModel, seed) -> WidebandSpectrum:
    if occupied.n_bands != dims.N:
        raise ShapeMismatchError(f"Occupancy mask has {occupied.n_bands} bands, expected {dims.N}")
    rng = np.random.default_rng(seed)
    samples = np.zeros((dims.N, dims.Q), dtype=np.complex128)
    support = occupied.support
    if support.size:
        symbols = (rng.standard_normal((support.size, dims.Q)) + 1j * rng.standard_normal((support.size, dims.Q))) / np.sqrt(2.0)
        gains = channel.draw_gains(rng, support.size)
        samples[support] = gains[:, None] * symbols
    return WidebandSpectrum(samples=samples)


def capture(A: SensingMatrix, X: WidebandSpectrum, snr_db, seed, channel: Optional[ChannelModel] = None) -> SnsCapture:
    """Sub-Nyquist capture ``Y = A @ X + noise`` with SNR measured on ``A @ X``."""
    entries = np.asarray(A.entries)
    signal = np.asarray(X.samples)
    if entries.shape[1] != signal.shape[0]:
        raise ShapeMismatchError(f"Sensing matrix {entries.shape} does not conform with spectrum {signal.shape}")
    clean = entries @ signal
    snr_db = float(snr_db)
    samples = clean
    if np.isfinite(snr_db):
        rng = np.random.default_rng(seed)
        signal_power = np.mean(np.abs(clean) ** 2)
        noise_power = signal_power / 10.0 ** (snr_db / 10.0)
        noise = (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)) * np.sqrt(noise_power / 2.0)
        samples = clean + noise
    elif snr_db < 0:
        raise InvalidInputError("snr_db of -inf is not a valid capture setting")
    return SnsCapture(samples=samples, snr_db=snr_db, channel=channel or ChannelModel(), matrix_digest=A.digest)


def measured_snr_db(capture_: SnsCapture, clean) -> float:
    """Realised SNR of a capture given the noiseless ``A @ X`` it was built from."""
    noise = capture_.samples - clean
    noise_power = np.mean(np.abs(noise) ** 2)
    if noise_power == 0:
        return float("inf")
    return float(10.0 * np.log10(np.mean(np.abs(clean) ** 2) / noise_power))


def _cell_rng(seed, cell_index):
    return np.random.default_rng([seed, cell_index])


def generate_dataset(spec: DatasetSpec, directory=None, sensing_matrix: Optional[SensingMatrix] = None) -> Dataset:
    """Generate the full (sparsity x snr) grid and optionally persist it.

    Each cell draws from its own RNG stream derived from (seed, cell index),
    so the result does not depend on generation order.
    """
    dims = spec.dims
    A = sensing_matrix or generate_sensing_matrix(dims, spec.seed)
    dataset = Dataset(spec=spec, sensing_matrix=A)
    logger.info(
        f"Generating dataset: sparsity {spec.sparsity_range}, {len(spec.snr_grid_db)} SNRs, "
        f"{spec.samples_per_cell} samples per cell, channel {spec.channel.label}"
    )
    for cell_index, sparsity, snr_db in spec.cells():
        rng = _cell_rng(spec.seed, cell_index)
        for _ in range(spec.samples_per_cell):
            support = np.sort(rng.choice(dims.N, size=sparsity, replace=False))
            mask = OccupancyMask.from_support(dims.N, support)
            spectrum_seed, noise_seed = rng.integers(0, 2**63 - 1, size=2)
            spectrum = generate_spectrum(dims, mask, spec.channel, int(spectrum_seed))
            dataset.captures.append(capture(A, spectrum, snr_db, int(noise_seed), channel=spec.channel))
            dataset.masks.append(mask)
            dataset.spectra.append(spectrum)
    logger.info(f"Generated {len(dataset)} samples")
    if directory is not None:
        save_dataset(dataset, directory)
    return dataset


def save_dataset(dataset: Dataset, directory):
    """Write ``manifest.json`` and the complex64 ``samples.bin`` blob.

    The blob holds the sensing matrix first, then for every sample its
    capture Y (K x Q) followed by its spectrum X (N x Q), row-major.
    """
    directory = ensure_dir(directory)
    manifest_path, blob_path = manifest_paths(directory)
    dims = dataset.spec.dims
    writer = BlobWriter("complex64")
    matrix_offset = writer.add(dataset.sensing_matrix.entries)
    samples = []
    for cap, mask, spectrum in dataset:
        samples.append({
            "snr_db": cap.snr_db,
            "channel": cap.channel.model_dump(mode="json"),
            "mask": mask.to_bits(),
            "y_offset": writer.add(cap.samples),
            "x_offset": writer.add(spectrum.samples),
        })
    blob_digest = writer.write(blob_path)
    spec_doc = dataset.spec.model_dump(mode="json")
    # Noiseless captures use an infinite SNR, which JSON mode would turn into null
    spec_doc["snr_grid_db"] = [float(s) for s in dataset.spec.snr_grid_db]
    manifest = {
        "dims": dims.model_dump(),
        "spec": spec_doc,
        "seed": dataset.spec.seed,
        "sample_count": len(samples),
        "dtype": "complex64",
        "layout": "row-major",
        "endianness": "little",
        "blob": blob_path.name,
        "sha256": blob_digest,
        "sensing_matrix": {"seed": dataset.sensing_matrix.seed, "offset": matrix_offset, "shape": [dims.K, dims.N]},
        "samples": samples,
    }
    write_json(manifest_path, add_timestamps(manifest))
    dataset.digest = blob_digest
    logger.info(f"Saved dataset with {len(samples)} samples to {directory}")
    return manifest_path


def load_dataset(path) -> Dataset:
    manifest_path, _ = manifest_paths(path)
    manifest = read_json(manifest_path)
    try:
        spec = DatasetSpec.model_validate(manifest["spec"])
        blob_path = manifest_path.parent / manifest["blob"]
        reader = BlobReader(blob_path, manifest["dtype"], expected_digest=manifest.get("sha256"))
        dims = spec.dims
        matrix_info = manifest["sensing_matrix"]
        A = SensingMatrix(
            entries=reader.read(matrix_info["offset"], (dims.K, dims.N)).astype(np.complex128),
            seed=matrix_info.get("seed"),
        )
        dataset = Dataset(spec=spec, sensing_matrix=A, digest=reader.digest)
        for record in manifest["samples"]:
            channel = ChannelModel.model_validate(record["channel"])
            y = reader.read(record["y_offset"], (dims.K, dims.Q)).astype(np.complex128)
            x = reader.read(record["x_offset"], (dims.N, dims.Q)).astype(np.complex128)
            dataset.captures.append(SnsCapture(samples=y, snr_db=float(record["snr_db"]), channel=channel, matrix_digest=A.digest))
            dataset.masks.append(OccupancyMask.from_bits(record["mask"]))
            dataset.spectra.append(WidebandSpectrum(samples=x))
    except (KeyError, TypeError, ValueError) as e:
        logger.error(f"Malformed dataset manifest {manifest_path}: {e}")
        raise CorruptFileError("Malformed dataset manifest", manifest_path) from e
    if len(dataset) != manifest.get("sample_count", len(dataset)):
        raise CorruptFileError("Sample count does not match manifest", manifest_path)
    logger.info(f"Loaded dataset with {len(dataset)} samples from {manifest_path.parent}")
    return dataset


def merge_datasets(datasets: List[Dataset]) -> Dataset:
    """Concatenate datasets captured with the same sensing matrix."""
    if not datasets:
        raise InvalidInputError("Nothing to merge")
    first = datasets[0]
    merged = Dataset(spec=first.spec, sensing_matrix=first.sensing_matrix)
    for ds in datasets:
        if ds.sensing_matrix.digest != first.sensing_matrix.digest:
            raise InvalidInputError("Datasets were captured with different sensing matrices")
        merged.captures.extend(ds.captures)
        merged.masks.extend(ds.masks)
        merged.spectra.extend(ds.spectra)
    return merged
