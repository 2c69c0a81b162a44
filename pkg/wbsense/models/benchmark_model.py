"""End-to-end comparison of OMP and the DL pipeline over stored datasets.

A benchmark cell is one (dataset, method, SNR, channel) combination. Cells
are independent and may run on a thread pool; results are collected in
submission order so reports do not depend on scheduling.
"""
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from wbsense.models.metrics_model import (
    ComplexityParams,
    Metrics,
    dlwss_op_count,
    evaluate,
    omp_op_count,
)
from wbsense.models.network_model import NetworkSpec, WeightSet, forward, load_model
from wbsense.models.omp_model import EpsilonTable, OmpConfig, calibrate_epsilon, omp_recover
from wbsense.models.preprocess_model import Preprocessor
from wbsense.models.quantization_model import QuantizationPolicy, analyze_dynamic_range, quantized_forward
from wbsense.models.signal_model import ESS_SPARSITY, HSS_SPARSITY, Dataset, DatasetSpec, load_dataset
from wbsense.utils import settings
from wbsense.utils.errors import ShapeMismatchError, StorageError
from wbsense.utils.logger import logger
from wbsense.utils.storage import ensure_dir, read_json, write_json
from wbsense.utils.timestamps import add_timestamps

REPORT_COLUMNS = [
    "dataset",
    "method",
    "snr_db",
    "channel",
    "sparsity_knowledge",
    "pd_all_bands",
    "pd_occupied_bands",
    "samples",
    "dataset_digest",
]
# Samples used to size integer bits when no quantization policy is given
RANGE_ANALYSIS_SAMPLES = 256


class BenchmarkMethod(str, Enum):
    OMP_KNOWN = "omp_known"
    OMP_EPS = "omp_eps"
    DLWSS = "dlwss"
    DLWSS_QUANTIZED = "dlwss_quantized"

    @property
    def sparsity_knowledge(self):
        return "known" if self is BenchmarkMethod.OMP_KNOWN else "unknown"

    @property
    def needs_network(self):
        return self in (BenchmarkMethod.DLWSS, BenchmarkMethod.DLWSS_QUANTIZED)


class CalibrationSettings(BaseModel):
    """Used for OMP-eps when no stored epsilon table is given."""

    trials: int = Field(20, ge=1)
    sparsity_range: Optional[Tuple[int, int]] = None


class BenchmarkConfig(BaseModel):
    datasets: List[str] = Field(min_length=1)
    methods: List[BenchmarkMethod] = Field(min_length=1)
    weights: Optional[str] = None
    epsilon_table: Optional[str] = None
    calibration: CalibrationSettings = Field(default_factory=CalibrationSettings)
    policy: Optional[QuantizationPolicy] = None
    extra_integer_bits: int = Field(4, ge=0)
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    seed: int = 0
    workers: int = Field(1, ge=1)
    out_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check_methods(self):
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")
        if any(m.needs_network for m in self.methods) and not self.weights:
            raise ValueError("dlwss methods need a weights file")
        return self

    @classmethod
    def load(cls, path):
        """Parse a JSON config; relative paths are taken from the config's folder."""
        path = Path(path)
        doc = read_json(path)
        config = cls.model_validate(doc)
        base = path.parent

        def resolve(p):
            return str(p if Path(p).is_absolute() else base / p)

        return config.model_copy(update={
            "datasets": [resolve(p) for p in config.datasets],
            "weights": resolve(config.weights) if config.weights else None,
            "epsilon_table": resolve(config.epsilon_table) if config.epsilon_table else None,
        })


@dataclass
class BenchmarkCell:
    dataset: str
    method: BenchmarkMethod
    snr_db: float
    channel: str
    metrics: Metrics
    dataset_digest: Optional[str] = None

    def to_row(self):
        return {
            "dataset": self.dataset,
            "method": self.method.value,
            "snr_db": self.snr_db,
            "channel": self.channel,
            "sparsity_knowledge": self.method.sparsity_knowledge,
            **self.metrics.as_dict(),
            "dataset_digest": self.dataset_digest,
        }


@dataclass
class BenchmarkReport:
    config: BenchmarkConfig
    datasets: List[Dict] = field(default_factory=list)
    cells: List[BenchmarkCell] = field(default_factory=list)
    op_counts: Dict = field(default_factory=dict)
    epsilon_tables: Dict[str, Dict] = field(default_factory=dict)
    policy: Optional[QuantizationPolicy] = None

    def to_frame(self):
        return pd.DataFrame([cell.to_row() for cell in self.cells], columns=REPORT_COLUMNS)

    def to_dict(self):
        return {
            "config": self.config.model_dump(mode="json"),
            "seed": self.config.seed,
            "datasets": self.datasets,
            "quantization_policy": self.policy.model_dump(mode="json") if self.policy else None,
            "epsilon_tables": self.epsilon_tables,
            "op_counts": self.op_counts,
            "cells": [cell.to_row() for cell in self.cells],
        }

    def write(self, out_dir):
        out_dir = ensure_dir(out_dir)
        write_json(out_dir / "report.json", add_timestamps(self.to_dict()))
        csv_path = out_dir / "report.csv"
        try:
            self.to_frame().to_csv(csv_path, index=False)
        except OSError as e:
            logger.error(f"Error writing {csv_path}: {e}")
            raise StorageError("Cannot write report", csv_path) from e
        logger.info(f"Benchmark report written to {out_dir}")
        return out_dir


def regime_label(spec: DatasetSpec):
    low, high = spec.sparsity_range
    if (low, high) == ESS_SPARSITY:
        return "ESS"
    if (low, high) == HSS_SPARSITY:
        return "HSS"
    return f"S{low}-{high}"


def _check_network(spec: NetworkSpec, dataset: Dataset, weights_path, dataset_path):
    dims = dataset.spec.dims
    if (spec.n_bands, spec.n_snapshots) != (dims.N, dims.Q):
        raise ShapeMismatchError(
            f"Network in {weights_path} expects {spec.n_bands}x{spec.n_snapshots} inputs, "
            f"dataset {dataset_path} has N={dims.N}, Q={dims.Q}"
        )


def _cell_groups(dataset: Dataset):
    """Sample indices grouped by (snr, channel), in first-seen order."""
    groups: "OrderedDict[Tuple[float, str], List[int]]" = OrderedDict()
    for index, cap in enumerate(dataset.captures):
        groups.setdefault((cap.snr_db, cap.channel.label), []).append(index)
    return groups


class _Evaluator:
    """Holds the loaded artefacts shared read-only by every cell."""

    def __init__(self, config: BenchmarkConfig, network=None, epsilon_tables=None, policy=None):
        self.config = config
        self.network = network
        self.epsilon_tables = epsilon_tables or {}
        self.policy = policy
        self._preprocessors: Dict[int, Preprocessor] = {}

    def preprocessor(self, ds_index, dataset: Dataset):
        if ds_index not in self._preprocessors:
            self._preprocessors[ds_index] = Preprocessor(dataset.sensing_matrix)
        return self._preprocessors[ds_index]

    def predict(self, method: BenchmarkMethod, ds_index, dataset: Dataset, indices, snr_db):
        A = dataset.sensing_matrix
        n_bands = dataset.spec.dims.N
        if method is BenchmarkMethod.OMP_KNOWN:
            preds = []
            for i in indices:
                sparsity = dataset.masks[i].popcount
                if sparsity == 0:
                    preds.append(np.zeros(n_bands, dtype=bool))
                    continue
                result = omp_recover(A, dataset.captures[i], OmpConfig.true_sparsity(sparsity, A.shape[0]))
                preds.append(result.to_mask(n_bands).bits)
            return np.stack(preds)
        if method is BenchmarkMethod.OMP_EPS:
            epsilon = self.epsilon_tables[ds_index].lookup(snr_db)
            config = OmpConfig.residual_threshold(epsilon)
            return np.stack([omp_recover(A, dataset.captures[i], config).to_mask(n_bands).bits for i in indices])

        spec, weights = self.network
        inputs = self.preprocessor(ds_index, dataset).transform_batch([dataset.captures[i] for i in indices])
        if method is BenchmarkMethod.DLWSS:
            probs = forward(spec, weights, inputs)
        else:
            probs = quantized_forward(spec, weights, inputs, self.policy).probabilities
        return probs >= self.config.threshold


def _resolve_epsilon_tables(config: BenchmarkConfig, datasets: List[Dataset]):
    if BenchmarkMethod.OMP_EPS not in config.methods:
        return {}
    if config.epsilon_table:
        table = EpsilonTable.load(config.epsilon_table)
        return {i: table for i in range(len(datasets))}
    tables = {}
    for i, dataset in enumerate(datasets):
        spec = dataset.spec
        sparsity_range = config.calibration.sparsity_range or (max(spec.sparsity_range[0], 1), min(spec.sparsity_range[1], spec.dims.K))
        tables[i] = calibrate_epsilon(
            dataset.sensing_matrix,
            spec.snr_grid_db,
            spec.channel,
            sparsity_range,
            config.calibration.trials,
            seed=config.seed,
            Q=spec.dims.Q,
        )
    return tables


def _resolve_policy(config: BenchmarkConfig, network, datasets: List[Dataset]):
    if BenchmarkMethod.DLWSS_QUANTIZED not in config.methods:
        return None
    if config.policy is not None:
        return config.policy
    spec, weights = network
    dataset = datasets[0]
    count = min(len(dataset), RANGE_ANALYSIS_SAMPLES)
    inputs = Preprocessor(dataset.sensing_matrix).transform_batch(dataset.captures[:count])
    report = analyze_dynamic_range(spec, weights, inputs)
    policy = QuantizationPolicy.from_range_report(report, extra_integer_bits=config.extra_integer_bits)
    logger.info(f"Quantization policy from dynamic range of {count} samples: {policy.label()}")
    return policy


def run_benchmark(config: BenchmarkConfig, out_dir=None, write=True) -> BenchmarkReport:
    """Evaluate every configured method over every (SNR, channel) cell of every dataset.

    Args:
        config: validated benchmark configuration.
        out_dir: where report.json and report.csv go; defaults to
            ``config.out_dir`` and then to ``<WBSENSE_OUTPUT_DIR>/bench``.
        write: set False to skip writing artifacts.

    Returns:
        BenchmarkReport with one cell per (dataset, method, snr, channel).
    """
    datasets = [load_dataset(path) for path in config.datasets]

    network: Optional[Tuple[NetworkSpec, WeightSet]] = None
    if any(m.needs_network for m in config.methods):
        network = load_model(config.weights)
        for path, dataset in zip(config.datasets, datasets):
            _check_network(network[0], dataset, config.weights, path)

    epsilon_tables = _resolve_epsilon_tables(config, datasets)
    policy = _resolve_policy(config, network, datasets)
    evaluator = _Evaluator(config, network=network, epsilon_tables=epsilon_tables, policy=policy)
    report = BenchmarkReport(config=config, policy=policy)

    tasks = []
    labels = []
    for ds_index, (path, dataset) in enumerate(zip(config.datasets, datasets)):
        label = regime_label(dataset.spec)
        if label in labels:
            label = f"{label}#{ds_index}"
        labels.append(label)
        dims = dataset.spec.dims
        report.datasets.append({
            "label": label,
            "path": str(path),
            "digest": dataset.digest,
            "samples": len(dataset),
            "sparsity_range": list(dataset.spec.sparsity_range),
            "channel": dataset.spec.channel.label,
            "dims": dims.model_dump(),
        })
        report.op_counts[label] = {
            "omp": omp_op_count(ComplexityParams.from_dims(dims, min(dataset.spec.sparsity_range[1], dims.K))),
        }
        if network is not None:
            report.op_counts[label]["dlwss"] = dlwss_op_count(network[0], dims)
        if ds_index in epsilon_tables:
            report.epsilon_tables[label] = epsilon_tables[ds_index].to_dict()
        for (snr_db, channel), indices in _cell_groups(dataset).items():
            for method in config.methods:
                tasks.append((ds_index, label, method, snr_db, channel, indices))

    def run_cell(task):
        ds_index, label, method, snr_db, channel, indices = task
        dataset = datasets[ds_index]
        preds = evaluator.predict(method, ds_index, dataset, indices, snr_db)
        metrics = evaluate(preds, [dataset.masks[i] for i in indices])
        logger.info(
            f"{label} {method.value} @ {snr_db} dB ({channel}): Pd^AB {metrics.pd_all_bands:.2f}, "
            f"Pd^OB {metrics.pd_occupied_bands if metrics.pd_occupied_bands is not None else 'n/a'}"
        )
        return BenchmarkCell(label, method, snr_db, channel, metrics, dataset.digest)

    # Preprocessors are built lazily; create them up front so worker threads only read
    for ds_index, dataset in enumerate(datasets):
        if network is not None:
            evaluator.preprocessor(ds_index, dataset)

    logger.info(f"Benchmark: {len(tasks)} cells over {len(datasets)} datasets with {config.workers} worker(s)")
    progress = dict(total=len(tasks), desc="bench", disable=not settings.SHOW_PROGRESS, leave=False)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            report.cells = list(tqdm(pool.map(run_cell, tasks), **progress))
    else:
        report.cells = [run_cell(task) for task in tqdm(tasks, **progress)]

    if write:
        report.write(out_dir or config.out_dir or Path(settings.OUTPUT_DIR) / "bench")
    return report
