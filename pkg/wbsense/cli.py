"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 file I/O
failure, 3 numerical failure.
"""
import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError

from wbsense.models.benchmark_model import BenchmarkConfig, run_benchmark
from wbsense.models.metrics_model import (
    ComplexityParams,
    complexity_summary,
    evaluate,
    instrumented_omp_op_count,
)
from wbsense.models.network_model import NetworkSpec, TrainConfig, forward, load_model, save_weights, train
from wbsense.models.omp_model import EpsilonTable, OmpConfig, calibrate_epsilon, epsilon_channel_sensitivity, omp_recover
from wbsense.models.preprocess_model import Preprocessor, masks_to_targets
from wbsense.models.quantization_model import (
    QuantizationPolicy,
    analyze_dynamic_range,
    float_reference,
    activation_sweep_policies,
    wl_sweep,
)
from wbsense.models.signal_model import (
    ChannelKind,
    ChannelModel,
    ESS_SPARSITY,
    HSS_SPARSITY,
    DatasetSpec,
    Dimensions,
    OccupancyMask,
    capture,
    generate_dataset,
    generate_sensing_matrix,
    generate_spectrum,
    load_dataset,
    merge_datasets,
)
from wbsense.models.tiling_model import TilingConfig, save_tiling_report, traffic_report
from wbsense.utils import settings
from wbsense.utils.errors import InvalidInputError, SensingError
from wbsense.utils.logger import logger
from wbsense.utils.storage import ensure_dir, read_json, write_json

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2

NETWORK_PRESETS = {"full": NetworkSpec.full, "desk": NetworkSpec.desk, "tiny": NetworkSpec.tiny}


class SensingGroup(click.Group):
    """Click group that turns failures into the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args=args, prog_name=prog_name, complete_var=complete_var, standalone_mode=False, **extra)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_INVALID)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_INVALID)
        except ValidationError as e:
            logger.error(f"Invalid configuration: {e}")
            click.echo(f"error: invalid configuration\n{e}", err=True)
            sys.exit(EXIT_INVALID)
        except SensingError as e:
            logger.error(f"{type(e).__name__}: {e.message}")
            click.echo(f"error: {e.message}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            logger.error(f"I/O error: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_IO)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


def common_options(fn):
    fn = click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="json", show_default=True,
                      help="Format of tabular output.")(fn)
    fn = click.option("--out", type=click.Path(path_type=Path), default=None, help="Output file or directory.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
                      help="JSON document with the command's settings.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Overrides the seed of the config.")(fn)
    return fn


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def emit(data, fmt):
    """Print rows (list of dicts, dict or DataFrame) to stdout."""
    if fmt == "csv":
        if isinstance(data, pd.DataFrame):
            frame = data
        else:
            frame = pd.json_normalize(data if isinstance(data, list) else [data])
        click.echo(frame.to_csv(index=False), nl=False)
        return
    if isinstance(data, pd.DataFrame):
        data = data.to_dict(orient="records")
    click.echo(json.dumps(data, indent=2, default=_json_default))


def load_config(model_cls, path, seed=None, **overrides):
    """Validate a JSON config (or the defaults) and apply flag overrides."""
    doc = read_json(path) if path is not None else {}
    config = model_cls.model_validate(doc)
    update = {k: v for k, v in overrides.items() if v is not None}
    if seed is not None:
        update["seed"] = seed
    if update:
        config = model_cls.model_validate({**config.model_dump(), **update})
    return config


def network_spec(value) -> NetworkSpec:
    if value in NETWORK_PRESETS:
        return NETWORK_PRESETS[value]()
    return NetworkSpec.model_validate(read_json(value))


def load_datasets(paths):
    if not paths:
        raise InvalidInputError("At least one --dataset is required")
    datasets = [load_dataset(p) for p in paths]
    return datasets[0] if len(datasets) == 1 else merge_datasets(datasets)


def default_out(name):
    return Path(settings.OUTPUT_DIR) / name


@click.group(cls=SensingGroup)
def cli():
    """Sub-Nyquist wideband spectrum sensing: data, OMP, CNN, quantization and tiling tools."""


@cli.command("gen-data")
@common_options
@click.option("--preset", type=click.Choice(["ess", "hss"]), default=None, help="Sparsity regime preset.")
@click.option("--samples-per-cell", type=int, default=None)
@click.option("--channel", type=click.Choice([k.value for k in ChannelKind]), default=None)
@click.option("--snr", "snrs", type=float, multiple=True, help="SNR grid in dB (repeatable).")
def gen_data(seed, config_path, out, fmt, preset, samples_per_cell, channel, snrs):
    """Generate a dataset from a DatasetSpec and write manifest.json + samples.bin."""
    presets = {"ess": ESS_SPARSITY, "hss": HSS_SPARSITY}
    spec = load_config(
        DatasetSpec,
        config_path,
        seed=seed,
        sparsity_range=presets.get(preset),
        samples_per_cell=samples_per_cell,
        channel=ChannelModel(kind=channel) if channel else None,
        snr_grid_db=list(snrs) or None,
    )
    out = out or default_out("dataset")
    dataset = generate_dataset(spec, directory=out)
    emit({
        "directory": str(out),
        "samples": len(dataset),
        "digest": dataset.digest,
        "sparsity_range": list(spec.sparsity_range),
        "channel": spec.channel.label,
        "seed": spec.seed,
    }, fmt)


@cli.command("calibrate-eps")
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(path_type=Path), default=None,
              help="Take the sensing matrix, SNR grid and channel from a stored dataset.")
@click.option("--trials", type=int, default=20, show_default=True)
@click.option("--sparsity", type=(int, int), default=None, help="Sparsity range used for calibration.")
@click.option("--channel", "channels", type=click.Choice([k.value for k in ChannelKind]), multiple=True,
              help="Calibrate for several channels and report the sensitivity across them.")
def calibrate_eps(seed, config_path, out, fmt, dataset_path, trials, sparsity, channels):
    """Calibrate the OMP-eps residual threshold per SNR."""
    if dataset_path is not None:
        dataset = load_dataset(dataset_path)
        spec, A = dataset.spec, dataset.sensing_matrix
    else:
        spec = load_config(DatasetSpec, config_path)
        A = generate_sensing_matrix(spec.dims, spec.seed)
    seed = spec.seed if seed is None else seed
    low, high = sparsity or spec.sparsity_range
    sparsity_range = (max(low, 1), min(high, spec.dims.K))
    channel_models = [ChannelModel(kind=c) for c in channels] or [spec.channel]

    tables = [
        calibrate_epsilon(A, spec.snr_grid_db, ch, sparsity_range, trials, seed=seed, Q=spec.dims.Q)
        for ch in channel_models
    ]
    rows = []
    for table in tables:
        spread = table.sparsity_spread()
        for snr in table.snr_grid:
            rows.append({
                "channel": table.channel.label,
                "snr_db": snr,
                "epsilon": table.entries[snr],
                "sparsity_spread": spread.get(snr, 0.0),
            })
    out = out or default_out("epsilon.json" if len(tables) == 1 else "epsilon")
    if len(tables) == 1:
        tables[0].save(out)
    else:
        ensure_dir(out)
        for table in tables:
            table.save(Path(out) / f"epsilon_{table.channel.kind.value}.json")
        sensitivity = epsilon_channel_sensitivity(tables)
        write_json(Path(out) / "sensitivity.json", {**sensitivity, "deviations": {str(k): v for k, v in sensitivity["deviations"].items()}})
        logger.info(f"Epsilon channel sensitivity: max deviation {sensitivity['max_deviation']:.3f}")
    for table in tables:
        logger.info(f"{table.channel.label}: SNR spread {table.snr_spread():.4e}, max sparsity spread {max(table.sparsity_spread().values()):.4e}")
    emit(rows, fmt)


@cli.command("omp")
@common_options
@click.option("--dataset", "dataset_paths", type=click.Path(path_type=Path), multiple=True)
@click.option("--sparsity", type=int, default=None, help="Known sparsity; omit to use each sample's true count.")
@click.option("--epsilon-table", type=click.Path(path_type=Path), default=None,
              help="Stop on the residual threshold of this table instead of a sparsity.")
@click.option("--index", "indices", type=int, multiple=True, help="Only recover these samples.")
def omp(seed, config_path, out, fmt, dataset_paths, sparsity, epsilon_table, indices):
    """Recover band occupancy with OMP (known sparsity or residual threshold)."""
    dataset = load_datasets(dataset_paths)
    base = load_config(OmpConfig, config_path, sparsity=sparsity) if config_path else None
    table = EpsilonTable.load(epsilon_table) if epsilon_table else None
    n_bands = dataset.spec.dims.N
    selected = list(indices) or list(range(len(dataset)))
    rows, preds, truths = [], [], []
    for i in selected:
        if not 0 <= i < len(dataset):
            raise InvalidInputError(f"Sample index {i} is out of range [0, {len(dataset)})")
        cap, mask = dataset.captures[i], dataset.masks[i]
        if table is not None:
            config = OmpConfig.residual_threshold(table.lookup(cap.snr_db))
        elif base is not None:
            config = base
        else:
            config = OmpConfig.known_sparsity(sparsity) if sparsity else OmpConfig.true_sparsity(max(mask.popcount, 1), dataset.spec.dims.K)
        result = omp_recover(dataset.sensing_matrix, cap, config)
        predicted = result.to_mask(n_bands)
        preds.append(predicted)
        truths.append(mask)
        rows.append({
            "index": i,
            "snr_db": cap.snr_db,
            "truth": mask.to_bits(),
            "predicted": predicted.to_bits(),
            "iterations": result.iterations,
            "residual": result.final_residual_norm,
        })
    metrics = evaluate(preds, truths)
    logger.info(f"OMP over {metrics.sample_count} samples: Pd^AB {metrics.pd_all_bands:.2f}, Pd^OB {metrics.pd_occupied_bands}")
    if out is not None and fmt == "csv":
        pd.DataFrame(rows).to_csv(out, index=False)
    elif out is not None:
        write_json(out, {"metrics": metrics.as_dict(), "samples": rows})
    emit(rows, fmt)


@cli.command("train")
@common_options
@click.option("--dataset", "dataset_paths", type=click.Path(path_type=Path), multiple=True)
@click.option("--network", "network", default="desk", show_default=True, help="full, desk, tiny or a NetworkSpec JSON path.")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--dtype", type=click.Choice(["float32", "float64"]), default="float32", show_default=True)
def train_cmd(seed, config_path, out, fmt, dataset_paths, network, epochs, learning_rate, batch_size, dtype):
    """Train the occupancy network on one or more datasets."""
    config = load_config(TrainConfig, config_path, seed=seed, epochs=epochs, learning_rate=learning_rate, batch_size=batch_size)
    spec = network_spec(network)
    dataset = load_datasets(dataset_paths)
    inputs = Preprocessor(dataset.sensing_matrix).transform_batch(dataset.captures)
    result = train(spec, inputs, masks_to_targets(dataset.masks), config)
    out = ensure_dir(out or default_out("model"))
    save_weights(out / "weights.json", spec, result.weights, dtype=dtype)
    history = [{"epoch": e, "loss": loss} for e, loss in enumerate(result.loss_trace)]
    for row, stats in zip(history, result.validation):
        row.update({f"val_{k}": v for k, v in stats.items() if k != "epoch"})
    write_json(out / "history.json", {"config": config.model_dump(mode="json"), "epochs": history})
    emit(history, fmt)


@cli.command("infer")
@common_options
@click.option("--weights", "weights_path", type=click.Path(path_type=Path), required=True)
@click.option("--dataset", "dataset_paths", type=click.Path(path_type=Path), multiple=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--ordered", is_flag=True, help="Use the fixed-order accumulation path.")
def infer(seed, config_path, out, fmt, weights_path, dataset_paths, threshold, ordered):
    """Run the trained network on stored captures."""
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"Threshold must lie in (0, 1), got {threshold}")
    spec, weights = load_model(weights_path)
    dataset = load_datasets(dataset_paths)
    inputs = Preprocessor(dataset.sensing_matrix).transform_batch(dataset.captures)
    probs = forward(spec, weights, inputs, ordered=ordered)
    preds = [OccupancyMask(row >= threshold) for row in probs]
    rows = [
        {"index": i, "snr_db": cap.snr_db, "truth": mask.to_bits(), "predicted": pred.to_bits()}
        for i, (cap, mask, pred) in enumerate(zip(dataset.captures, dataset.masks, preds))
    ]
    metrics = evaluate(preds, dataset.masks)
    logger.info(f"Inference over {metrics.sample_count} samples: Pd^AB {metrics.pd_all_bands:.2f}, Pd^OB {metrics.pd_occupied_bands}")
    if out is not None:
        write_json(out, {"metrics": metrics.as_dict(), "samples": rows})
    emit(rows, fmt)


@cli.command("quant-sweep")
@common_options
@click.option("--weights", "weights_path", type=click.Path(path_type=Path), required=True)
@click.option("--dataset", "dataset_paths", type=click.Path(path_type=Path), multiple=True)
@click.option("--limit", type=int, default=None, help="Use only the first N samples.")
@click.option("--threshold", type=float, default=0.5, show_default=True)
def quant_sweep(seed, config_path, out, fmt, weights_path, dataset_paths, limit, threshold):
    """Word-length sweep; policies come from --config (a JSON list) or the default activation sweep."""
    spec, weights = load_model(weights_path)
    dataset = load_datasets(dataset_paths)
    if limit is not None:
        dataset = dataset.subset(range(min(limit, len(dataset))))
    inputs = Preprocessor(dataset.sensing_matrix).transform_batch(dataset.captures)
    if config_path is not None:
        policies = [QuantizationPolicy.model_validate(p) for p in read_json(config_path)]
    else:
        policies = activation_sweep_policies()
    ranges = analyze_dynamic_range(spec, weights, inputs)
    frame = wl_sweep(spec, weights, inputs, dataset.masks, policies, threshold=threshold)
    reference = float_reference(spec, weights, inputs, dataset.masks, threshold=threshold)
    logger.info(f"Float reference: Pd^OB {reference['pd_ob']:.2f}, Pd^AB {reference['pd_ab']:.2f}")
    if out is not None:
        out = ensure_dir(out)
        frame.to_csv(out / "sweep.csv", index=False)
        write_json(out / "ranges.json", {"entries": ranges.to_frame().to_dict(orient="records"), "summary": ranges.summary(), "float": reference})
    emit(frame, fmt)


def _parse_tiling(values, n_layers):
    cfgs = []
    for value in values:
        try:
            To, Ti, Tr, Tc = (int(v) for v in value.split(","))
        except ValueError as e:
            raise InvalidInputError(f"Tiling config must be To,Ti,Tr,Tc, got {value!r}") from e
        cfgs.append(TilingConfig(To=To, Ti=Ti, Tr=Tr, Tc=Tc))
    if not cfgs:
        cfgs = [TilingConfig.reference_config()]
    if len(cfgs) == 1:
        cfgs = cfgs * n_layers
    return cfgs


@cli.command("tiling-report")
@common_options
@click.option("--network", "network", default="full", show_default=True, help="full, desk, tiny or a NetworkSpec JSON path.")
@click.option("--weights", "weights_path", type=click.Path(path_type=Path), default=None,
              help="Take the network from a weights file and execute the tiled layers.")
@click.option("--dataset", "dataset_paths", type=click.Path(path_type=Path), multiple=True,
              help="Sample fed through the tiled layers (needs --weights).")
@click.option("--tile", "tiles", multiple=True, help="To,Ti,Tr,Tc; give one for all layers or one per layer.")
@click.option("--word-bits", type=int, default=32, show_default=True)
def tiling_report(seed, config_path, out, fmt, network, weights_path, dataset_paths, tiles, word_bits):
    """On-chip footprint and external-memory traffic of the tiled conv layers."""
    weights, x = None, None
    if weights_path is not None:
        spec, weights = load_model(weights_path)
        if dataset_paths:
            dataset = load_datasets(dataset_paths)
            x = Preprocessor(dataset.sensing_matrix).transform(dataset.captures[0]).values
    else:
        spec = network_spec(network)
    if config_path is not None:
        cfgs = [TilingConfig.model_validate(c) for c in read_json(config_path)]
    else:
        cfgs = _parse_tiling(tiles, len(spec.conv_layers))
    report = traffic_report(spec, cfgs, word_bits, weights=weights, x=x)
    if out is not None:
        save_tiling_report(report, out)
    if fmt == "csv":
        rows = [{"layer": layer["layer"], **{k: v for k, v in layer.items() if k not in ("layer", "cfg", "footprint")},
                 **{f"footprint_{k}_mib": v["mib"] for k, v in layer["footprint"].items()}} for layer in report["layers"]]
        emit(rows, fmt)
    else:
        emit(report, fmt)


@cli.command("complexity")
@common_options
@click.option("--k", "K", type=int, default=8, show_default=True)
@click.option("--n", "N", type=int, default=14, show_default=True)
@click.option("--q", "Q", type=int, default=299, show_default=True)
@click.option("--p", "P", type=int, default=1, show_default=True)
@click.option("--network", "network", default="full", show_default=True)
@click.option("--instrumented", is_flag=True, help="Also count operations on a real noiseless OMP run.")
def complexity(seed, config_path, out, fmt, K, N, Q, P, network, instrumented):
    """Analytic OMP and CNN operation counts."""
    if config_path is not None:
        params = load_config(ComplexityParams, config_path)
    else:
        params = ComplexityParams(K=K, N=N, Q=Q, P=P)
    summary = complexity_summary(network_spec(network), params)
    if instrumented:
        seed = settings.DEFAULT_SEED if seed is None else seed
        dims = Dimensions(K=params.K, N=params.N, Q=params.Q)
        rng = np.random.default_rng(seed)
        A = generate_sensing_matrix(dims, seed)
        mask = OccupancyMask.from_support(dims.N, rng.choice(dims.N, size=params.P, replace=False))
        Y = capture(A, generate_spectrum(dims, mask, ChannelModel(), seed), float("inf"), seed)
        summary["omp_instrumented"] = instrumented_omp_op_count(A, Y, params.P)
    if out is not None:
        write_json(out, summary)
    if fmt == "csv":
        emit([{"step": k, "ops": v} for k, v in summary["omp"].items() if k != "dominant"]
             + [{"step": e["layer"], "ops": e["ops"]} for e in summary["dlwss"]["layers"]], fmt)
    else:
        emit(summary, fmt)


@cli.command("bench")
@common_options
@click.option("--workers", type=int, default=None)
def bench(seed, config_path, out, fmt, workers):
    """Compare OMP and the network over the SNR x channel grid of stored datasets."""
    if config_path is None:
        raise InvalidInputError("bench needs --config")
    config = BenchmarkConfig.load(config_path)
    update = {k: v for k, v in {"seed": seed, "workers": workers}.items() if v is not None}
    if update:
        config = BenchmarkConfig.model_validate({**config.model_dump(), **update})
    report = run_benchmark(config, out_dir=out)
    emit(report.to_frame(), fmt)


if __name__ == "__main__":
    cli()
