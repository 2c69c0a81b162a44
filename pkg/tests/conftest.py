import os
from types import SimpleNamespace

import hypothesis
import numpy as np
import pytest

from wbsense.models.network_model import ConvLayerSpec, NetworkSpec, TrainConfig, WeightSet, save_weights, train
from wbsense.models.preprocess_model import Preprocessor, masks_to_targets
from wbsense.models.signal_model import (
    DatasetSpec,
    Dimensions,
    generate_dataset,
    generate_sensing_matrix,
    merge_datasets,
)

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=60, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))

NOISELESS = float("inf")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dims():
    return Dimensions(K=4, N=6, Q=16)


@pytest.fixture
def small_dataset_spec(small_dims):
    return DatasetSpec(
        dims=small_dims,
        sparsity_range=(1, 2),
        snr_grid_db=[NOISELESS, 10.0],
        samples_per_cell=3,
        seed=7,
    )


@pytest.fixture
def small_dataset_dir(tmp_path, small_dataset_spec):
    directory = tmp_path / "dataset"
    generate_dataset(small_dataset_spec, directory=directory)
    return directory


@pytest.fixture
def tiny_spec():
    return NetworkSpec.tiny()


@pytest.fixture
def tiny_weights(tiny_spec):
    return WeightSet.initialize(tiny_spec, seed=3)


@pytest.fixture
def small_network(small_dims):
    """Network sized for the ``small_dims`` captures (6 bands, 16 snapshots)."""
    return NetworkSpec(
        n_bands=small_dims.N,
        n_snapshots=small_dims.Q,
        conv_layers=[
            ConvLayerSpec(filters=3, kernel_len=5, in_channels=2),
            ConvLayerSpec(filters=2, kernel_len=4, in_channels=3),
            ConvLayerSpec(filters=2, kernel_len=3, in_channels=2),
        ],
    )


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    """Desk network trained on mixed ESS/HSS captures, with held-out ESS and HSS sets.

    Every dataset shares one default-size sensing matrix. Only the slow
    reproduction tests request this.
    """
    root = tmp_path_factory.mktemp("desk")
    A = generate_sensing_matrix(Dimensions(), seed=2024)
    training = merge_datasets([
        generate_dataset(DatasetSpec.ess(samples_per_cell=120, seed=11), sensing_matrix=A),
        generate_dataset(DatasetSpec.hss(samples_per_cell=90, seed=12), sensing_matrix=A),
    ])
    preprocessor = Preprocessor(A)
    spec = NetworkSpec.desk()
    config = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=4, seed=0)
    result = train(spec, preprocessor.transform_batch(training.captures), masks_to_targets(training.masks), config)
    weights_path = save_weights(root / "weights.json", spec, result.weights, dtype="float64")

    ess = generate_dataset(DatasetSpec.ess(samples_per_cell=25, seed=21), directory=root / "ess", sensing_matrix=A)
    hss = generate_dataset(DatasetSpec.hss(samples_per_cell=25, seed=22), directory=root / "hss", sensing_matrix=A)
    held_out = merge_datasets([ess, hss])
    return SimpleNamespace(
        spec=spec,
        weights=result.weights,
        weights_path=weights_path,
        ess_dir=root / "ess",
        hss_dir=root / "hss",
        inputs=preprocessor.transform_batch(held_out.captures),
        masks=held_out.masks,
    )


def random_input(spec, rng, batch=None):
    shape = spec.input_shape if batch is None else (batch,) + spec.input_shape
    return rng.standard_normal(shape)
