import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from wbsense.models.network_model import (
    ConvLayerSpec,
    NetworkSpec,
    TrainConfig,
    WeightSet,
    backward,
    bce_loss,
    conv1d_forward,
    forward,
    forward_trace,
    gradient_check,
    load_model,
    load_weights,
    predict_occupancy,
    relu,
    save_weights,
    sigmoid,
    train,
)
from wbsense.models.signal_model import OccupancyMask
from wbsense.utils.errors import CorruptFileError, InvalidInputError, ShapeMismatchError, TrainingDivergedError

from tests.conftest import random_input


def naive_conv(x, kernel, bias):
    N, L, C = x.shape
    F, _, T = kernel.shape
    out = np.zeros((N, L - T + 1, F))
    for n in range(N):
        for t in range(L - T + 1):
            for f in range(F):
                acc = bias[f]
                for c in range(C):
                    for tau in range(T):
                        acc += x[n, t + tau, c] * kernel[f, c, tau]
                out[n, t, f] = acc
    return out


def test_full_network_shape_chain():
    spec = NetworkSpec.full()
    assert spec.shape_chain() == [
        (14, 299, 2),
        (14, 150, 256),
        (14, 51, 128),
        (14, 1, 64),
        (896,),
        (14,),
    ]


def test_full_network_parameter_count():
    spec = NetworkSpec.full()
    assert spec.parameter_count(include_biases=False) == 3_783_936
    assert spec.parameter_count() - spec.parameter_count(include_biases=False) == 462


def test_spec_rejects_broken_chains():
    with pytest.raises(ValidationError):
        NetworkSpec(n_bands=3, n_snapshots=8, conv_layers=[ConvLayerSpec(filters=2, kernel_len=9, in_channels=2)])
    with pytest.raises(ValidationError):
        NetworkSpec(
            n_bands=3,
            n_snapshots=8,
            conv_layers=[
                ConvLayerSpec(filters=2, kernel_len=3, in_channels=2),
                ConvLayerSpec(filters=2, kernel_len=2, in_channels=3),
            ],
        )
    with pytest.raises(ValidationError):
        NetworkSpec(n_bands=3, n_snapshots=8, conv_layers=[])


@pytest.mark.parametrize("ordered", [False, True])
def test_conv_matches_nested_loops(rng, ordered):
    x = rng.standard_normal((2, 7, 2))
    kernel = rng.standard_normal((2, 2, 3))
    bias = rng.standard_normal(2)
    np.testing.assert_allclose(conv1d_forward(x, kernel, bias, ordered=ordered), naive_conv(x, kernel, bias), atol=1e-12)


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ShapeMismatchError):
        conv1d_forward(rng.standard_normal((2, 7, 3)), np.zeros((2, 2, 3)), np.zeros(2))
    with pytest.raises(ShapeMismatchError):
        conv1d_forward(rng.standard_normal((2, 2, 2)), np.zeros((2, 2, 3)), np.zeros(2))


def test_zero_weights_give_half(tiny_spec, rng):
    probabilities = forward(tiny_spec, WeightSet.zeros(tiny_spec), random_input(tiny_spec, rng))
    assert np.all(probabilities == 0.5)


def test_forward_batches_match_single(tiny_spec, tiny_weights, rng):
    batch = random_input(tiny_spec, rng, batch=4)
    batched = forward(tiny_spec, tiny_weights, batch)
    assert batched.shape == (4, tiny_spec.n_bands)
    for i in range(4):
        np.testing.assert_allclose(batched[i], forward(tiny_spec, tiny_weights, batch[i]), atol=1e-12)


def test_forward_rejects_wrong_input(tiny_spec, tiny_weights):
    with pytest.raises(ShapeMismatchError):
        forward(tiny_spec, tiny_weights, np.zeros((3, 9, 2)))


def test_ordered_path_agrees_with_blas(tiny_spec, tiny_weights, rng):
    x = random_input(tiny_spec, rng)
    np.testing.assert_allclose(
        forward(tiny_spec, tiny_weights, x, ordered=True), forward(tiny_spec, tiny_weights, x), atol=1e-12
    )


def test_predict_occupancy_threshold():
    assert predict_occupancy(np.full(4, 0.5)).to_bits() == "1111"
    assert predict_occupancy(np.array([0.9, 0.1])).to_bits() == "10"
    assert predict_occupancy(np.array([0.99, 0.5]), threshold=0.999).to_bits() == "00"
    with pytest.raises(InvalidInputError):
        predict_occupancy(np.array([0.5]), threshold=1.0)


def test_bce_loss_values(rng):
    assert bce_loss(np.full(5, 0.5), OccupancyMask.from_bits("10110")) == pytest.approx(np.log(2))
    assert bce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])) < 1e-6

    p = rng.uniform(0.05, 0.95, 6)
    y = rng.integers(0, 2, 6).astype(float)
    expected = sum(-(yi * np.log(pi) + (1 - yi) * np.log(1 - pi)) for pi, yi in zip(p, y)) / 6
    assert bce_loss(p, y) == pytest.approx(expected)


def test_backward_rejects_mismatched_targets(tiny_spec, tiny_weights, rng):
    with pytest.raises(ShapeMismatchError):
        backward(tiny_spec, tiny_weights, random_input(tiny_spec, rng), np.zeros(4))


def test_initialization_is_glorot_uniform():
    spec = NetworkSpec.desk()
    weights = WeightSet.initialize(spec, seed=0)
    for layer, kernel, bias in zip(spec.conv_layers, weights.kernels, weights.biases):
        limit = np.sqrt(6.0 / ((layer.in_channels + layer.filters) * layer.kernel_len))
        assert np.abs(kernel).max() <= limit
        # uniform on [-limit, limit] has standard deviation limit / sqrt(3)
        assert kernel.std() == pytest.approx(limit / np.sqrt(3.0), rel=0.1)
        assert np.all(bias == 0.0)
    assert np.abs(weights.fc_weight).max() <= np.sqrt(6.0 / (spec.fc_in + spec.fc_out))
    assert np.all(weights.fc_bias == 0.0)


@given(seed=st.integers(0, 2**31 - 1))
def test_gradients_match_finite_differences(seed):
    spec = NetworkSpec.tiny()
    rng = np.random.default_rng(seed)
    weights = WeightSet.initialize(spec, seed=seed)
    weights.biases = [rng.normal(0.0, 0.1, b.shape) for b in weights.biases]
    x = random_input(spec, rng)
    mask = rng.integers(0, 2, spec.n_bands).astype(float)
    report = gradient_check(spec, weights, x, mask)
    assert report["checked"] > 0
    assert report["max_relative_error"] < 1e-4


def test_gradients_over_twenty_seeds():
    spec = NetworkSpec.tiny()
    n_params = spec.parameter_count()
    worst, checked, skipped = 0.0, 0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        weights = WeightSet.initialize(spec, seed=seed)
        mask = rng.integers(0, 2, spec.n_bands).astype(float)
        report = gradient_check(spec, weights, random_input(spec, rng), mask)
        worst = max(worst, report["max_relative_error"])
        checked += report["checked"]
        skipped += report["skipped"]
    assert checked + skipped == 20 * n_params
    # kinks inside a 1e-5 interval are rare; nearly every component is compared
    assert skipped <= 0.05 * checked
    assert worst < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_at_millistep(seed):
    spec = NetworkSpec.tiny()
    rng = np.random.default_rng(seed)
    weights = WeightSet.initialize(spec, seed=seed)
    mask = rng.integers(0, 2, spec.n_bands).astype(float)
    # components under 1e-4 are compared on absolute error
    report = gradient_check(spec, weights, random_input(spec, rng), mask, step=1e-3, floor=1e-4)
    assert report["checked"] >= 0.5 * spec.parameter_count()
    assert report["max_relative_error"] < 1e-4


def test_saturated_outputs_have_zero_gradient(tiny_spec, tiny_weights, rng):
    weights = tiny_weights.copy()
    weights.fc_bias = np.full(tiny_spec.n_bands, 30.0)
    x = random_input(tiny_spec, rng)
    mask = np.zeros(tiny_spec.n_bands)
    grads, loss = backward(tiny_spec, weights, x, mask)
    assert loss == pytest.approx(-np.log(1e-7))
    assert all(np.all(g == 0.0) for g in grads.tensors())
    assert gradient_check(tiny_spec, weights, x, mask)["max_relative_error"] < 1e-4


def test_relu_and_sigmoid_identities(rng):
    x = rng.standard_normal((4, 5, 3)) * 10.0
    assert np.array_equal(relu(x) + relu(-x), np.abs(x))
    assert relu(np.array([-1.0, 2.5])).tolist() == [0.0, 2.5]
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)
    assert sigmoid(0.0) == 0.5
    extreme = sigmoid(np.array([-1e4, 1e4, -800.0, 800.0]))
    assert not np.any(np.isnan(extreme))
    assert extreme.tolist() == [0.0, 1.0, 0.0, 1.0]


def test_conv_stack_is_equivariant_to_band_permutation(tiny_spec, tiny_weights, rng):
    x = random_input(tiny_spec, rng)
    order = rng.permutation(tiny_spec.n_bands)
    plain = forward_trace(tiny_spec, tiny_weights, x)
    permuted = forward_trace(tiny_spec, tiny_weights, x[order])
    for a, b in zip(plain.activations, permuted.activations):
        np.testing.assert_allclose(a[order], b, atol=1e-12)


def test_duplicated_sample_gives_single_sample_gradient(tiny_spec, tiny_weights, rng):
    x = random_input(tiny_spec, rng)
    mask = rng.integers(0, 2, tiny_spec.n_bands).astype(float)
    single, single_loss = backward(tiny_spec, tiny_weights, x, mask)
    doubled, doubled_loss = backward(tiny_spec, tiny_weights, np.stack([x, x]), np.stack([mask, mask]))
    assert doubled_loss == pytest.approx(single_loss)
    for a, b in zip(single.tensors(), doubled.tensors()):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_zero_input_gives_zero_kernel_gradients(tiny_spec, tiny_weights, rng):
    x = np.zeros(tiny_spec.input_shape)
    mask = np.array([1.0, 0.0, 1.0])
    grads, _ = backward(tiny_spec, tiny_weights, x, mask)
    assert all(np.all(k == 0.0) for k in grads.kernels)
    assert np.any(grads.fc_bias != 0.0)

    weights = tiny_weights.copy()
    weights.biases = [np.full(b.shape, 0.5) for b in weights.biases]
    grads, _ = backward(tiny_spec, weights, x, mask)
    assert np.all(grads.kernels[0] == 0.0)
    assert np.any(grads.fc_bias != 0.0)


def separable_batch(spec, count, seed):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, (count, spec.n_bands)).astype(float)
    x = np.repeat((2.0 * bits - 1.0)[:, :, None, None], spec.n_snapshots, axis=2)
    x = np.repeat(x, 2, axis=3) + 0.1 * rng.standard_normal((count,) + spec.input_shape)
    return x, bits


def test_training_halves_loss():
    spec = NetworkSpec.tiny(filters=(4, 4, 4))
    x, y = separable_batch(spec, 200, seed=1)
    config = TrainConfig(learning_rate=0.01, batch_size=20, epochs=30, seed=5)
    result = train(spec, x, y, config)
    assert len(result.loss_trace) == 30
    assert result.loss_trace[-1] <= 0.5 * result.loss_trace[0]


def test_training_is_deterministic(tiny_spec):
    x, y = separable_batch(tiny_spec, 30, seed=2)
    config = TrainConfig(learning_rate=0.01, batch_size=8, epochs=2, seed=3)
    first, second = train(tiny_spec, x, y, config), train(tiny_spec, x, y, config)
    assert first.loss_trace == second.loss_trace
    for a, b in zip(first.weights.tensors(), second.weights.tensors()):
        assert np.array_equal(a, b)


def test_zero_learning_rate_keeps_weights(tiny_spec, tiny_weights):
    x, y = separable_batch(tiny_spec, 10, seed=3)
    for optimizer in ("sgd", "adam"):
        config = TrainConfig(learning_rate=0.0, batch_size=4, epochs=1, optimizer=optimizer)
        result = train(tiny_spec, x, y, config, initial=tiny_weights)
        for a, b in zip(result.weights.tensors(), tiny_weights.tensors()):
            assert np.array_equal(a, b)


def test_nan_inputs_diverge(tiny_spec):
    x, y = separable_batch(tiny_spec, 8, seed=4)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_spec, x, y, TrainConfig(batch_size=8, epochs=1))
    assert info.value.epoch == 0


def test_validation_split_reports_metrics(tiny_spec):
    x, y = separable_batch(tiny_spec, 40, seed=6)
    config = TrainConfig(learning_rate=0.01, batch_size=8, epochs=2, validation_fraction=0.25)
    result = train(tiny_spec, x, y, config)
    assert [v["epoch"] for v in result.validation] == [0, 1]
    assert 0.0 <= result.validation[-1]["pd_all_bands"] <= 100.0


def test_weights_round_trip(tmp_path, tiny_spec, tiny_weights, rng):
    path = save_weights(tmp_path / "weights.json", tiny_spec, tiny_weights, dtype="float64")
    spec, loaded = load_model(path)
    assert spec == tiny_spec
    for a, b in zip(loaded.tensors(), tiny_weights.tensors()):
        assert np.array_equal(a, b)
    x = random_input(tiny_spec, rng)
    assert np.array_equal(forward(spec, loaded, x), forward(tiny_spec, tiny_weights, x))


def test_float32_weights_are_close(tmp_path, tiny_spec, tiny_weights):
    save_weights(tmp_path / "weights.json", tiny_spec, tiny_weights)
    loaded = load_weights(tmp_path / "weights.json", spec=tiny_spec)
    for a, b in zip(loaded.tensors(), tiny_weights.tensors()):
        np.testing.assert_allclose(a, b, rtol=1e-6)


def test_load_weights_checks_spec(tmp_path, tiny_spec, tiny_weights):
    save_weights(tmp_path / "weights.json", tiny_spec, tiny_weights)
    with pytest.raises(ShapeMismatchError):
        load_weights(tmp_path / "weights.json", spec=NetworkSpec.tiny(n_bands=4))


def test_corrupt_weights_blob(tmp_path, tiny_spec, tiny_weights):
    save_weights(tmp_path / "weights.json", tiny_spec, tiny_weights)
    blob = tmp_path / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptFileError):
        load_model(tmp_path / "weights.json")


def test_forward_trace_boundary_sees_every_layer(tiny_spec, tiny_weights, rng):
    seen = []

    def record(name, values):
        seen.append(name)
        return values

    forward_trace(tiny_spec, tiny_weights, random_input(tiny_spec, rng), boundary=record)
    assert seen == ["input", "conv0", "conv1", "conv2", "fc"]
