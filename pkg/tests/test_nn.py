import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrul.nn import (
    AdamState,
    Batch,
    LayerSpec,
    NetworkSpec,
    ParameterVector,
    ShapeError,
    SpecError,
    adam_step,
    backward,
    backward_array,
    forward,
    init_parameters,
    layer_outputs,
    pack,
    param_count,
    param_layout,
    rmse,
    rul_cnn,
    sse_loss,
)


def tiny_net(seed=0, dropout=0.0, window=8, channels=2):
    return NetworkSpec(
        (LayerSpec.conv1d(3, 3), LayerSpec.dense(4, dropout_rate=dropout), LayerSpec.output()),
        input_window=window,
        input_channels=channels,
        seed=seed,
    )


def test_rul_cnn_parameter_count_matches_hand_count():
    # conv 9*17*10+10, conv 9*10*10+10, conv 9*10*1+1, dense 50*100+100, output 100+1
    assert param_count(rul_cnn()) == 1540 + 910 + 91 + 5100 + 101 == 7742


def test_layout_is_contiguous_and_ordered():
    layout = param_layout(rul_cnn())
    assert layout[0].offset == 0
    for a, b in zip(layout, layout[1:]):
        assert b.offset == a.stop
    assert [s.role for s in layout[:2]] == ["weight", "bias"]
    assert layout[0].shape == (9, 17, 10)
    assert layout[6].shape == (50, 100)


def test_bad_specs_rejected():
    with pytest.raises(SpecError):
        NetworkSpec(())
    with pytest.raises(SpecError):
        NetworkSpec((LayerSpec.conv1d(2, 3),), input_window=5, input_channels=1)  # no scalar output
    with pytest.raises(SpecError):
        NetworkSpec((LayerSpec.output(), LayerSpec.conv1d(2, 3)), input_window=5, input_channels=1)


def test_forward_shape_and_determinism():
    spec = rul_cnn(seed=3)
    p = init_parameters(spec)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 50, 17))
    y = forward(spec, p, x)
    assert y.shape == (5,) and y.dtype == np.float32
    assert np.array_equal(y, forward(spec, p, x))
    assert init_parameters(spec) == p


def test_forward_rejects_wrong_input_shape():
    spec = rul_cnn()
    with pytest.raises(ShapeError):
        forward(spec, init_parameters(spec), np.zeros((2, 49, 17)))
    with pytest.raises(ShapeError):
        Batch(np.zeros((0, 50, 17)), np.zeros(0))


def test_zero_weights_predict_output_bias():
    spec = tiny_net()
    tensors = [np.zeros(s.shape) for s in param_layout(spec)]
    tensors[-1] = np.array([3.5])
    p = pack(spec, tensors)
    assert np.all(forward(spec, p, np.ones((4, 8, 2))) == 3.5)


def test_same_padding_keeps_length_and_zero_pads():
    # one kernel of length 3 summing neighbours: edges see one zero pad
    spec = NetworkSpec((LayerSpec.conv1d(1, 3, activation="linear"), LayerSpec.output()), input_window=4, input_channels=1)
    w = np.ones((3, 1, 1))
    p = pack(spec, [w, np.zeros(1), np.ones((4, 1)), np.zeros(1)])
    conv = layer_outputs(spec, p, np.array([[[1.0], [2.0], [3.0], [4.0]]]))[0]
    assert conv[0, :, 0].tolist() == [3.0, 6.0, 9.0, 7.0]


def test_dropout_only_in_training_and_inverted():
    spec = tiny_net(dropout=0.5)
    p = init_parameters(spec)
    x = np.random.default_rng(1).normal(size=(64, 8, 2))
    assert np.array_equal(forward(spec, p, x), forward(spec, p, x, training=False, rng_seed=9))
    outs = layer_outputs(spec, p, x, training=True, rng_seed=4)
    plain = layer_outputs(spec, p, x)
    dense_train, dense_plain = outs[1], plain[1]
    kept = dense_train != 0
    np.testing.assert_allclose(dense_train[kept], 2.0 * dense_plain[kept], rtol=1e-6)
    assert not np.array_equal(forward(spec, p, x, True, 4), forward(spec, p, x, True, 5))


def test_losses():
    assert sse_loss([1, 2], [0, 0]) == 5.0
    assert sse_loss([], []) == 0.0
    assert rmse([3, 3], [0, 0]) == 3.0
    with pytest.raises(ValueError):
        rmse([], [])


def test_zero_loss_gives_zero_gradient():
    spec = tiny_net()
    tensors = [np.zeros(s.shape) for s in param_layout(spec)]
    p = pack(spec, tensors)
    loss, g = backward(spec, p, Batch(np.ones((3, 8, 2)), np.zeros(3)))
    assert loss == 0.0 and not np.any(g.values)


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_gradient_matches_finite_differences_on_random_directions(seed, n):
    """Directional derivative check in float64; tolerant of the odd ReLU kink."""
    spec = tiny_net(seed=seed)
    p = init_parameters(spec).shadow()
    rng = np.random.default_rng(seed)
    batch = Batch(rng.normal(size=(n, 8, 2)), rng.normal(size=n) * 3)
    _, g = backward_array(spec, p, batch, training=False, dtype=np.float64)
    d = rng.normal(size=len(p))
    h = 1e-6

    def loss_at(v):
        pred = forward(spec, p.with_values(v), batch.inputs, dtype=np.float64)
        return np.sqrt(np.mean((pred - batch.targets) ** 2))

    fd = (loss_at(p.values + h * d) - loss_at(p.values - h * d)) / (2 * h)
    assert abs(fd - g @ d) <= 1e-4 * max(1.0, abs(fd))


def test_float32_gradient_close_to_float64_shadow():
    spec = rul_cnn(seed=1)
    p = init_parameters(spec)
    rng = np.random.default_rng(2)
    batch = Batch(rng.uniform(-1, 1, (16, 50, 17)), rng.uniform(0, 60, 16))
    _, g32 = backward(spec, p, batch, rng_seed=7)
    _, g64 = backward_array(spec, p.shadow(), batch, rng_seed=7, dtype=np.float64)
    assert g32.values.dtype == np.float32
    np.testing.assert_allclose(g32.values, g64, rtol=1e-3, atol=1e-5)


def test_parameter_vector_is_read_only_and_compares_by_bytes():
    p = init_parameters(tiny_net())
    with pytest.raises(ValueError):
        p.values[0] = 1.0
    assert p == ParameterVector(p.values.copy(), p.layout)
    assert p != p.with_values(p.values + 1)
    with pytest.raises(ShapeError):
        ParameterVector(np.zeros(3), p.layout)


def test_adam_first_step_moves_each_weight_by_learning_rate():
    p = ParameterVector(np.zeros(3, np.float32))
    st0 = AdamState.zeros(3, learning_rate=0.01)
    p1, st1 = adam_step(st0, p, np.array([2.0, -0.5, 0.0]))
    # bias-corrected first step is lr * sign(g) (up to epsilon)
    np.testing.assert_allclose(p1.values, [-0.01, 0.01, 0.0], atol=1e-7)
    assert st1.step_count == 1 and st0.step_count == 0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.integers(1, 5))
def test_adam_matches_reference_recursion(grad, steps):
    g = np.array(grad)
    p = ParameterVector(np.zeros(g.size, np.float64), dtype=np.float64)
    state = AdamState.zeros(g.size)
    m = v = np.zeros(g.size)
    ref = np.zeros(g.size)
    for t in range(1, steps + 1):
        p, state = adam_step(state, p, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.001 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.values, ref, rtol=1e-12, atol=1e-15)


def test_adam_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState.zeros(2), ParameterVector(np.zeros(3)), np.zeros(3))
