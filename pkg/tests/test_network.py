import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import finite_difference_grads, random_factors, relative_error
from factored_tts.errors import InvalidState, InvalidTopology, ShapeError
from factored_tts.factor_encoding import NEUTRAL, Architecture, emotion_id, layer_aux, speaker_id
from factored_tts.network import (
    AugmentedInputLayer,
    DenseLayer,
    FactoredLayer,
    build_architecture,
    dumps_network,
    forward_augmented,
    forward_dense,
    forward_factored,
    loads_network,
    load_network,
    save_network,
)

ALL = list(Architecture)


def test_sigmoid_of_zero():
    layer = DenseLayer(np.array([[1.0]]), np.array([0.0]), "sigmoid")
    assert forward_dense(layer, np.array([0.0])).tolist() == [0.5]


def test_augmented_layer_example():
    layer = AugmentedInputLayer(np.array([[1.0, 2.0]]), np.array([[3.0]]), np.array([0.5]), "linear")
    assert forward_augmented(layer, np.array([1.0, 1.0]), np.array([2.0])).tolist() == [9.5]


def test_factored_layer_applies_activation_per_branch():
    branches = [DenseLayer(np.array([[1.0]]), np.array([0.0]), "sigmoid") for _ in range(2)]
    out = forward_factored(FactoredLayer(branches), np.array([0.0]), np.array([1.0, 1.0]))
    # sigmoid(0) + sigmoid(0), not sigmoid(0 + 0)
    assert out.tolist() == [1.0]


def test_layer_shape_checks():
    with pytest.raises(ShapeError):
        DenseLayer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        FactoredLayer([DenseLayer(np.zeros((2, 3)), np.zeros(2)), DenseLayer(np.zeros((2, 2)), np.zeros(2))])
    with pytest.raises(InvalidTopology):
        DenseLayer(np.zeros((1, 1)), np.zeros(1), "relu")


@pytest.mark.parametrize("arch", ALL)
def test_gradients_match_finite_differences(arch):
    rng = np.random.default_rng(7)
    net = build_architecture(arch, 7, [5, 4], 3, 2, 3, init_seed=11)
    for _, arr in net.parameters():
        arr += rng.normal(0, 0.3, arr.shape)  # non-zero biases too
    net.mark_modified()
    x = rng.normal(size=(6, 7))
    e, s = random_factors(rng, 6, 2, 3)
    w = rng.normal(size=(6, 3))
    net.forward(x, e, s, keep_cache=True)
    grads = net.backward(x, e, s, w)
    fd = finite_difference_grads(net, x, e, s, w)
    assert list(grads) == [n for n, _ in net.parameters()]
    for name in grads:
        assert relative_error(grads[name], fd[name]) < 1e-5, name


@pytest.mark.parametrize("arch", [a for a in ALL if a is not Architecture.SED and a is not Architecture.AIM])
def test_inactive_branches_get_exactly_zero_gradient(arch):
    net = build_architecture(arch, 4, [3, 3], 2, 2, 3, init_seed=1)
    x = np.random.default_rng(0).normal(size=(5, 4))
    e, s = emotion_id(2, 2), speaker_id(1, 3)
    net.forward(x, e, s, keep_cache=True)
    grads = net.backward(x, e, s, np.ones((5, 2)))
    factored = [li for li, p in enumerate(net.placements) if p is not None and isinstance(net.layers[li], FactoredLayer)]
    for li in factored:
        a = layer_aux(net.kind, net.placements[li], e, s)
        for bi, weight in enumerate(a):
            g = grads[f"L{li}.branch{bi}.W"]
            if weight == 0:
                assert np.all(g == 0)
            else:
                assert np.any(g != 0)


def _isolated(net, x, e_idx, s_idx):
    """PM output computed from only the selected and shared branches, summed left to right."""
    h = x
    for layer in net.layers[:-1]:
        h = forward_dense(layer, h)
    out = net.layers[-1]
    M = net.M
    terms = []
    if e_idx is not NEUTRAL:
        terms.append(forward_dense(out.branches[e_idx - 1], h))
    terms.append(forward_dense(out.branches[M + s_idx - 1], h))
    terms.append(forward_dense(out.branches[-1], h))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def test_branch_selection_is_bitwise_equivalent():
    rng = np.random.default_rng(3)
    M, N = 3, 4
    net = build_architecture("PM", 6, [8, 5], 4, M, N, init_seed=5)
    for _ in range(100):
        i = NEUTRAL if rng.random() < 0.25 else int(rng.integers(1, M + 1))
        j = int(rng.integers(1, N + 1))
        x = rng.normal(size=6)
        got = net.forward(x, emotion_id(i, M), speaker_id(j, N))
        assert np.array_equal(got, _isolated(net, x, i, j))


def test_pm_without_factors_is_sed():
    pm = build_architecture("PM", 5, [4, 3], 2, 0, 0, init_seed=9)
    sed = build_architecture("SED", 5, [4, 3], 2, 0, 0, init_seed=9)
    x = np.random.default_rng(1).normal(size=(7, 5))
    assert np.array_equal(pm.forward(x, np.zeros(0), np.zeros(0)), sed.forward(x, np.zeros(0), np.zeros(0)))


def test_sed_matches_plain_mlp():
    net = build_architecture("SED", 3, [4], 2, 2, 2, init_seed=0)
    x = np.array([0.1, -0.2, 0.3])
    W0, b0 = net.layers[0].weights, net.layers[0].bias
    W1, b1 = net.layers[1].weights, net.layers[1].bias
    h = 1 / (1 + np.exp(-(W0 @ x + b0)))
    np.testing.assert_allclose(net.forward(x, emotion_id(1, 2), speaker_id(2, 2)), W1 @ h + b1, rtol=1e-14)


@given(seed=st.integers(0, 10_000), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_output_layer_is_linear_in_aux(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    branches = [DenseLayer(rng.normal(size=(3, 4)), rng.normal(size=3), "linear") for _ in range(5)]
    layer = FactoredLayer(branches)
    h = rng.normal(size=4)
    u, v = rng.normal(size=5), rng.normal(size=5)
    lhs = forward_factored(layer, h, alpha * u + beta * v)
    rhs = alpha * forward_factored(layer, h, u) + beta * forward_factored(layer, h, v)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("arch", ALL)
def test_initialisation(arch):
    net = build_architecture(arch, 6, [5, 4], 3, 2, 3, init_seed=2)
    again = build_architecture(arch, 6, [5, 4], 3, 2, 3, init_seed=2)
    other = build_architecture(arch, 6, [5, 4], 3, 2, 3, init_seed=3)
    assert np.array_equal(net.get_flat(), again.get_flat())
    assert not np.array_equal(net.get_flat(), other.get_flat())
    for name, arr in net.parameters():
        assert arr.dtype == np.float64
        if name.endswith(".b"):
            assert np.all(arr == 0)


def test_glorot_bound_covers_augmented_width():
    net = build_architecture("AIM", 10, [6], 2, 2, 3, init_seed=0)
    bound = np.sqrt(6 / (10 + 5 + 6))
    first = net.layers[0]
    assert np.max(np.abs(first.full_weights)) <= bound


def test_branch_counts():
    M, N = 2, 3
    pm = build_architecture("PM", 4, [3], 2, M, N)
    assert pm.layers[-1].n_branches == M + N + 1
    se = build_architecture("SM_se", 4, [3, 3], 2, M, N)
    assert se.layers[1].n_branches == N + 1 and se.layers[2].n_branches == M + 1
    es = build_architecture("SM_es", 4, [3, 3], 2, M, N)
    assert es.layers[1].n_branches == M + 1 and es.layers[2].n_branches == N + 1
    aim = build_architecture("AIM", 4, [3], 2, M, N)
    assert aim.layers[0].aux_dim == M + N and aim.aux_input_dim == 4 + M + N


def test_topology_errors():
    with pytest.raises(InvalidTopology):
        build_architecture("PM", 4, [], 2, 2, 2)
    with pytest.raises(InvalidTopology):
        build_architecture("SM_se&AIM", 4, [3], 2, 2, 2)
    with pytest.raises(InvalidTopology):
        build_architecture("PM", 4, [0], 2, 2, 2)


def test_forward_shapes_and_broadcast():
    net = build_architecture("PM", 4, [3], 2, 2, 2)
    x = np.ones((5, 4))
    single = net.forward(x[0], emotion_id(1, 2), speaker_id(1, 2))
    batch = net.forward(x, emotion_id(1, 2), speaker_id(1, 2))
    assert single.shape == (2,) and batch.shape == (5, 2)
    assert np.array_equal(batch[3], single)
    with pytest.raises(ShapeError):
        net.forward(np.ones(3), emotion_id(1, 2), speaker_id(1, 2))
    with pytest.raises(ShapeError):
        net.forward(x, np.zeros((2, 2)), speaker_id(1, 2))


def test_backward_needs_matching_cache():
    net = build_architecture("PM", 3, [2], 1, 1, 1)
    x, e, s = np.ones(3), emotion_id(1, 1), speaker_id(1, 1)
    with pytest.raises(InvalidState):
        net.backward(x, e, s, np.ones(1))
    net.forward(x, e, s, keep_cache=True)
    with pytest.raises(InvalidState):
        net.backward(2 * x, e, s, np.ones(1))
    net.layers[0].weights[0, 0] += 1.0
    net.mark_modified()
    with pytest.raises(InvalidState):
        net.backward(x, e, s, np.ones(1))


@pytest.mark.parametrize("arch", ALL)
def test_serialization_round_trip(arch, tmp_path):
    net = build_architecture(arch, 5, [4, 3], 2, 2, 3, init_seed=4)
    net.set_flat(np.random.default_rng(0).normal(size=net.n_parameters))
    extras = {"norm_mean": np.arange(3.0), "norm_std": np.ones(3)}
    path = tmp_path / "m.net"
    save_network(net, path, extras)
    back, ex = load_network(path)
    assert back.kind is net.kind and back.hidden_dims == net.hidden_dims
    assert np.array_equal(back.get_flat(), net.get_flat())
    assert set(ex) == set(extras) and np.array_equal(ex["norm_mean"], extras["norm_mean"])
    assert dumps_network(back, ex) == path.read_bytes()


def test_corrupt_files_raise_shape_error():
    data = dumps_network(build_architecture("PM", 3, [2], 1, 1, 1))
    with pytest.raises(ShapeError):
        loads_network(b"garbage")
    with pytest.raises(ShapeError):
        loads_network(data[:-8])
    with pytest.raises(ShapeError):
        loads_network(data + b"\0" * 8)
    with pytest.raises(ShapeError):
        loads_network(data.replace(b"n_speakers = 1\n", b""))


def test_copy_is_independent():
    net = build_architecture("SM_es", 3, [2, 2], 1, 2, 2, init_seed=1)
    clone = net.copy()
    clone.layers[0].weights[...] = 0
    assert not np.array_equal(net.layers[0].weights, clone.layers[0].weights)
