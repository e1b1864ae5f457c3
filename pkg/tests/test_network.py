import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netcond.errors import (InvalidArgumentError, ModelParseError, ModelValidationError,
                            NumericOverflowError)
from netcond.network import (ELU, AvgPool, Conv2D, Dense, Flatten, LeakyReLU, MaxPool,
                             Network, ReLU, Sigmoid, Tanh, classify, dense_mlp, dumps_model,
                             forward, grad_logit, load_model, loads_model, make_activation,
                             model_digest, save_model)
from netcond.tensor import make_rng
from conftest import ACTIVATIONS, conv_fixture, random_mlp
from oracles import assert_fd_match, central_difference_grad, scalar_forward

# Output of the seed-7 MLP on x = [0.5, -1, 2, 0.25], from a straight-line
# scalar re-implementation.
SEED7_GOLDEN = [0.3477346259825918, -0.4599441062966663, 1.0071271478800514]


def seed7_mlp():
    rng = make_rng(7)
    shapes = [(5, 4), (5, 5), (3, 5)]
    ws = [rng.uniform(-1, 1, s) for s in shapes]
    bs = [rng.uniform(-1, 1, s[0]) for s in shapes]
    return dense_mlp(ws, bs, "relu")


def test_identity_dense_is_identity():
    net = Network((Dense(np.eye(3)),), (3,))
    x = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(forward(net, x), x)


def test_dense_then_relu_hand_arithmetic():
    net = Network((Dense([[1.0, -1.0], [2.0, 0.0]]), ReLU()), (2,))
    assert forward(net, [1.0, 1.0]).tolist() == [0.0, 2.0]


def test_seed7_golden():
    net = seed7_mlp()
    x = [0.5, -1.0, 2.0, 0.25]
    np.testing.assert_allclose(forward(net, x), SEED7_GOLDEN, rtol=1e-14)
    np.testing.assert_allclose(scalar_forward(net, x), SEED7_GOLDEN, rtol=1e-14)


def test_forward_matches_scalar_oracle(fixture_nets):
    rng = make_rng(17)
    for name, net in fixture_nets.items():
        x = rng.standard_normal(net.input_shape)
        np.testing.assert_allclose(forward(net, x), scalar_forward(net, x),
                                   rtol=1e-12, atol=1e-12, err_msg=name)


def test_classify_tie_break_and_argmax():
    net = Network((Dense(np.eye(3)),), (3,))
    assert classify(net, [0.1, 0.9, 0.3]) == 1
    net2 = Network((Dense(np.eye(2)),), (2,))
    assert classify(net2, [0.5, 0.5]) == 0


def test_classify_matches_scalar_oracle(fixture_nets):
    rng = make_rng(2)
    for net in fixture_nets.values():
        x = rng.standard_normal(net.input_shape)
        assert classify(net, x) == int(np.argmax(scalar_forward(net, x)))


def test_forward_rejects_bad_input():
    net = seed7_mlp()
    with pytest.raises(InvalidArgumentError):
        forward(net, np.ones(5))
    with pytest.raises(InvalidArgumentError):
        forward(net, [np.nan, 0, 0, 0])


def test_forward_overflow_names_layer():
    net = Network((Dense(np.full((2, 2), 1e200)), ReLU(), Dense(np.full((2, 2), 1e200))), (2,))
    with pytest.raises(NumericOverflowError) as err:
        forward(net, [1e150, 1e150])
    assert err.value.layer_index == 0
    with pytest.raises(NumericOverflowError) as err:
        forward(net, [1e100, 1e100])
    assert err.value.layer_index == 2


def test_grad_linear_is_weight_row():
    w = make_rng(0).standard_normal((4, 6))
    net = Network((Dense(w, np.ones(4)),), (6,))
    for k in range(4):
        assert np.array_equal(grad_logit(net, np.ones(6), k), w[k])
    with pytest.raises(InvalidArgumentError):
        grad_logit(net, np.ones(6), 4)


def test_grad_matches_finite_differences(fixture_nets):
    rng = make_rng(31)
    for name, net in fixture_nets.items():
        for _ in range(5):
            x = rng.standard_normal(net.input_shape)
            for k in range(net.class_count):
                g = grad_logit(net, x, k)
                fd = central_difference_grad(lambda z: forward(net, z)[k], x)
                assert_fd_match(g, fd, 1e-4)


def test_relu_grad_piecewise_exact():
    rng = make_rng(4)
    net = random_mlp(rng, [5, 9, 4], "relu")
    x = rng.standard_normal(5)
    for k in range(4):
        fd = central_difference_grad(lambda z: forward(net, z)[k], x)
        np.testing.assert_allclose(grad_logit(net, x, k), fd, rtol=1e-6, atol=1e-9)


def test_kink_conventions():
    z = np.array([0.0])
    assert ReLU().df(z)[0] == 0.0
    assert LeakyReLU(0.2).df(z)[0] == 0.2
    assert ELU(0.3).df(z)[0] == pytest.approx(0.3)
    # maxpool routes to the first maximal element
    net = Network((MaxPool(2), Flatten(), Dense(np.ones((1, 1)))), (1, 2, 2))
    g = grad_logit(net, np.ones((1, 2, 2)), 0)
    assert g.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_positive_homogeneity():
    rng = make_rng(9)
    nets = [random_mlp(rng, [6, 8, 8, 3], a, bias=False) for a in ("relu", "leaky_relu")]
    nets.append(conv_fixture(6, "relu", "max", bias=False))
    nets.append(conv_fixture(7, "leaky_relu", "avg", bias=False))
    for net in nets:
        for _ in range(20):
            x = rng.standard_normal(net.input_shape)
            c = float(rng.uniform(0.01, 100))
            np.testing.assert_allclose(forward(net, c * x), c * forward(net, x),
                                       rtol=1e-9, atol=1e-300)


@pytest.mark.parametrize("name", ACTIVATIONS)
def test_activation_is_one_lipschitz(name):
    f = make_activation(name).f
    rng = make_rng(12)
    a, b = rng.uniform(-20, 20, (2, 100_000))
    assert np.all(np.abs(f(a) - f(b)) <= np.abs(a - b) * (1 + 1e-12))


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30))
def test_sigmoid_tanh_contract(a, b):
    for f in (Sigmoid().f, Tanh().f):
        assert abs(float(f(np.array(a))) - float(f(np.array(b)))) <= abs(a - b)


def test_layer_invariants():
    with pytest.raises(ModelValidationError):
        LeakyReLU(1.5)
    with pytest.raises(ModelValidationError):
        ELU(0.0)
    with pytest.raises(ModelValidationError):
        MaxPool(2, stride=1)
    with pytest.raises(ModelValidationError):
        Dense(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ModelValidationError):
        Conv2D(np.ones((1, 1, 2, 2)), stride=0)
    with pytest.raises(ModelValidationError) as err:
        Network((Dense(np.ones((3, 2))), ReLU(), Dense(np.ones((2, 4)))), (2,))
    assert err.value.layer_index == 2
    with pytest.raises(ModelValidationError):
        Network((Conv2D(np.ones((1, 1, 2, 2))),), (1, 4, 4))  # logits must be rank 1


def test_conv_adjoint_against_transpose_matrix():
    from oracles import conv_matrix
    rng = make_rng(8)
    conv = Conv2D(rng.standard_normal((2, 3, 3, 2)), stride=2, padding=(1, 0))
    shape = (3, 7, 6)
    m = conv_matrix(conv.weight, shape, conv.stride, conv.padding)
    x = rng.standard_normal(shape)
    y = conv.linear(x)
    np.testing.assert_allclose(y.ravel(), m @ x.ravel(), rtol=1e-12, atol=1e-12)
    g = rng.standard_normal(y.shape)
    np.testing.assert_allclose(conv.linear_adjoint(g, shape).ravel(), m.T @ g.ravel(),
                               rtol=1e-12, atol=1e-12)


# -- model file -------------------------------------------------------------

def all_layer_net():
    rng = make_rng(13)
    layers = (
        Conv2D(rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2), 1, (1, 1)),
        LeakyReLU(0.05), MaxPool(2),
        Conv2D(rng.standard_normal((2, 2, 1, 1)), None), ELU(0.7), AvgPool(2),
        Flatten(), Dense(rng.standard_normal((5, 8)), rng.standard_normal(5)), Sigmoid(),
        Dense(rng.standard_normal((4, 5))), Tanh(), Dense(rng.standard_normal((3, 4))), ReLU(),
    )
    return Network(layers, (1, 8, 8))


def test_round_trip_bit_exact(tmp_path):
    for net in (seed7_mlp(), all_layer_net()):
        path = tmp_path / "m.json"
        save_model(net, path)
        back = load_model(path)
        assert [l.kind for l in back.layers] == [l.kind for l in net.layers]
        for a, b in zip(net.layers, back.layers):
            if a.has_weights:
                assert a.weight.tobytes() == b.weight.tobytes()
                assert (a.bias is None) == (b.bias is None)
                if a.bias is not None:
                    assert a.bias.tobytes() == b.bias.tobytes()
            assert a.params() == b.params()
        assert model_digest(back) == model_digest(net)
        x = make_rng(1).standard_normal(net.input_shape)
        assert forward(back, x).tobytes() == forward(net, x).tobytes()


def test_load_mismatched_shapes_names_layer():
    doc = json.loads(dumps_model(seed7_mlp()))
    doc["layers"][2]["weight"] = json.loads(dumps_model(
        Network((Dense(np.ones((5, 3))),), (3,))))["layers"][0]["weight"]
    with pytest.raises(ModelValidationError) as err:
        loads_model(json.dumps(doc))
    assert err.value.layer_index == 2
    assert "layer 2" in str(err.value)


def test_load_rejects_alpha_above_one():
    net = Network((Dense(np.eye(2)), LeakyReLU(0.1), Dense(np.eye(2))), (2,))
    doc = json.loads(dumps_model(net))
    doc["layers"][1]["alpha"] = 1.5
    with pytest.raises(ModelValidationError) as err:
        loads_model(json.dumps(doc))
    assert err.value.layer_index == 1


def test_parse_errors_carry_context():
    with pytest.raises(ModelParseError) as err:
        loads_model('{"format_version": 1,\n "layers": [}')
    assert "line 2" in str(err.value)
    good = json.loads(dumps_model(seed7_mlp()))
    bad = dict(good, layers=[dict(good["layers"][0], weight={"shape": [5, 4], "data": "AAAA"})])
    with pytest.raises(ModelParseError) as err:
        loads_model(json.dumps(bad))
    assert "layers[0].weight" in str(err.value)
    with pytest.raises(ModelParseError):
        loads_model(json.dumps(dict(good, format_version=2)))
    with pytest.raises(ModelParseError) as err:
        loads_model(json.dumps(dict(good, layers=[{"kind": "softmax"}])))
    assert "layers[0].kind" in str(err.value)


def test_extended_precision_oracle_agrees(fixture_nets):
    import mpmath
    from oracles import mp_forward
    rng = make_rng(23)
    for name, net in fixture_nets.items():
        x = rng.standard_normal(net.input_shape)
        with mpmath.workdps(30):
            ref = [float(v) for v in mp_forward(net, [mpmath.mpf(float(v)) for v in x.ravel()])]
        np.testing.assert_allclose(forward(net, x), ref, rtol=1e-12, atol=1e-13, err_msg=name)
