import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skillseg import autodiff as ad
from skillseg.exceptions import ConfigurationError, TrainingError, UsageError


def _mlp(sizes, seed=0, hidden="tanh"):
    return ad.MlpParams.init(sizes, np.random.default_rng(seed), hidden=hidden)


# forward -------------------------------------------------------------------------

def test_identity_layer():
    net = ad.MlpParams([ad.parameter(np.eye(2))], [ad.parameter(np.zeros(2))], ["identity"])
    np.testing.assert_array_equal(net(np.array([1.0, 2.0])).value, [1.0, 2.0])


def test_zero_weights_constant_bias():
    net = ad.MlpParams([ad.parameter(np.zeros((1, 3)))], [ad.parameter(np.array([0.5]))], ["identity"])
    for x in (np.zeros(3), np.array([4.0, -2.0, 7.0])):
        np.testing.assert_array_equal(net(x).value, [0.5])


def test_forward_matches_straight_line_evaluation():
    net = _mlp([3, 5, 2], seed=7)
    x = np.array([0.3, -1.2, 2.0])
    w1, b1, w2, b2 = (p.value for p in net.parameters())
    hidden = [np.tanh(sum(w1[j, i] * x[i] for i in range(3)) + b1[j]) for j in range(5)]
    expected = [sum(w2[k, j] * hidden[j] for j in range(5)) + b2[k] for k in range(2)]
    np.testing.assert_allclose(net(x).value, expected, rtol=1e-14, atol=1e-14)


def test_forward_batch_equals_rows():
    net = _mlp([4, 6, 3], seed=1)
    x = np.random.default_rng(2).normal(size=(5, 4))
    batch = net(x).value
    for i in range(5):
        np.testing.assert_allclose(batch[i], net(x[i]).value, atol=1e-15)


def test_layer_chain_is_checked():
    with pytest.raises(ConfigurationError):
        ad.MlpParams([ad.parameter(np.zeros((3, 2))), ad.parameter(np.zeros((1, 4)))],
                     [ad.parameter(np.zeros(3)), ad.parameter(np.zeros(1))], ["tanh", "identity"])
    net = _mlp([2, 3])
    with pytest.raises(ConfigurationError):
        net(np.zeros(5))


# backward ------------------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = ad.parameter(np.array([1.0, -2.0, 3.0]))
    grads = ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(grads[x], np.ones(3))


def test_self_detach_gradient_is_zero():
    x = ad.parameter(np.array([0.4, -1.0, 2.5]))
    loss = ad.tsum(ad.square(x - ad.stop_gradient(x)))
    grads = ad.backward(loss)
    np.testing.assert_array_equal(grads[x], np.zeros(3))


def test_stop_gradient_codebook_structure():
    z = ad.parameter(np.array([1.0, 2.0]))
    e = ad.parameter(np.array([0.5, -1.0]))
    grads = ad.backward(ad.tsum(ad.square(ad.stop_gradient(z) - e)))
    assert z not in grads
    np.testing.assert_allclose(grads[e], -2 * (z.value - e.value))


def test_stop_gradient_commitment_structure():
    z = ad.parameter(np.array([1.0, 2.0]))
    e = ad.parameter(np.array([0.5, -1.0]))
    grads = ad.backward(ad.tsum(ad.square(z - ad.stop_gradient(e))))
    assert e not in grads
    np.testing.assert_allclose(grads[z], 2 * (z.value - e.value))


def test_stop_gradient_idempotent():
    x = ad.parameter(np.array([3.0, -1.0]))
    once, twice = ad.stop_gradient(x), ad.stop_gradient(ad.stop_gradient(x))
    np.testing.assert_array_equal(once.value, twice.value)
    y = ad.parameter(np.array([1.0, 1.0]))
    for sg in (once, twice):
        grads = ad.backward(ad.tsum(sg * y))
        assert x not in grads
        np.testing.assert_array_equal(grads[y], x.value)


def test_straight_through_copies_gradient():
    z_e = ad.parameter(np.array([0.2, 0.7]))
    z_q = np.array([1.0, -1.0])
    out = ad.straight_through(z_e, z_q)
    np.testing.assert_array_equal(out.value, z_q)
    grads = ad.backward(ad.tsum(out * np.array([3.0, 5.0])))
    np.testing.assert_array_equal(grads[z_e], [3.0, 5.0])


def test_upstream_of_stop_gradient_gets_nothing():
    net = _mlp([3, 4, 2], seed=3)
    head = ad.parameter(np.ones(2))
    h = ad.stop_gradient(net(np.ones((5, 3))))
    grads = ad.backward(ad.tsum(h * head))
    assert sum(float(np.abs(grads.get(p, 0.0)).sum()) for p in net.parameters()) == 0.0
    assert head in grads


def test_backward_requires_scalar():
    with pytest.raises(UsageError):
        ad.backward(ad.parameter(np.ones(3)) * 2.0)


def test_mlp_mse_matches_finite_differences():
    net = _mlp([4, 8, 8, 2], seed=5)
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(16, 4)), rng.normal(size=(16, 2))
    err = ad.gradient_check(lambda: ad.tmean(ad.square(net(x) - y)), net.parameters(), n_coords=120)
    assert err < 1e-4


OPS = [
    ("exp", lambda a: ad.exp(a * 0.5)),
    ("log", lambda a: ad.log(ad.square(a) + 1.0)),
    ("tanh", ad.tanh),
    ("sigmoid", ad.sigmoid),
    ("softplus", ad.softplus),
    ("div", lambda a: a / (ad.square(a) + 2.0)),
    ("clip", lambda a: ad.clip(a, -0.5, 0.5)),
    ("transpose-matmul", lambda a: ad.matmul(ad.reshape(a, (2, 3)), ad.transpose(ad.reshape(a, (2, 3))))),
    ("getitem", lambda a: ad.getitem(ad.reshape(a, (2, 3)), (slice(None), slice(1, 3)))),
    ("take_rows", lambda a: ad.take_rows(ad.reshape(a, (3, 2)), np.array([2, 0, 2]))),
    ("concat", lambda a: ad.concat([a, ad.square(a)], axis=0)),
    ("mean-axis", lambda a: ad.tmean(ad.reshape(a, (2, 3)), axis=0)),
    ("broadcast", lambda a: ad.reshape(a, (2, 3)) + ad.reshape(a, (2, 3))[0]),
]


@pytest.mark.parametrize("name,op", OPS, ids=[o[0] for o in OPS])
def test_primitive_gradients(name, op):
    # clip: keep coordinates away from the kinks at +/-0.5
    a = ad.parameter(np.array([0.13, -0.31, 0.72, -0.9, 0.24, 0.05]))
    w = np.random.default_rng(0).normal(size=op(a).shape)
    assert ad.gradient_check(lambda: ad.tsum(op(a) * w), [a], n_coords=6) < 1e-6


# adam ------------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = ad.parameter(np.array([1.0, -2.0]))
    state = ad.OptimState([p])
    for _ in range(5):
        ad.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_moves_against_constant_gradient():
    p = ad.parameter(np.array([0.0]))
    state = ad.OptimState([p], lr=1e-2)
    trace = []
    for _ in range(50):
        ad.adam_step([p], [np.array([0.3])], state)
        trace.append(p.value[0])
    assert np.all(np.diff(trace) < 0)


def test_adam_single_step_arithmetic():
    p = ad.parameter(np.array([1.0]))
    state = ad.OptimState([p], lr=1e-3)
    ad.adam_step([p], [np.array([0.1])], state)
    m_hat = (0.1 * 0.1) / (1 - 0.9)
    v_hat = (0.001 * 0.01) / (1 - 0.999)
    assert p.value[0] == pytest.approx(1.0 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-15)


def test_adam_rejects_nonfinite_gradient():
    p = ad.parameter(np.array([1.0]))
    with pytest.raises(TrainingError):
        ad.adam_step([p], [np.array([np.nan])], ad.OptimState([p]))


def test_training_is_bit_deterministic():
    def train():
        net = _mlp([3, 6, 1], seed=11)
        rng = np.random.default_rng(12)
        x, y = rng.normal(size=(32, 3)), rng.normal(size=(32, 1))
        opt = ad.Adam(net.parameters(), lr=1e-2)
        for _ in range(20):
            opt.step(ad.tmean(ad.square(net(x) - y)))
        return [p.value.copy() for p in net.parameters()]

    for a, b in zip(train(), train()):
        np.testing.assert_array_equal(a, b)


# checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip_is_exact(tmp_path):
    net = _mlp([3, 4, 2], seed=9, hidden="relu")
    path = tmp_path / "net.json"
    ad.save_checkpoint(path, "toy", {"net": net}, extra={"note": 1})
    doc = json.loads(path.read_text())
    assert doc["kind"] == "toy" and doc["modules"]["net"]["activations"] == ["relu", "identity"]
    mods, extra = ad.load_checkpoint(path, "toy")
    assert extra == {"note": 1}
    for p, q in zip(net.parameters(), mods["net"].parameters()):
        np.testing.assert_array_equal(p.value, q.value)
    with pytest.raises(ConfigurationError):
        ad.load_checkpoint(path, "other")


# properties ------------------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_product_rule_property(a, b):
    x, y = ad.parameter(a), ad.parameter(b)
    grads = ad.backward(ad.tsum(x * y))
    np.testing.assert_array_equal(grads[x], b)
    np.testing.assert_array_equal(grads[y], a)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_mlp_gradients_property(seed):
    rng = np.random.default_rng(seed)
    net = _mlp([3, 5, 2], seed=seed)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    assert ad.gradient_check(lambda: ad.tmean(ad.square(net(x) - y)), net.parameters(), n_coords=20) < 1e-4
