import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from builders import logistic_network, random_network
from oracles import central_difference, distance_to_kinks
from preddiff.classifiers import (
    Affine,
    ClassifierError,
    LayerTap,
    Network,
    ReLU,
    ShapeMismatch,
    Softmax,
    TrainingError,
    accuracy,
    build_network,
    forward_with_taps,
    load_model,
    predict_proba,
    save_model,
    train_logreg,
    train_small_net,
)
from preddiff.classifiers.training import logreg_step_size


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def blobs(n=200, seed=0):
    """Two Gaussian blobs whose centres are 4 standard deviations apart."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 2)) * 0.5 + np.where(y[:, None] == 1, 1.0, -1.0)
    return x, y


def xor(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 2))
    x = x[np.abs(x).min(axis=1) > 0.1]
    return x, ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)


# prediction --------------------------------------------------------------------


def test_zero_weight_logreg_is_uniform():
    net = logistic_network(np.zeros(4), 0.0, (4,))
    assert predict_proba(net, np.random.default_rng(0).random((3, 4))).tolist() == [[0.5, 0.5]] * 3


def test_single_feature_sigmoid_at_zero():
    net = logistic_network([1.0], 0.0, (1,))
    assert net.predict_proba(np.zeros((1, 1)))[0, 1] == 0.5
    assert net.predict_proba(np.array([[2.0]]))[0, 1] == pytest.approx(1 / (1 + np.exp(-2.0)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_batch_equals_single_items_bitwise(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    batch = rng.random((17,) + net.input_shape)
    whole = net.predict_proba(batch)
    singles = np.concatenate([net.predict_proba(batch[i : i + 1]) for i in range(17)])
    assert np.array_equal(whole, singles)
    assert np.all(whole >= 0) and np.allclose(whole.sum(axis=1), 1.0, atol=1e-6)


def test_shape_mismatch():
    net = logistic_network(np.zeros(4), 0.0, (4,))
    with pytest.raises(ShapeMismatch):
        net.predict_proba(np.zeros((2, 5)))


# taps --------------------------------------------------------------------------


def test_softmax_tap_equals_probability():
    rng = np.random.default_rng(1)
    net = random_network(rng, "mlp")
    x = rng.random((5,) + net.input_shape)
    (tap,), probs = forward_with_taps(net, x, [LayerTap.probability(1)])
    assert np.array_equal(tap[:, 0], probs[:, 1])
    assert np.array_equal(probs, net.predict_proba(x))


def test_relu_tap_of_negative_preactivation_is_zero():
    W = np.array([[-1.0, 1.0]])
    net = Network((1,), [Affine("a", W, np.zeros(2)), ReLU("r"), Affine("b", np.eye(2), np.zeros(2)),
                         Softmax("s")])
    out = net.tap_values(np.array([[0.7]]), LayerTap("unit", 0, "r"))
    pre = net.tap_values(np.array([[0.7]]), LayerTap("unit", 0, "a"))
    assert pre[0, 0] < 0 and out[0, 0] == 0.0


def test_conv_feature_map_tap_has_spatial_extent():
    net = build_network((8, 8), [{"type": "conv", "filters": 3, "size": 3}, {"type": "relu"}], 2)
    assert net.layer_shape("conv1") == (6, 6, 3)
    tap = LayerTap("map", 2, "conv1")
    assert net.tap_values(np.zeros((4, 8, 8)), tap).shape == (4, 36)
    assert net.tap_units(tap) == 36


def test_logit_tap_reads_pre_softmax_layer():
    net = random_network(np.random.default_rng(2), "mlp")
    x = np.random.default_rng(3).random((3,) + net.input_shape)
    assert np.array_equal(net.tap_values(x, LayerTap("logit", 1)), net.logits(x)[:, 1:2])


def test_unknown_layer_lists_available():
    net = random_network(np.random.default_rng(2), "mlp")
    with pytest.raises(ClassifierError, match="available: affine1, relu1"):
        net.tap_values(np.zeros((1,) + net.input_shape), LayerTap("unit", 0, "nope"))


def test_tap_from_hidden_layer_resumes_forward_pass():
    rng = np.random.default_rng(4)
    net = random_network(rng, "mlp")
    x = rng.random((6,) + net.input_shape)
    hidden = net.activations(x)["relu1"]
    assert np.array_equal(net.tap_from("relu1", hidden, LayerTap.probability(0)),
                          net.predict_proba(x)[:, :1])


def test_layer_tap_validation():
    with pytest.raises(ValueError):
        LayerTap("unit", 0)
    with pytest.raises(ValueError):
        LayerTap("neuron", 0, "x")


# gradients ---------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_input_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    x = rng.random(net.input_shape)
    assume(distance_to_kinks(net, x) > 1e-3)
    c = int(rng.integers(net.num_classes))
    analytic = net.input_gradient(x[None], LayerTap.probability(c))[0]
    numeric = central_difference(lambda v: net.predict_proba(v[None])[0, c], x, 1e-4)
    assert rel_error(analytic, numeric) <= 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_parameter_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    x = rng.random((4,) + net.input_shape)
    assume(distance_to_kinks(net, x) > 1e-3)
    y = rng.integers(0, net.num_classes, 4)
    _, grads = net.loss_and_grads(x, y, l2=0.1)
    for key, p in net.parameters():
        def loss(v, p=p):
            saved = p.copy()
            p[...] = v
            out = net.loss_and_grads(x, y, l2=0.1)[0]
            p[...] = saved
            return out
        numeric = central_difference(loss, p.copy(), 1e-5)
        assert rel_error(grads[key], numeric) <= 1e-4, key


def test_logit_gradient_of_logreg_is_weight_difference():
    w = np.array([0.5, -2.0, 1.0])
    net = logistic_network(w, 0.3, (3,))
    g = net.input_gradient(np.random.default_rng(0).random((2, 3)), LayerTap("logit", 1))
    assert np.allclose(g, w)


# training ----------------------------------------------------------------------


def test_logreg_separates_blobs():
    x, y = blobs()
    net = train_logreg(x, y, l2=1e-3, epochs=200)
    assert accuracy(net, x, y) >= 0.95


def test_logreg_loss_is_monotone_under_default_step():
    x, y = blobs(seed=3)
    history = train_logreg(x, y, l2=1e-2, epochs=100, solver="gd").training["loss_history"]
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_logreg_step_size_bounds_hessian():
    x, _ = blobs()
    lr = logreg_step_size(x, 0.0)
    aug = np.hstack([x, np.ones((len(x), 1))])
    assert lr == pytest.approx(1 / (0.5 * np.linalg.eigvalsh(aug.T @ aug / len(x)).max()))


def test_strong_regularization_predicts_class_frequencies():
    # only the unpenalised bias survives, and it fits the class prior
    x, y = blobs()
    net = train_logreg(x, y, l2=1e6, epochs=200)
    assert np.abs(net.layers[0].params["W"]).max() < 1e-5
    assert np.allclose(net.predict_proba(x)[:, 1], y.mean(), atol=1e-4)


def test_logreg_is_deterministic():
    x, y = blobs()
    a = train_logreg(x, y, epochs=20)
    b = train_logreg(x, y, epochs=20)
    assert a.fingerprint() == b.fingerprint()


def test_logreg_centering_does_not_change_the_objective_optimum():
    # descending on shifted inputs must give the same predictions on raw inputs
    x, y = blobs(seed=5)
    net = train_logreg(x + 5.0, y, l2=1e-2, epochs=2000, solver="gd")
    ref = train_logreg(x, y, l2=1e-2, epochs=2000, solver="gd")
    assert np.allclose(net.predict_proba(x + 5.0), ref.predict_proba(x), atol=1e-6)


def test_solvers_reach_the_same_optimum():
    x, y = blobs(seed=6)
    gd = train_logreg(x, y, l2=1e-1, epochs=3000, solver="gd")
    lb = train_logreg(x, y, l2=1e-1, epochs=500)
    assert lb.training["solver"] == "lbfgs"
    assert lb.training["loss_history"][-1] <= gd.training["loss_history"][-1] + 1e-9
    assert np.allclose(lb.predict_proba(x), gd.predict_proba(x), atol=1e-5)


def test_training_label_checks():
    x, _ = blobs(20)
    with pytest.raises(ValueError, match="two classes"):
        train_logreg(x, np.zeros(20, dtype=int))
    with pytest.raises(ValueError, match="integer labels"):
        train_logreg(x, np.zeros(19, dtype=int))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_training_error():
    x, y = blobs()
    with pytest.raises(TrainingError, match="loss became"):
        train_logreg(x, y, l2=1.0, epochs=200, lr=1e6)


def test_mlp_learns_xor():
    x, y = xor()
    net = train_small_net([{"type": "affine", "units": 16}, {"type": "relu"}], x, y, epochs=400, lr=0.05)
    assert accuracy(net, x, y) >= 0.95


def test_zero_epochs_returns_initialisation():
    x, y = xor(50)
    skeleton = [{"type": "affine", "units": 4}, {"type": "relu"}]
    net = train_small_net(skeleton, x, y, epochs=0, seed=3)
    init = build_network((2,), skeleton, 2, seed=3)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(net.parameters(), init.parameters()))


def test_minibatch_training_runs_and_records_epochs():
    x, y = xor(100)
    net = train_small_net([{"type": "affine", "units": 8}, {"type": "relu"}], x, y, epochs=5, batch_size=16)
    assert len(net.training["loss_history"]) == 5


# persistence -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_model_file_round_trip_is_bitwise(tmp_path, seed):
    net = random_network(np.random.default_rng(seed))
    save_model(tmp_path / "m", net)
    back = load_model(tmp_path / "m")
    assert back.fingerprint() == net.fingerprint()
    save_model(tmp_path / "n", back)
    assert (tmp_path / "m").read_bytes() == (tmp_path / "n").read_bytes()


def test_network_validation():
    with pytest.raises(ValueError, match="last layer must be softmax"):
        Network((2,), [Affine("a", np.eye(2), np.zeros(2))])
    with pytest.raises(ValueError, match="duplicate"):
        Network((2,), [Affine("a", np.eye(2), np.zeros(2)), Softmax("a")])
