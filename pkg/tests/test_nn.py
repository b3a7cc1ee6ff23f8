import math

import numpy as np
import pytest

from poisonpool.nn import (
    Model,
    ModelSpec,
    TrainRegimen,
    forward,
    init_model,
    loss_and_grad,
    one_hot,
    predict,
    softmax,
    train,
    train_with_history,
)
from poisonpool.seeding import rng_from


def small_spec(**kw):
    defaults = dict(input_shape=(1, 8, 8), classes=3, hidden=(6,))
    defaults.update(kw)
    return ModelSpec(**defaults)


def test_zero_weight_model_gives_uniform_softmax():
    spec = ModelSpec(input_shape=(1, 8, 8), classes=10, hidden=(16,))
    model = init_model(spec, 0)
    model.params = [np.zeros_like(p) for p in model.params]
    logits = forward(model, rng_from(1).random((5, 1, 8, 8)))
    assert np.all(logits == 0.0)
    probs = softmax(logits)
    assert np.allclose(probs, 0.1, atol=1e-12)


def test_identity_linear_layer_reproduces_one_hot_input():
    spec = ModelSpec(input_shape=(1, 2, 2), classes=4, hidden=())
    model = Model(spec, [np.eye(4), np.zeros(4)])
    for k in range(4):
        e_k = np.zeros((1, 4))
        e_k[0, k] = 1.0
        logits = forward(model, e_k)
        assert np.array_equal(logits[0], e_k[0])


HAND_W1 = np.array([[0.5, -1.0], [0.25, 0.75]])
HAND_B1 = np.array([0.1, -0.1])
HAND_W2 = np.array([[1.0, -0.5], [-2.0, 0.5]])
HAND_B2 = np.array([0.05, -0.05])
# hand evaluation of the two affine layers for input (1, 2):
#   z1 = (1*0.5 + 2*0.25 + 0.1, 1*-1 + 2*0.75 - 0.1) = (1.1, 0.4); relu keeps both
#   z2 = (1.1*1 + 0.4*-2 + 0.05, 1.1*-0.5 + 0.4*0.5 - 0.05) = (0.35, -0.4)
HAND_LOGITS = np.array([0.35, -0.4])


def hand_model():
    spec = ModelSpec(input_shape=(1, 1, 2), classes=2, hidden=(2,))
    return Model(spec, [HAND_W1.copy(), HAND_B1.copy(), HAND_W2.copy(), HAND_B2.copy()])


def test_two_two_two_net_matches_hand_arithmetic():
    logits = forward(hand_model(), np.array([[1.0, 2.0]]))
    assert np.allclose(logits[0], HAND_LOGITS, atol=1e-12)


def test_predict_matches_hand_argmax():
    assert predict(hand_model(), np.array([[1.0, 2.0]]))[0] == 0


def test_forward_rejects_shape_mismatch_with_dimension_diagnostic():
    model = init_model(small_spec(), 0)
    with pytest.raises(ValueError, match="64"):
        forward(model, np.zeros((2, 63)))
    with pytest.raises(ValueError, match="model expects"):
        forward(model, np.zeros((2, 1, 7, 8)))


def test_loss_of_uniform_logits_is_log_c():
    spec = ModelSpec(input_shape=(1, 8, 8), classes=10, hidden=())
    model = Model(spec, [np.zeros((64, 10)), np.zeros(10)])
    x = rng_from(0).random((7, 1, 8, 8))
    labels = one_hot(np.arange(7) % 10, 10)
    loss, _ = loss_and_grad(model, x, labels)
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_loss_tends_to_zero_for_confident_correct_prediction():
    spec = ModelSpec(input_shape=(1, 1, 2), classes=2, hidden=())
    model = Model(spec, [np.array([[50.0, -50.0], [0.0, 0.0]]), np.zeros(2)])
    loss, _ = loss_and_grad(model, np.array([[1.0, 0.0]]), one_hot(np.array([0]), 2))
    assert loss < 1e-10


def test_loss_rejects_label_rows_not_summing_to_one():
    model = init_model(small_spec(), 0)
    x = rng_from(0).random((2, 64))
    bad = np.full((2, 3), 0.5)
    with pytest.raises(ValueError, match="sums to"):
        loss_and_grad(model, x, bad)


def test_soft_labels_within_tolerance_accepted():
    model = init_model(small_spec(), 0)
    x = rng_from(0).random((1, 64))
    labels = np.array([[0.5, 0.25, 0.25 + 5e-7]])
    loss, _ = loss_and_grad(model, x, labels)
    assert np.isfinite(loss)


def relative_gradient_error(model, x, labels, step=1e-4):
    """Central finite differences over every parameter of a small net."""
    _, analytic = loss_and_grad(model, x, labels)
    worst = 0.0
    for pi, param in enumerate(model.params):
        flat = param.ravel()
        grad = analytic[pi].ravel()
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            up, _ = loss_and_grad(model, x, labels)
            flat[j] = original - step
            down, _ = loss_and_grad(model, x, labels)
            flat[j] = original
            fd = (up - down) / (2.0 * step)
            worst = max(worst, abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-3))
    return worst


def random_small_model(rng):
    """A random architecture with at most ~200 parameters."""
    kind = rng.integers(0, 3)
    if kind == 0:
        classes = int(rng.integers(2, 5))
        hidden = (int(rng.integers(2, 7)),) if rng.integers(0, 2) else ()
        spec = ModelSpec(input_shape=(1, 4, 5), classes=classes, hidden=hidden)
    elif kind == 1:
        spec = ModelSpec(input_shape=(2, 3, 4), classes=3, hidden=(4,))
    else:
        arch = "conv" if rng.integers(0, 2) else "conv_pool"
        spec = ModelSpec(input_shape=(1, 5, 5), classes=3, hidden=(), arch=arch,
                         conv_filters=2, avg_pool=2)
    model = init_model(spec, int(rng.integers(0, 2**31)))
    assert model.n_parameters() <= 200
    return model


def test_gradients_match_finite_differences_on_random_nets():
    rng = rng_from(1234)
    for _ in range(20):  # the full 100-net sweep lives in the acceptance suite
        model = random_small_model(rng)
        c, h, w = model.spec.input_shape
        x = rng.random((3, c, h, w))
        labels = one_hot(rng.integers(0, model.spec.classes, size=3), model.spec.classes)
        assert relative_gradient_error(model, x, labels) < 1e-4


def test_softmax_rows_sum_to_one():
    rng = rng_from(5)
    for _ in range(50):
        logits = rng.normal(0, 10, size=(4, 6))
        assert np.allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-6)


def separable_blobs(seed, n_per=40):
    rng = rng_from(seed)
    a = rng.normal((-1.0, -1.0), 0.3, size=(n_per, 2))
    b = rng.normal((1.0, 1.0), 0.3, size=(n_per, 2))
    x = np.concatenate([a, b]).reshape(-1, 1, 1, 2)
    # input shape (1, 1, 2) is below the 8x8 floor of DatasetSpec but fine for the net
    y = np.array([0] * n_per + [1] * n_per)
    return x, y


def perceptron_separable(x, y, epochs=200):
    """Independent separability oracle: perceptron convergence."""
    flat = x.reshape(x.shape[0], -1)
    flat = np.hstack([flat, np.ones((len(flat), 1))])
    t = 2.0 * y - 1.0
    w = np.zeros(flat.shape[1])
    for _ in range(epochs):
        errors = 0
        for i in range(len(flat)):
            if t[i] * (flat[i] @ w) <= 0:
                w += t[i] * flat[i]
                errors += 1
        if errors == 0:
            return True
    return False


def test_training_reaches_full_accuracy_on_separable_blobs():
    x, y = separable_blobs(42)
    assert perceptron_separable(x, y)
    spec = ModelSpec(input_shape=(1, 1, 2), classes=2, hidden=(8,))
    model = train(init_model(spec, 0), x, y, TrainRegimen(epochs=50, learning_rate=0.1, shuffle_seed=3))
    assert np.mean(predict(model, x) == y) == 1.0


def test_single_repeated_sample_is_predicted_as_its_label():
    x = np.tile(rng_from(9).random((1, 1, 8, 8)), (10, 1, 1, 1))
    y = np.full(10, 2)
    spec = ModelSpec(input_shape=(1, 8, 8), classes=4, hidden=(6,))
    model = train(init_model(spec, 1), x, y, TrainRegimen(epochs=20, learning_rate=0.1, shuffle_seed=0))
    assert predict(model, x[:1])[0] == 2


def test_training_is_bitwise_deterministic():
    x, y = separable_blobs(7)
    spec = ModelSpec(input_shape=(1, 1, 2), classes=2, hidden=(5,))
    regimen = TrainRegimen(epochs=10, learning_rate=0.05, shuffle_seed=11)
    a = train(init_model(spec, 3), x, y, regimen)
    b = train(init_model(spec, 3), x, y, regimen)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa, pb)


def test_train_does_not_mutate_input_model():
    x, y = separable_blobs(8)
    spec = ModelSpec(input_shape=(1, 1, 2), classes=2, hidden=(5,))
    model = init_model(spec, 3)
    before = [p.copy() for p in model.params]
    train(model, x, y, TrainRegimen(epochs=2, learning_rate=0.05, shuffle_seed=0))
    for p, b in zip(model.params, before):
        assert np.array_equal(p, b)


def test_training_loss_decreases_on_learnable_data():
    x, y = separable_blobs(13)
    spec = ModelSpec(input_shape=(1, 1, 2), classes=2, hidden=(8,))
    _, history = train_with_history(
        init_model(spec, 2), x, y, TrainRegimen(epochs=30, learning_rate=0.1, shuffle_seed=5)
    )
    assert history[-1] < history[0]


def test_train_rejects_empty_dataset():
    spec = small_spec()
    with pytest.raises(ValueError, match="empty"):
        train(init_model(spec, 0), np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int), TrainRegimen())


def test_train_rejects_out_of_range_labels():
    spec = small_spec()
    x = rng_from(0).random((4, 1, 8, 8))
    with pytest.raises(ValueError, match="labels"):
        train(init_model(spec, 0), x, np.array([0, 1, 2, 3]), TrainRegimen())


def test_predict_breaks_ties_toward_lowest_class():
    spec = ModelSpec(input_shape=(1, 1, 2), classes=2, hidden=())
    model = Model(spec, [np.zeros((2, 2)), np.array([0.5, 0.5])])
    assert predict(model, np.array([[0.3, 0.4]]))[0] == 0


def test_regimen_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainRegimen(epochs=0)
    with pytest.raises(ValueError, match="batch_size"):
        TrainRegimen(batch_size=0)
    with pytest.raises(ValueError, match="learning_rate"):
        TrainRegimen(learning_rate=0.0)


def test_initialization_is_within_fan_in_bound_and_seeded():
    spec = ModelSpec(input_shape=(1, 8, 8), classes=10, hidden=(16,))
    a = init_model(spec, 42)
    b = init_model(spec, 42)
    c = init_model(spec, 43)
    bound = 1.0 / math.sqrt(64)
    assert np.all(np.abs(a.params[0]) <= bound)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))
    assert any(not np.array_equal(x, y) for x, y in zip(a.params, c.params))
