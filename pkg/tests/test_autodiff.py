import numpy as np
import pytest

from vsd import autodiff as ad
from vsd.autodiff import Tape, Tensor, backward, finite_difference_check


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]))
    assert np.array_equal(out.data, np.array([0.5, 0.5]))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(5, 9)) * 4)
    out = ad.softmax(x, axis=-1)
    assert np.all(out.data >= 0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
    assert np.array_equal(out.data, x)


def test_matmul_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(3, 4\).*\(5, 2\)"):
        ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


def test_concat_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="concat"):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


def test_layer_norm_hand_value():
    # x = [1, 3]: mean 2, population std 1 -> (x - mu) / sigma = [-1, 1]
    x = Tensor([1.0, 3.0])
    out = ad.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-12)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_values(ad.mul(x, x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)


def test_backward_matrix_column_sums():
    # loss = sum(A @ x) => dloss/dx_j = sum_i A[i, j]
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 6))
    x = Tensor(rng.normal(size=(6, 1)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_values(ad.matmul(Tensor(a), x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad[:, 0], a.sum(axis=0), atol=1e-12)


def test_backward_accumulates_linearly():
    def run_once(x):
        with Tape() as tape:
            loss = ad.sum_values(ad.mul(x, x))
        backward(tape, loss)

    x = Tensor([1.5, -2.0], requires_grad=True)
    run_once(x)
    once = x.grad.copy()
    run_once(x)
    np.testing.assert_array_equal(x.grad, 2.0 * once)


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)


def test_backward_rejects_detached_loss():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        ad.sum_values(ad.mul(x, x))
    detached = Tensor(3.0)
    with pytest.raises(ValueError, match="detached"):
        backward(tape, detached)


def test_no_recording_outside_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    out = ad.mul(x, x)
    assert out.requires_grad is False
    with Tape() as tape:
        ad.sum_values(ad.mul(x, x))
        assert len(tape) == 2
    assert len(tape) == 2  # recording stops once the block exits


def test_masked_softmax_exact_zeros_and_all_masked_rejected():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4)))
    mask = np.array([[True, False, True, True], [True, True, True, True]])
    out = ad.masked_softmax(x, mask)
    assert out.data[0, 1] == 0.0
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    bad = np.array([[False, False, False, False], [True, True, True, True]])
    with pytest.raises(ValueError, match="masked"):
        ad.masked_softmax(x, bad)


def test_embedding_rejects_out_of_range_id():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(ValueError, match="id 7 out of range"):
        ad.embedding(table, [0, 7])


def test_take_rows_and_gradient():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    with Tape() as tape:
        picked = ad.take_rows(x, [1, 0, 3])
        loss = ad.sum_values(picked)
    assert np.array_equal(picked.data, [1.0, 4.0, 11.0])
    backward(tape, loss)
    expected = np.zeros((3, 4))
    expected[0, 1] = expected[1, 0] = expected[2, 3] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_dropout_identity_and_determinism():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    assert ad.dropout(x, 0.0, np.random.default_rng(0)) is x
    assert ad.dropout(x, 0.5, None) is x
    a = ad.dropout(x, 0.5, np.random.default_rng(5)).data
    b = ad.dropout(x, 0.5, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)


def test_forward_determinism_bit_identical():
    def run(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(6, 8)))
        w = Tensor(rng.normal(size=(8, 8)))
        h = ad.relu(ad.linear(x, w))
        return ad.softmax(h, axis=-1).data.tobytes()

    assert run(42) == run(42)


def test_finite_difference_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    err = finite_difference_check(lambda t: ad.sum_values(ad.mul(t, t)), x, step=1e-5)
    assert err < 1e-7


def test_finite_difference_constant_function():
    x = Tensor([0.3, -0.4], requires_grad=True)
    err = finite_difference_check(lambda t: ad.sum_values(ad.mul(Tensor([1.0]), Tensor([2.0]))), x)
    assert err == 0.0


def test_finite_difference_rejects_bad_step():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="step"):
        finite_difference_check(lambda t: ad.sum_values(t), x, step=0.0)


def _gradcheck_cases(rng):
    """One scalar-valued composition per primitive, on random small tensors."""
    a23 = rng.normal(size=(2, 3))
    a34 = rng.normal(size=(3, 4))
    mask = rng.random((2, 5)) > 0.3
    mask[:, 0] = True
    weights = Tensor(rng.normal(size=(2, 5)))
    ids = rng.integers(0, 4, size=3)
    cols = rng.integers(0, 3, size=2)
    gain = Tensor(rng.normal(size=3) + 1.0)
    bias = Tensor(rng.normal(size=3))
    bias4 = Tensor(rng.normal(size=4))
    drop_seed = int(rng.integers(0, 2**31))
    return {
        "add": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.add(t, Tensor(a23)), ad.add(t, Tensor(a23))))),
        "sub": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.sub(t, Tensor(a23)), ad.sub(t, Tensor(a23))))),
        "mul": ((2, 3), lambda t: ad.sum_values(ad.mul(t, Tensor(a23)))),
        "scale": ((2, 3), lambda t: ad.sum_values(ad.scale(t, 1.7))),
        "matmul": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.matmul(t, Tensor(a34)), ad.matmul(t, Tensor(a34))))),
        "linear": ((2, 3), lambda t: ad.sum_values(ad.relu(ad.linear(t, Tensor(a34), bias4)))),
        "concat": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.concat([t, Tensor(a23)], axis=0), ad.concat([t, Tensor(a23)], axis=0)))),
        "slice_axis": ((4, 3), lambda t: ad.sum_values(ad.mul(ad.slice_axis(t, 1, 3, axis=0), ad.slice_axis(t, 1, 3, axis=0)))),
        "take_rows": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.take_rows(t, cols), ad.take_rows(t, cols)))),
        "embedding": ((4, 3), lambda t: ad.sum_values(ad.mul(ad.embedding(t, ids), ad.embedding(t, ids)))),
        "reshape": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.reshape(t, (3, 2)), ad.reshape(t, (3, 2))))),
        "transpose": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.transpose(t, (1, 0)), ad.transpose(t, (1, 0))))),
        "softmax": ((2, 5), lambda t: ad.sum_values(ad.mul(ad.softmax(t, axis=-1), weights))),
        "log_softmax": ((2, 5), lambda t: ad.sum_values(ad.mul(ad.log_softmax(t, axis=-1), weights))),
        "masked_softmax": ((2, 5), lambda t: ad.sum_values(ad.mul(ad.masked_softmax(t, mask), weights))),
        "relu": ((2, 3), lambda t: ad.sum_values(ad.relu(t))),
        "layer_norm": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.layer_norm(t, gain, bias), weights.data[:, :3]))),
        "dropout": ((2, 3), lambda t: ad.sum_values(ad.dropout(t, 0.4, np.random.default_rng(drop_seed)))),
        "mean_values": ((2, 3), lambda t: ad.mean_values(ad.mul(t, t))),
        "sum_axis": ((2, 3), lambda t: ad.sum_values(ad.mul(ad.sum_values(t, axis=0), ad.sum_values(t, axis=0)))),
    }


@pytest.mark.parametrize("name", sorted(_gradcheck_cases(np.random.default_rng(0)).keys()))
def test_primitive_gradients_match_central_differences(name):
    # 50 randomized trials per primitive at 64-bit precision
    for trial in range(50):
        rng = np.random.default_rng(1000 * trial + 17)
        shape, fn = _gradcheck_cases(rng)[name]
        point = Tensor(rng.normal(size=shape), requires_grad=True)
        err = finite_difference_check(fn, point, step=1e-6)
        assert err < 1e-4, f"{name} trial {trial}: relative error {err}"


def test_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(4, 6)) * 50)
    for out in (
        ad.softmax(x),
        ad.log_softmax(x),
        ad.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))),
        ad.relu(x),
        ad.masked_softmax(x, np.ones((4, 6), dtype=bool)),
    ):
        assert np.isfinite(out.data).all()
