import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from canreid import tensor as T
from canreid.blob import BlobError, decode_blob, encode_blob, read_blob, roundtrip, write_blob
from canreid.gradcheck import numerical_grad, relative_error
from canreid.optim import AdamState, adam_step


def grad_of(fn, *arrays):
    leaves = [T.Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    return [leaf.grad for leaf in leaves]


def test_concat_examples():
    out = T.concat([T.tensor([1.0, 2.0]), T.tensor([3.0])], axis=0)
    np.testing.assert_array_equal(out.data, [1, 2, 3])
    x = np.arange(6.0).reshape(2, 3)
    same = T.concat([T.tensor(x), T.tensor(np.zeros((2, 0)))], axis=1)
    np.testing.assert_array_equal(same.data, x)


def test_concat_gradient_is_ones():
    a, b = np.random.default_rng(0).standard_normal((2, 3, 2))
    ga, gb = grad_of(lambda a, b: T.sum(T.concat([a, b], axis=1)), a, b)
    np.testing.assert_array_equal(ga, np.ones_like(a))
    np.testing.assert_array_equal(gb, np.ones_like(b))


def test_concat_shape_mismatch():
    with pytest.raises(ValueError):
        T.concat([T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 3)))], axis=1)


def test_slice_examples():
    np.testing.assert_array_equal(T.slice(T.tensor([10.0, 20.0, 30.0]), 0, 1, 2).data, [20, 30])
    x = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_array_equal(T.slice(T.tensor(x), 1, 0, 4).data, x)
    with pytest.raises(ValueError):
        T.slice(T.tensor(x), 1, 3, 2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6)),
       st.integers(1, 9))
def test_slice_concat_roundtrip_exact(x, n):
    n = min(n, x.shape[1])
    edges = np.linspace(0, x.shape[1], n + 1).astype(int)
    parts = [T.slice(T.tensor(x), 1, s, e - s) for s, e in zip(edges, edges[1:])]
    assert np.array_equal(T.concat(parts, axis=1).data, x)


def test_matmul_examples():
    out = T.matmul(T.tensor([[1.0, 2.0], [3.0, 4.0]]), T.tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])
    x = np.random.default_rng(2).standard_normal((3, 4))
    np.testing.assert_array_equal(T.matmul(T.tensor(np.eye(3)), T.tensor(x)).data, x)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    (gA,) = grad_of(lambda a: T.sum(T.matmul(a, T.tensor(B))), A)
    num = numerical_grad(lambda: float((A @ B).sum()), A)
    assert relative_error(gA, num) < 1e-6


def test_reduce_examples():
    assert T.reduce(T.tensor([3.0]), 0, "max").item() == 3.0
    assert T.reduce(T.tensor([1.0, 5.0, 3.0]), 0, "max").item() == 5.0
    assert T.reduce(T.tensor([1.0, 5.0, 3.0]), 0, "mean").item() == 3.0
    (g,) = grad_of(lambda x: T.reduce(x, 0, "max"), [1.0, 5.0, 3.0])
    np.testing.assert_array_equal(g, [0, 1, 0])


def test_reduce_max_tie_goes_to_lowest_index():
    (g,) = grad_of(lambda x: T.reduce(x, 0, "max"), [2.0, 7.0, 7.0])
    np.testing.assert_array_equal(g, [0, 1, 0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-10, 10)))
def test_reduce_backward_structure(x):
    (gmax,) = grad_of(lambda t: T.sum(T.reduce(t, 1, "max")), x)
    (gmean,) = grad_of(lambda t: T.sum(T.reduce(t, 1, "mean")), x)
    np.testing.assert_array_equal(gmax.sum(axis=1), np.ones(x.shape[0]))
    assert set(np.unique(gmax)) <= {0.0, 1.0}
    np.testing.assert_allclose(gmean.sum(axis=1), 1.0, rtol=1e-12)


def test_backward_square():
    x = np.array([1.0, -2.0, 3.0])
    (g,) = grad_of(lambda t: T.sum(t * t), x)
    np.testing.assert_array_equal(g, 2 * x)


def test_constant_loss_leaves_grads_zero():
    p = T.Parameter(np.ones(3), name="p")
    with T.Tape() as tape:
        loss = T.sum(T.tensor(np.arange(3.0)))
    tape.backward(loss)
    np.testing.assert_array_equal(p.grad, 0)
    assert len(tape) == 0


def test_grads_accumulate_until_zeroed():
    p = T.Parameter(np.array([1.0, 2.0]), name="p")
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.sum(p * 3.0)
        tape.backward(loss)
    np.testing.assert_array_equal(p.grad, [6, 6])
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, [0, 0])


def test_tape_cannot_run_backward_twice():
    p = T.Parameter(np.array([1.0]), name="p")
    with T.Tape() as tape:
        loss = T.sum(p * p)
    tape.backward(loss)
    with pytest.raises(T.TapeError):
        tape.backward(loss)
    with pytest.raises(T.TapeError):
        with tape:
            pass


def test_backward_needs_scalar():
    p = T.Parameter(np.ones(2), name="p")
    with T.Tape() as tape:
        out = p * 2.0
    with pytest.raises(ValueError):
        tape.backward(out)


def test_no_recording_outside_tape():
    p = T.Parameter(np.ones(2), name="p")
    assert T.active_tape() is None
    T.sum(p * p)
    np.testing.assert_array_equal(p.grad, 0)


def test_adam_zero_gradient_is_fixed_point():
    p = T.Parameter(np.array([1.5, -2.0]), name="p")
    state = AdamState()
    for _ in range(3):
        adam_step([p], state, 0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_first_step():
    p = T.Parameter(np.array([1.0]), name="p")
    p.grad = np.array([1.0])
    state = AdamState()
    adam_step([p], state, 0.1)
    assert state.t == 1
    np.testing.assert_allclose(p.data, [1.0 - 0.1 / (1 + 1e-8)], rtol=0, atol=1e-15)
    assert abs(p.data[0] - 0.9) < 1e-8


def test_adam_second_step_bounded():
    p = T.Parameter(np.array([1.0]), name="p")
    state = AdamState()
    p.grad = np.array([1.0])
    adam_step([p], state, 0.1)
    before = p.data.copy()
    adam_step([p], state, 0.1)
    assert state.t == 2
    assert abs(before[0] - p.data[0]) <= 0.1 + 1e-8


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        adam_step([T.Parameter(np.ones(1), name="p")], AdamState(), 0.0)


def test_ops_deterministic():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 5))
    a = T.log_softmax(T.matmul(T.tensor(x), T.tensor(x.T))).data
    b = T.log_softmax(T.matmul(T.tensor(x), T.tensor(x.T))).data
    assert np.array_equal(a, b)


def test_blob_layout():
    buf = encode_blob(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert buf[:4] == b"CANT"
    assert buf[4:7] == bytes([1, 1, 2])
    assert buf[7:15] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 15 + 12
    assert np.frombuffer(buf[15:], dtype="<f4").tolist() == [1, 2, 3]


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_blob_roundtrip_bit_exact(tmp_path, dtype):
    x = np.random.default_rng(5).standard_normal((3, 4, 5)).astype(dtype)
    write_blob(tmp_path / "x.cant", x)
    y = read_blob(tmp_path / "x.cant")
    assert y.dtype == dtype and y.tobytes() == x.tobytes()
    assert roundtrip(np.float64(2.5)).shape == ()


def test_blob_errors():
    good = encode_blob(np.zeros(3))
    with pytest.raises(BlobError):
        decode_blob(b"NOPE" + good[4:])
    with pytest.raises(BlobError):
        decode_blob(good[:4] + bytes([9]) + good[5:])
    with pytest.raises(BlobError):
        decode_blob(good[:-1])
    with pytest.raises(BlobError):
        decode_blob(io.BytesIO(good[:5]).getvalue())
