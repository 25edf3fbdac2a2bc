import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference
from timesqueeze import tensor as tn
from timesqueeze.tensor import ParamStore, ShapeError, Tape, Tensor, grad_check


def check_primitive(op, *arrays, tol=1e-6, seed=0):
    """Compare tape gradients of ``sum(op(*xs) * R)`` with central differences."""
    rng = np.random.default_rng(seed)
    xs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*xs)
        R = rng.normal(size=out.shape)
        loss = tn.sum(out * R)
    grads = tape.gradients(loss)
    for k, x in enumerate(xs):
        def f(v, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = Tensor(v)
            return float(np.sum(op(*args).data * R))

        numeric = central_difference(f, arrays[k])
        analytic = grads.get(id(x), np.zeros_like(arrays[k]))
        err = np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))
        assert err < tol, f"input {k}: relative error {err:.2e}"


@pytest.mark.parametrize("seed", [0, 1, 2])
class TestPrimitiveGradients:
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        check_primitive(tn.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), seed=seed)
        check_primitive(tn.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)), seed=seed)

    def test_add_mul_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_primitive(tn.add, a, b, seed=seed)
        check_primitive(tn.mul, a, b, seed=seed)
        check_primitive(tn.sub, a, rng.normal(size=(3, 1)), seed=seed)

    def test_div(self, seed):
        rng = np.random.default_rng(seed)
        check_primitive(tn.div, rng.normal(size=(3, 4)), rng.uniform(1, 2, size=(3, 1)), seed=seed)

    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        check_primitive(lambda x: tn.softmax(x, axis=-1), rng.normal(size=(3, 5)), seed=seed)
        mask = np.tril(np.ones((4, 4), dtype=bool))
        check_primitive(lambda x: tn.softmax(x, mask=mask), rng.normal(size=(2, 4, 4)), seed=seed)

    def test_rmsnorm(self, seed):
        rng = np.random.default_rng(seed)
        check_primitive(tn.rmsnorm, rng.normal(size=(2, 3, 6)), rng.normal(size=(6,)), seed=seed)

    def test_activations(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 5)) * 3
        check_primitive(tn.silu, x, seed=seed)
        check_primitive(tn.sigmoid, x, seed=seed)

    def test_shape_ops(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        check_primitive(lambda x, y: tn.concat([x, y], axis=1), a, b, seed=seed)
        check_primitive(lambda x: x[:, 1:3], rng.normal(size=(3, 4)), seed=seed)
        check_primitive(lambda x: tn.transpose(x, (1, 0, 2)), rng.normal(size=(2, 3, 4)), seed=seed)
        check_primitive(lambda x: tn.reshape(x, (6, 2)), rng.normal(size=(3, 4)), seed=seed)

    def test_gather_with_repeats(self, seed):
        rng = np.random.default_rng(seed)
        rows = np.arange(2)[:, None]
        idx = np.array([[0, 0, 2, 3, 3], [1, 1, 1, 0, 4]])
        check_primitive(lambda x: x[rows, idx], rng.normal(size=(2, 5, 3)), seed=seed)

    def test_reductions(self, seed):
        rng = np.random.default_rng(seed)
        check_primitive(lambda x: tn.sum(x, axis=(0, 1)), rng.normal(size=(2, 3, 4)), seed=seed)
        check_primitive(lambda x: tn.mean(x, axis=1, keepdims=True), rng.normal(size=(2, 3)), seed=seed)

    def test_huber(self, seed):
        rng = np.random.default_rng(seed)
        e = rng.normal(size=(20,)) * 2
        e = e[np.abs(np.abs(e) - 1.0) > 1e-3]  # keep away from the kink
        check_primitive(lambda x: tn.huber(x, 1.0), e, seed=seed)

    def test_rope(self, seed):
        rng = np.random.default_rng(seed)
        pos = np.array([0, 3, 7, 20])
        check_primitive(lambda x: tn.rope(x, pos, 100.0), rng.normal(size=(2, 4, 6)), seed=seed)

    def test_gated_scan(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.05, 0.95, size=(2, 6, 3))
        check_primitive(tn.gated_scan, a, rng.normal(size=(2, 6, 3)), seed=seed)


def test_softmax_constant_row_is_uniform():
    out = tn.softmax(Tensor(np.full((2, 5), 3.7))).data
    assert np.all(out == 0.2)


@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = tn.softmax(Tensor(x)).data.sum(axis=-1)
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_softmax_mask_zeroes_entries():
    mask = np.array([[True, False, True]])
    out = tn.softmax(Tensor(np.array([[1.0, 50.0, 2.0]])), mask=mask).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-15)


def test_rmsnorm_unit_gain_definition(rng):
    r = rng.normal(size=(4, 8))
    out = tn.rmsnorm(Tensor(r), Tensor(np.ones(8))).data
    expected = r / np.sqrt(np.mean(r * r, axis=-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(out, expected, rtol=1e-14)
    np.testing.assert_allclose(np.sqrt(np.mean(out ** 2, axis=-1)), 1.0, atol=1e-5)


@settings(max_examples=50)
@given(arrays(np.float64, (6,), elements=st.floats(0.5, 10)), st.floats(1.0, 100.0))
def test_rmsnorm_scale_invariance(row, c):
    g = Tensor(np.ones(6))
    a = tn.rmsnorm(Tensor(row), g).data
    b = tn.rmsnorm(Tensor(row * c), g).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_matmul_identity(rng):
    A = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(4)), Tensor(A)).data, A)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError, match="rope"):
        tn.rope(Tensor(np.ones((2, 3))), np.arange(2))


def test_no_recording_outside_tape():
    p = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        pass
    tn.sum(p * 2.0)
    assert tape.records == []


def test_tapes_are_thread_confined():
    import threading

    p = Tensor(np.ones(3), requires_grad=True)
    seen = {}

    def worker():
        with Tape() as t:
            tn.sum(p * p)
        seen["n"] = len(t.records)

    with Tape() as outer:
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen["n"] == 2
    assert outer.records == []


# --------------------------------------------------------------- grad_check


def test_grad_check_quadratic(rng):
    store = ParamStore()
    store.add("theta", rng.normal(size=(8,)))
    err = grad_check(lambda s: tn.sum(s["theta"] * s["theta"]), store)
    assert err < 1e-9


def test_grad_check_constant():
    store = ParamStore()
    store.add("theta", np.ones(5))
    assert grad_check(lambda s: Tensor(3.0), store) == 0.0


def test_grad_check_detects_wrong_gradient(rng):
    store = ParamStore()
    store.add("theta", rng.normal(size=(5,)))

    def broken(s):
        x = s["theta"]
        # forward cubes x but the tape only sees a square
        out = tn.sum(x * x)
        out.data = np.sum(x.data ** 3)
        return out

    assert grad_check(broken, store) > 1e-2


def test_grad_check_rejects_nonfinite():
    store = ParamStore()
    store.add("theta", np.ones(2))
    with pytest.raises(tn.NonFiniteError):
        grad_check(lambda s: tn.sum(s["theta"]) * np.inf, store)


# --------------------------------------------------------------- ParamStore


def test_param_store_roundtrip(tmp_path, rng):
    store = ParamStore()
    store.add("a.w", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=(4,)))
    store.save(tmp_path)
    loaded = ParamStore.load(tmp_path)
    assert loaded.names() == ["a.w", "b"]
    for n in store:
        np.testing.assert_array_equal(loaded[n].data, store[n].data)
        assert loaded.grad(n).shape == store[n].shape


def test_param_store_accumulates_in_place(rng):
    store = ParamStore()
    store.add("w", rng.normal(size=(3,)))
    for _ in range(2):
        with Tape() as tape:
            loss = tn.sum(store["w"] * 2.0)
        store.backward(tape, loss)
    np.testing.assert_array_equal(store.grad("w"), 4.0)
    store.zero_grad()
    assert not store.grad("w").any()
