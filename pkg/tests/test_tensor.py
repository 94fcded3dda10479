import numpy as np
import pytest

from trajvid import rtd
from trajvid import tensor as tv
from trajvid.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    stop_gradient,
)


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    x = x.copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def analytic_grad(f, x64):
    x = Tensor(x64, requires_grad=True, dtype=np.float64)
    with Tape():
        loss = f(x)
    backward(loss)
    return x.grad


class TestElementwise:
    def test_add(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        assert np.array_equal(out.data, np.float32([4.0, 6.0]))

    def test_mul_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = x * Tensor(np.ones((3, 4)))
        assert np.array_equal(out.data, x.data)

    def test_broadcast_violation(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))

    def test_b_cannot_grow_a(self):
        # result shape must equal a's shape
        with pytest.raises(ShapeError):
            Tensor(np.zeros(3)) + Tensor(np.zeros((2, 3)))

    @pytest.mark.parametrize("seed", range(8))
    def test_broadcast_matches_scalar_loops(self, seed):
        rng = np.random.default_rng(seed)
        rank = rng.integers(1, 6)
        a_shape = tuple(int(s) for s in rng.integers(1, 4, size=rank))
        # b: random trailing suffix with some axes collapsed to 1
        k = rng.integers(1, rank + 1)
        b_shape = tuple(
            1 if rng.random() < 0.4 else a_shape[len(a_shape) - k + i]
            for i in range(k)
        )
        a = rng.normal(size=a_shape)
        b = rng.normal(size=b_shape)
        got_add = (Tensor(a, dtype=np.float64) + Tensor(b, dtype=np.float64)).data
        got_mul = (Tensor(a, dtype=np.float64) * Tensor(b, dtype=np.float64)).data

        want_add = np.empty(a_shape)
        want_mul = np.empty(a_shape)
        pad = rank - k
        for idx in np.ndindex(a_shape):
            bidx = tuple(
                0 if b_shape[i] == 1 else idx[pad + i] for i in range(k)
            )
            want_add[idx] = a[idx] + b[bidx]
            want_mul[idx] = a[idx] * b[bidx]
        assert np.allclose(got_add, want_add, atol=0)
        assert np.allclose(got_mul, want_mul, atol=0)


class TestMatmul:
    def test_identity(self):
        v = np.random.default_rng(1).normal(size=(3, 2))
        out = tv.matmul(Tensor(np.eye(3)), Tensor(v))
        assert np.allclose(out.data, v, atol=1e-6)

    def test_small_product(self):
        out = tv.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert np.array_equal(out.data, np.float32([[3.0], [7.0]]))

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            tv.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_grad_of_sum_matches_fd(self):
        # d sum(A@B) / dA == ones @ B^T, checked against central differences
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 4))
        b64 = rng.normal(size=(4, 2))
        b = Tensor(b64, dtype=np.float64)

        ga = analytic_grad(lambda t: tv.matmul(t, b).sum(), a)
        closed = np.ones((3, 2)) @ b64.T
        assert np.allclose(ga, closed, atol=1e-12)
        gfd = fd_grad(lambda arr: float((arr @ b64).sum()), a, h=1e-3)
        assert rel_err(ga, gfd) < 1e-4


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            loss = (x * x).sum()
        backward(loss)
        assert np.allclose(x.grad, [2.0, 4.0, 6.0])

    def test_stop_gradient_product(self):
        x = Tensor([1.5, -2.0, 0.5], requires_grad=True)
        with Tape():
            loss = (stop_gradient(x) * x).sum()
        backward(loss)
        assert np.array_equal(x.grad, x.data)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = x * x
        with pytest.raises(ShapeError):
            backward(y)

    def test_detached_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * x).sum()  # no tape open
        with pytest.raises(TapeError):
            backward(y)

    def test_tape_consumed(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = (x * x).sum()
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)

    def test_accumulation_is_sum_into(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = (x + x).sum()
        backward(loss)
        assert np.allclose(x.grad, [2.0, 2.0])
        with Tape():
            loss = x.sum()
        backward(loss)
        # second backward adds into the existing grad
        assert np.allclose(x.grad, [3.0, 3.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_two_layer_composition_fd(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(4, 3))
        w1 = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
        w2 = Tensor(rng.normal(size=(5, 2)), dtype=np.float64)

        def net(x):
            h = tv.sigmoid(tv.matmul(x, w1))
            return (tv.matmul(h, w2) ** 2).sum()

        ga = analytic_grad(net, x0)

        def f(arr):
            h = 1.0 / (1.0 + np.exp(-(arr @ w1.data)))
            return float(((h @ w2.data) ** 2).sum())

        gfd = fd_grad(f, x0, h=1e-6)
        assert rel_err(ga, gfd) < 1e-4

    def test_replay_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(6, 6)))
            with Tape():
                y = tv.softmax(tv.matmul(x, w), axis=-1)
                loss = (y * y).sum()
            backward(loss)
            return x.grad.tobytes()

        assert run() == run()


class TestStopGradient:
    def test_value_identity(self):
        x = Tensor(np.random.default_rng(3).normal(size=(2, 5)))
        assert np.array_equal(stop_gradient(x).data, x.data)

    def test_grad_blocked(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape():
            loss = stop_gradient(x).sum() + (x * 0.0).sum()
        backward(loss)
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_x_minus_sg_x(self):
        x = Tensor([0.3, -1.2, 4.0], requires_grad=True)
        with Tape():
            loss = (x - stop_gradient(x)).sum()
        backward(loss)
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


class TestSoftmax:
    def test_symmetry(self):
        out = tv.softmax(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_overflow_stabilized(self):
        out = tv.softmax(Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(4).normal(size=(3, 7)) * 5)
        out = tv.softmax(x, axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out.data > 0)


def _op_cases():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 3, 4))
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    m1 = rng.normal(size=(3, 4))
    m2 = rng.normal(size=(4, 2))
    img = rng.normal(size=(2, 3, 4, 4))
    ker = rng.normal(size=(2, 3, 3, 3)) * 0.5
    return {
        "add": ([a, b], lambda x, y: x + y),
        "sub": ([a, b], lambda x, y: x - y),
        "mul": ([a, b], lambda x, y: x * y),
        "div": ([a, pos[None] + 1.0], lambda x, y: x / y),
        "neg": ([a], lambda x: -x),
        "pow": ([pos], lambda x: x ** 1.7),
        "exp": ([a], tv.exp),
        "log": ([pos], tv.log),
        "sqrt": ([pos], tv.sqrt),
        "sigmoid": ([a], tv.sigmoid),
        "silu": ([a], tv.silu),
        "normalize": ([a], lambda x: tv.normalize(x, axis=(1, 2))),
        "matmul": ([m1, m2], tv.matmul),
        "reshape": ([a], lambda x: tv.reshape(x, 6, 4)),
        "transpose": ([a], lambda x: tv.transpose(x, 2, 0, 1)),
        "sum": ([a], lambda x: tv.tsum(x, axis=(0, 2))),
        "mean": ([a], lambda x: tv.tmean(x, axis=1, keepdims=True)),
        "softmax": ([m1], lambda x: tv.softmax(x, axis=-1)),
        "concat": ([m1, m1 * 2.0], lambda x, y: tv.concat([x, y], axis=1)),
        "slice": ([a], lambda x: x[:, 1:3, ::2]),
        "conv2d": ([img, ker], lambda x, w: tv.conv2d(x, w)),
        "upsample2x": ([img], tv.upsample2x),
    }


@pytest.mark.parametrize("name", tv.OP_NAMES)
@pytest.mark.parametrize("seed", range(20))
def test_registered_op_gradients_match_fd(name, seed):
    inputs, fn = _op_cases()[name]
    rng = np.random.default_rng(seed)
    # fresh random values with the reference case's shapes/sign structure
    inputs = [
        np.abs(rng.normal(size=x.shape)) + 0.5 if np.all(x > 0) else rng.normal(size=x.shape)
        for x in inputs
    ]
    weights = None

    def loss_fn(*tensors):
        nonlocal weights
        out = fn(*tensors)
        if weights is None:
            weights = rng.normal(size=out.shape)
        return (out * Tensor(weights, dtype=np.float64)).sum()

    for k in range(len(inputs)):
        ts = [Tensor(x, requires_grad=(i == k), dtype=np.float64) for i, x in enumerate(inputs)]
        with Tape():
            loss = loss_fn(*ts)
        backward(loss)
        ga = ts[k].grad

        def f(arr):
            vals = [arr if i == k else x for i, x in enumerate(inputs)]
            out = fn(*[Tensor(v, dtype=np.float64) for v in vals])
            return float((out.data * weights).sum())

        gfd = fd_grad(f, inputs[k], h=1e-6)
        assert rel_err(ga, gfd) < 1e-4, f"{name} input {k}"


class TestInvariantsAndGuards:
    def test_nan_guard_raises(self):
        with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
            tv.log(Tensor([0.0]))

    def test_nan_guard_off(self):
        tv.set_nan_check(False)
        with np.errstate(divide="ignore"):
            out = tv.log(Tensor([0.0]))
        assert np.isneginf(out.data[0])
        tv.set_nan_check(True)

    def test_grad_shape_matches(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape():
            loss = (x * 2.0).sum()
        backward(loss)
        assert x.grad.shape == x.shape

    def test_float32_default(self):
        assert Tensor([1.0]).data.dtype == np.float32


class TestRTD1:
    def test_round_trip(self):
        arr = np.random.default_rng(5).normal(size=(2, 3, 4)).astype(np.float32)
        assert np.array_equal(rtd.load_bytes(rtd.dump_bytes(arr)), arr)

    def test_golden_bytes(self):
        arr = np.array([[1.0, 2.0]], dtype=np.float32)
        blob = rtd.dump_bytes(arr)
        assert blob == (
            b"RTDUMP01"
            + b"\x02\x00\x00\x00"
            + b"\x01\x00\x00\x00\x02\x00\x00\x00"
            + b"\x00\x00\x80\x3f\x00\x00\x00\x40"
        )

    def test_bad_magic(self):
        with pytest.raises(rtd.RTDError):
            rtd.load_bytes(b"NOTADUMP" + b"\x00" * 8)

    def test_truncated_payload(self):
        blob = rtd.dump_bytes(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(rtd.RTDError):
            rtd.load_bytes(blob[:-3])

    def test_file_round_trip(self, tmp_path):
        arr = np.float32([[1.5, -2.5], [3.0, 0.0]])
        p = tmp_path / "t.rtd"
        rtd.write(p, arr)
        assert np.array_equal(rtd.read(p), arr)
