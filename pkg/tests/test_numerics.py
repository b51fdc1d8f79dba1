import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diaforge.numerics import (Cache, FunctionOp, MemoryMeter, NumericsError, Rng, as_tensor, finite_difference_grad,
                               load_tensor, max_rel_error, sample_gaussian, save_tensor, tensor_from_bytes,
                               tensor_to_bytes, vjp_selftest)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_fd_of_sum_is_ones(rng):
    x = rng.normal((3, 4))
    assert np.allclose(finite_difference_grad(np.sum, x), 1.0, atol=1e-9)


def test_fd_of_square_at_three():
    g = finite_difference_grad(lambda v: float(v[0] * v[0]), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-6


def test_fd_names_index_on_nonfinite():
    def f(v):
        return np.inf if v[2] > 1.0 else float(np.sum(v))

    with pytest.raises(NumericsError, match="index 2"):
        finite_difference_grad(f, np.array([0.0, 0.0, 1.0]))


def test_fd_rejects_bad_step():
    with pytest.raises(NumericsError):
        finite_difference_grad(np.sum, np.zeros(2), h=0.0)


def test_vjp_selftest_identity_is_exact(rng):
    op = FunctionOp(lambda x: x, lambda x, g: g)
    assert vjp_selftest(op, rng.normal((5,)), rng) < 1e-10


def test_vjp_selftest_scaling(rng):
    op = FunctionOp(lambda x: 0.5 * x, lambda x, g: 0.5 * g)
    assert vjp_selftest(op, rng.normal((4, 2)), rng) < 1e-8


def test_vjp_selftest_catches_wrong_vjp(rng):
    op = FunctionOp(lambda x: 0.5 * x, lambda x, g: 2.0 * g)
    assert vjp_selftest(op, rng.normal((3,)), rng) > 1.0


def test_vjp_selftest_cotangent_shape_error(rng):
    op = FunctionOp(lambda x: x, lambda x, g: g)
    with pytest.raises(NumericsError, match="cotangent shape"):
        vjp_selftest(op, np.zeros(3), rng, cotangent=np.zeros(4))


def test_gaussian_determinism():
    a = sample_gaussian(Rng(7), (16,))
    b = sample_gaussian(Rng(7), (16,))
    assert a.tobytes() == b.tobytes()


def test_gaussian_moments():
    z = sample_gaussian(Rng(7), (100_000,))
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05


def test_gaussian_zero_extent():
    with pytest.raises(NumericsError):
        sample_gaussian(Rng(0), (0,))


def test_split_streams_are_independent_of_order():
    root = Rng(11)
    a = root.split("img", 3).normal(4)
    root.split("other").normal(100)
    b = Rng(11).split("img", 3).normal(4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, root.split("img", 4).normal(4))


def test_as_tensor_rejects_nan_and_empty():
    with pytest.raises(NumericsError, match="flat index 1"):
        as_tensor([0.0, np.nan])
    with pytest.raises(NumericsError):
        as_tensor(np.zeros((2, 0)))


def test_dft1_layout():
    buf = tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"DFT1"
    assert buf[4:8] == (2).to_bytes(4, "little")
    assert buf[8:16] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 16 + 24
    assert np.frombuffer(buf[16:], "<f8").tolist() == [1.0, 2.0, 3.0]


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_dft1_round_trip(x):
    y = tensor_from_bytes(tensor_to_bytes(x))
    assert y.shape == x.shape and y.tobytes() == x.tobytes()


def test_dft1_file_and_errors(tmp_path):
    x = np.arange(6.0).reshape(2, 3)
    save_tensor(tmp_path / "x.dft1", x)
    assert np.array_equal(load_tensor(tmp_path / "x.dft1"), x)
    with pytest.raises(NumericsError, match="magic"):
        tensor_from_bytes(b"XXXX" + bytes(8))
    with pytest.raises(NumericsError, match="payload"):
        tensor_from_bytes(tensor_to_bytes(x)[:-1])


@settings(max_examples=25)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_vjp_linear_in_cotangent(a, b):
    r = Rng(5)
    M = r.normal((3, 4))
    op = FunctionOp(lambda x: np.tanh(M @ x), lambda x, g: M.T @ ((1 - np.tanh(M @ x) ** 2) * g))
    x, g, h = r.normal(4), r.normal(3), r.normal(3)
    lhs = op.vjp(x, a * g + b * h)
    rhs = a * op.vjp(x, g) + b * op.vjp(x, h)
    assert np.allclose(lhs, rhs, atol=1e-9, rtol=0)


def test_max_rel_error_scales_by_reference():
    assert max_rel_error(np.array([1.1, 2.0]), np.array([1.0, 2.0])) == pytest.approx(0.05)


def test_memory_meter_tracks_peak_and_stored():
    m = MemoryMeter()
    c = Cache([np.zeros(3)], [Cache([np.zeros(5)])])
    m.acquire(c.all_arrays())
    m.release(c.all_arrays())
    m.acquire([np.zeros(2)])
    m.store(np.zeros(7))
    assert (m.peak_tensors, m.peak_scalars, m.live_scalars) == (2, 8, 2)
    assert (m.stored_tensors, m.stored_scalars) == (1, 7)
    with pytest.raises(NumericsError):
        m.release([np.zeros(9)])
