import io
import math

import numpy as np
import pytest

from vowelflow.numerics import (
    LuFactors,
    Rng,
    ShapeError,
    SingularMatrixError,
    conv2d,
    conv2d_backward,
    lu_decompose,
    mat_inverse,
    matmul,
    randn,
    read_tensor,
    read_tensor_from,
    write_tensor,
    write_tensor_to,
)


# ---------------------------------------------------------------------------
# oracles


def matmul_oracle(a, b):
    """Naive triple loop, independent of numpy's matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def det_cofactor(a):
    """Cofactor (Laplace) expansion along the first row."""
    n = a.shape[0]
    if n == 1:
        return a[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * a[0, j] * det_cofactor(minor)
    return total


def conv2d_oracle(x, kernel, bias):
    """Direct six-loop "same"-padded cross-correlation."""
    o, c, kh, kw = kernel.shape
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((o, h, w))
    for oc in range(o):
        for r in range(h):
            for s in range(w):
                acc = bias[oc]
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            rr, ss = r + u - ph, s + v - pw
                            if 0 <= rr < h and 0 <= ss < w:
                                acc += kernel[oc, ic, u, v] * x[ic, rr, ss]
                out[oc, r, s] = acc
    return out


# ---------------------------------------------------------------------------
# matmul


class TestMatmul:
    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_case(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b), [[2.0], [4.0]])

    def test_against_triple_loop(self):
        rng = Rng(7)
        a = randn(rng, (5, 7))
        b = randn(rng, (7, 3))
        np.testing.assert_allclose(matmul(a, b), matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# LU / inverse


class TestLu:
    def test_diagonal_logdet(self):
        lu = lu_decompose(np.diag([2.0, 3.0]))
        assert lu.log_abs_det == pytest.approx(math.log(6.0), abs=1e-14)

    def test_identity_logdet(self):
        assert lu_decompose(np.eye(5)).log_abs_det == pytest.approx(0.0, abs=1e-14)

    def test_det_matches_cofactor_expansion(self):
        rng = Rng(12)
        a = randn(rng, (3, 3))
        lu = lu_decompose(a)
        det = lu.sign * float(np.prod(np.diag(lu.upper)))
        assert det == pytest.approx(det_cofactor(a), rel=1e-10)
        assert math.exp(lu.log_abs_det) == pytest.approx(abs(det_cofactor(a)), rel=1e-10)

    def test_round_trip_property(self):
        rng = Rng(3)
        for n in (1, 2, 5, 9):
            a = randn(rng, (n, n)) + np.eye(n)
            lu = lu_decompose(a)
            norm = np.max(np.abs(a))
            resid = np.max(np.abs(a[lu.perm] - lu.lower @ lu.upper))
            assert resid <= 1e-10 * norm
            assert np.allclose(np.tril(lu.lower, -1) + np.eye(n), lu.lower)
            assert np.allclose(np.triu(lu.upper), lu.upper)

    def test_solve(self):
        rng = Rng(4)
        a = randn(rng, (6, 6)) + 3 * np.eye(6)
        b = randn(rng, (6,))
        x = lu_decompose(a).solve(b)
        np.testing.assert_allclose(a @ x, b, atol=1e-10)

    def test_singular_raises(self):
        with pytest.raises(SingularMatrixError):
            lu_decompose(np.array([[1.0, 2.0], [2.0, 4.0]]))

    def test_non_square_raises(self):
        with pytest.raises(ShapeError):
            lu_decompose(np.zeros((2, 3)))


class TestInverse:
    def test_identity(self):
        np.testing.assert_allclose(mat_inverse(np.eye(4)), np.eye(4), atol=1e-14)

    def test_diagonal(self):
        np.testing.assert_allclose(
            mat_inverse(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]), atol=1e-14
        )

    def test_residual(self):
        rng = Rng(9)
        a = randn(rng, (4, 4)) + 2 * np.eye(4)
        resid = np.max(np.abs(a @ mat_inverse(a) - np.eye(4)))
        assert resid <= 1e-8


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_identity_kernel(self):
        rng = Rng(21)
        x = randn(rng, (1, 5, 5))
        k = np.ones((1, 1, 1, 1))
        np.testing.assert_allclose(conv2d(x, k, np.zeros(1)), x, atol=1e-15)

    def test_bias_only(self):
        x = np.zeros((2, 4, 4))
        k = np.zeros((3, 2, 3, 3))
        y = conv2d(x, k, np.array([1.0, -2.0, 0.5]))
        for oc, c in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_array_equal(y[oc], np.full((4, 4), c))

    def test_against_direct_oracle(self):
        rng = Rng(22)
        x = randn(rng, (2, 4, 4))
        k = randn(rng, (3, 2, 3, 3))
        b = randn(rng, (3,))
        np.testing.assert_allclose(conv2d(x, k, b), conv2d_oracle(x, k, b), atol=1e-12)

    def test_batched_matches_per_image(self):
        rng = Rng(23)
        x = randn(rng, (4, 2, 5, 5))
        k = randn(rng, (3, 2, 3, 3))
        b = randn(rng, (3,))
        y = conv2d(x, k, b)
        for i in range(4):
            np.testing.assert_allclose(y[i], conv2d(x[i], k, b), atol=1e-13)

    def test_linear_in_input(self):
        rng = Rng(24)
        x1 = randn(rng, (2, 6, 6))
        x2 = randn(rng, (2, 6, 6))
        k = randn(rng, (2, 2, 3, 3))
        zero = np.zeros(2)
        lhs = conv2d(1.7 * x1 + x2, k, zero)
        rhs = 1.7 * conv2d(x1, k, zero) + conv2d(x2, k, zero)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(np.zeros((3, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(1))


class TestConv2dBackward:
    def test_zero_cotangent(self):
        rng = Rng(31)
        x = randn(rng, (2, 4, 4))
        k = randn(rng, (3, 2, 3, 3))
        gx, gk, gb = conv2d_backward(np.zeros((3, 4, 4)), x, k)
        assert not gx.any() and not gk.any() and not gb.any()

    def test_identity_kernel_passthrough(self):
        rng = Rng(32)
        g = randn(rng, (1, 4, 4))
        x = randn(rng, (1, 4, 4))
        gx, _, _ = conv2d_backward(g, x, np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(gx, g, atol=1e-15)

    def test_finite_differences(self):
        rng = Rng(33)
        x = randn(rng, (2, 4, 4))
        k = randn(rng, (3, 2, 3, 3))
        b = randn(rng, (3,))
        # scalar objective: weighted sum of outputs with fixed weights
        w = randn(rng, (3, 4, 4))

        def objective(xv, kv, bv):
            return float(np.sum(w * conv2d(xv, kv, bv)))

        gx, gk, gb = conv2d_backward(w, x, k)
        h = 1e-5
        for arr, grad in ((x, gx), (k, gk), (b, gb)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in range(0, flat.size, max(1, flat.size // 17)):
                orig = flat[idx]
                flat[idx] = orig + h
                up = objective(x, k, b)
                flat[idx] = orig - h
                down = objective(x, k, b)
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), abs(gflat[idx]), 1e-3)
                assert abs(fd - gflat[idx]) / denom < 1e-6


# ---------------------------------------------------------------------------
# rng


class TestRng:
    def test_determinism(self):
        a = randn(Rng(77), (4, 4))
        b = randn(Rng(77), (4, 4))
        np.testing.assert_array_equal(a, b)

    def test_seed_independence(self):
        a = randn(Rng(1), (16,))
        b = randn(Rng(2), (16,))
        assert not np.array_equal(a, b)

    def test_moments(self):
        x = randn(Rng(5), (100_000,))
        assert abs(x.mean()) < 0.02
        assert abs(x.var() - 1.0) < 0.02

    def test_spawn_streams_differ_and_are_stable(self):
        root = Rng(9)
        a1 = randn(root.spawn(0), (8,))
        a2 = randn(root.spawn(0), (8,))
        b = randn(root.spawn(1), (8,))
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_spawn_unaffected_by_consumption(self):
        r1 = Rng(11)
        randn(r1, (100,))
        r2 = Rng(11)
        np.testing.assert_array_equal(
            randn(r1.spawn(3), (5,)), randn(r2.spawn(3), (5,))
        )

    def test_state_round_trip(self):
        rng = Rng(13)
        randn(rng, (7,))
        snap = rng.state
        ahead = randn(rng, (9,))
        rng2 = Rng(0)
        rng2.state = snap
        np.testing.assert_array_equal(randn(rng2, (9,)), ahead)


# ---------------------------------------------------------------------------
# FSTN format


class TestTensorFormat:
    def test_round_trip(self, tmp_path):
        rng = Rng(40)
        arr = randn(rng, (3, 5, 2))
        path = tmp_path / "t.fstn"
        write_tensor(path, arr)
        back = read_tensor(path)
        np.testing.assert_array_equal(back, arr)
        assert back.dtype == np.float64

    def test_stream_concatenation_and_offsets(self):
        rng = Rng(41)
        tensors = [randn(rng, (2, 2)), randn(rng, (4,)), randn(rng, (1, 3, 3))]
        buf = io.BytesIO()
        offsets = []
        for t in tensors:
            offsets.append(buf.tell())
            write_tensor_to(buf, t)
        for off, t in zip(offsets, tensors):
            buf.seek(off)
            np.testing.assert_array_equal(read_tensor_from(buf), t)

    def test_header_layout(self):
        buf = io.BytesIO()
        write_tensor_to(buf, np.zeros((2, 3)))
        raw = buf.getvalue()
        assert raw[:4] == b"FSTN"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 2  # rank
        assert int.from_bytes(raw[12:16], "little") == 2
        assert int.from_bytes(raw[16:20], "little") == 3
        assert len(raw) == 20 + 6 * 8

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            read_tensor_from(io.BytesIO(b"XXXX" + b"\0" * 16))

    def test_all_values_finite_after_ops(self):
        rng = Rng(50)
        a = randn(rng, (6, 6)) + 2 * np.eye(6)
        for out in (matmul(a, a), mat_inverse(a), conv2d(randn(rng, (1, 4, 4)),
                    randn(rng, (2, 1, 3, 3)), randn(rng, (2,)))):
            assert np.all(np.isfinite(out))
