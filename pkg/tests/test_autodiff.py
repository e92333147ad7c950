"""Tensor engine: op semantics against brute-force oracles, gradient checks."""

import numpy as np
import pytest

from pointshade import autodiff as ad

from conftest import finite_difference_check


def conv2d_reference(x, w, b, stride, padding):
    """Direct six-nested-loop convolution; the independent oracle."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (
                                    xp[ni, ci, yi * stride + ky, xi * stride + kx]
                                    * w[oi, ci, ky, kx]
                                )
                    out[ni, oi, yi, xi] = acc + b[oi]
    return out


class TestConv2d:
    def test_single_multiply(self):
        x = ad.Tensor(np.full((1, 1, 1, 1), 2.0))
        w = ad.Tensor(np.full((1, 1, 1, 1), 3.0))
        b = ad.Tensor(np.zeros(1))
        out = ad.conv2d(x, w, b)
        assert out.data.reshape(()) == pytest.approx(6.0)

    def test_identity_kernel(self, rng):
        x = ad.Tensor(rng.normal(size=(1, 1, 6, 7)).astype(np.float32))
        kern = np.zeros((1, 1, 3, 3), dtype=np.float32)
        kern[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, ad.Tensor(kern), ad.Tensor(np.zeros(1)), stride=1, padding=1)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_matches_nested_loop_reference(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(ad.Tensor(x, np.float64), ad.Tensor(w, np.float64), ad.Tensor(b, np.float64))
        ref = conv2d_reference(x, w, b, stride=1, padding=0)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (1, 2)])
    def test_reference_parametrized(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv2d(ad.Tensor(x, np.float64), ad.Tensor(w, np.float64), ad.Tensor(b, np.float64),
                        stride=stride, padding=padding)
        ref = conv2d_reference(x, w, b, stride, padding)
        assert out.shape == ref.shape
        np.testing.assert_allclose(out.data, ref, rtol=1e-10)

    def test_output_size_contract(self, rng):
        x = ad.Tensor(rng.normal(size=(1, 1, 9, 9)).astype(np.float32))
        w = ad.Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32))
        out = ad.conv2d(x, w, ad.Tensor(np.zeros(2)), stride=2, padding=1)
        assert out.shape == (1, 2, (9 + 2 - 3) // 2 + 1, 5)

    def test_channel_mismatch_raises(self, rng):
        x = ad.Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
        w = ad.Tensor(rng.normal(size=(1, 3, 3, 3)).astype(np.float32))
        with pytest.raises(ValueError, match="channel mismatch"):
            ad.conv2d(x, w, ad.Tensor(np.zeros(1)))

    def test_linear_in_input(self, rng):
        """conv(a*x + b*y) == a*conv(x) + b*conv(y) with zero bias."""
        x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        y = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        w = ad.Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32))
        zero = ad.Tensor(np.zeros(3))
        a, b = 1.7, -0.6
        lhs = ad.conv2d(ad.Tensor(a * x + b * y), w, zero, padding=1).data
        rhs = a * ad.conv2d(ad.Tensor(x), w, zero, padding=1).data \
            + b * ad.conv2d(ad.Tensor(y), w, zero, padding=1).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)


class TestUpsample2x:
    def test_single_value(self):
        out = ad.upsample2x(ad.Tensor(np.full((1, 1, 1, 1), 5.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_blocks(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = ad.upsample2x(ad.Tensor(x)).data[0, 0]
        expected = np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float32
        )
        np.testing.assert_array_equal(out, expected)

    def test_mean_downsample_inverts(self, rng):
        x = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        up = ad.upsample2x(ad.Tensor(x)).data
        down = up.reshape(2, 3, 4, 2, 5, 2).mean(axis=(3, 5))
        np.testing.assert_allclose(down, x, rtol=1e-6)


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4)).astype(np.float32)
        out = ad.linear(ad.Tensor(x), ad.Tensor(np.eye(4, dtype=np.float32)), ad.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_small_example(self):
        out = ad.linear(
            ad.Tensor(np.array([[1.0, 1.0]])),
            ad.Tensor(np.array([[2.0, 3.0]])),
            ad.Tensor(np.array([1.0])),
        )
        assert out.data.reshape(()) == pytest.approx(6.0)

    def test_matches_nested_loop(self, rng):
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=3)
        out = ad.linear(ad.Tensor(x, np.float64), ad.Tensor(w, np.float64), ad.Tensor(b, np.float64))
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                ref[i, j] = b[j]
                for k in range(5):
                    ref[i, j] += x[i, k] * w[j, k]
        np.testing.assert_allclose(out.data, ref, rtol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="dimension mismatch"):
            ad.linear(
                ad.Tensor(rng.normal(size=(2, 3)).astype(np.float32)),
                ad.Tensor(rng.normal(size=(4, 5)).astype(np.float32)),
                ad.Tensor(np.zeros(4)),
            )


class TestChannelStats:
    def test_constant_channel(self):
        x = ad.Tensor(np.full((1, 2, 3, 3), 4.5))
        mean, std = ad.channel_stats(x)
        np.testing.assert_allclose(mean.data, 4.5, rtol=1e-6)
        np.testing.assert_allclose(std.data, 0.0, atol=1e-7)

    def test_two_point_symmetry(self):
        x = np.zeros((1, 1, 1, 2), dtype=np.float32)
        x[0, 0, 0, 1] = 2.0
        mean, std = ad.channel_stats(ad.Tensor(x))
        assert mean.data[0, 0] == pytest.approx(1.0)
        assert std.data[0, 0] == pytest.approx(1.0)

    def test_matches_two_pass_reference(self, rng):
        x = rng.normal(size=(2, 3, 5, 7))
        mean, std = ad.channel_stats(ad.Tensor(x, np.float64))
        for n in range(2):
            for c in range(3):
                vals = x[n, c].ravel()
                mu = vals.sum() / vals.size
                var = ((vals - mu) ** 2).sum() / vals.size  # population
                assert abs(mean.data[n, c] - mu) / max(abs(mu), 1e-9) < 1e-6
                assert abs(std.data[n, c] - np.sqrt(var)) / max(np.sqrt(var), 1e-9) < 1e-6

    def test_std_nonnegative_and_centering(self, rng):
        x = rng.normal(size=(2, 4, 6, 6)) * 3.0
        t = ad.Tensor(x, np.float64)
        mean, std = ad.channel_stats(t)
        assert (std.data >= 0).all()
        centered = x - mean.data[:, :, None, None]
        assert np.abs(centered.mean(axis=(2, 3))).max() < 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = ad.Parameter(rng.normal(size=(3, 4)), "p")
        with ad.GradTape() as tape:
            loss = ad.tsum(p)
        tape.backward(loss)
        np.testing.assert_array_equal(p.grad, np.ones((3, 4), dtype=np.float32))

    def test_square_gradient(self):
        p = ad.Parameter(np.array([3.0]), "p")
        with ad.GradTape() as tape:
            loss = ad.tsum(ad.square(p))
        tape.backward(loss)
        assert p.grad[0] == pytest.approx(6.0)

    def test_fanout_accumulates(self, rng):
        """Using the same tensor twice sums the branch gradients."""
        p = ad.Parameter(rng.normal(size=(4,)), "p", dtype=np.float64)
        with ad.GradTape() as tape:
            loss = ad.tsum(ad.add(ad.mul(p, 2.0), ad.mul(p, 3.0)))
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, 5.0)

    def test_backward_rejects_non_scalar(self, rng):
        p = ad.Parameter(rng.normal(size=(3,)), "p")
        with ad.GradTape() as tape:
            out = ad.mul(p, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(out)

    def test_backward_twice_rejected(self):
        p = ad.Parameter(np.array([1.0]), "p")
        with ad.GradTape() as tape:
            loss = ad.tsum(p)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_grad_accumulates_across_tapes(self):
        p = ad.Parameter(np.array([2.0]), "p")
        for _ in range(2):
            with ad.GradTape() as tape:
                loss = ad.tsum(ad.square(p))
            tape.backward(loss)
        assert p.grad[0] == pytest.approx(8.0)
        p.zero_grad()
        assert p.grad[0] == 0.0

    def test_no_tape_means_no_recording(self):
        p = ad.Parameter(np.array([1.0]), "p")
        out = ad.square(p)  # outside any tape
        assert isinstance(out, ad.Tensor)
        with ad.GradTape() as tape:
            loss = ad.tsum(p)
        tape.backward(loss)
        assert p.grad[0] == pytest.approx(1.0)


class TestGradientChecks:
    """Central finite differences at float64, relative error < 1e-4."""

    N_SHAPES = 20

    def _rand(self, rng, shape, offset=0.0):
        return ad.Parameter(rng.normal(size=shape) + offset, "p", dtype=np.float64)

    def test_elementwise_ops(self, rng):
        for i in range(self.N_SHAPES):
            shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
            a = self._rand(rng, shape)
            b = ad.Parameter(rng.normal(size=shape) + 3.0, "b", dtype=np.float64)
            err = finite_difference_check(
                lambda: ad.tsum(ad.div(ad.mul(ad.add(a, b), ad.sub(a, 0.5)), b)), [a, b]
            )
            assert err < 1e-4, f"case {i}: rel err {err}"

    def test_broadcast_gradients(self, rng):
        a = self._rand(rng, (2, 3, 4))
        b = self._rand(rng, (3, 1))
        err = finite_difference_check(lambda: ad.tsum(ad.mul(a, b)), [a, b])
        assert err < 1e-4

    def test_pointwise_functions(self, rng):
        for _ in range(self.N_SHAPES):
            shape = tuple(rng.integers(1, 6, size=2))
            # keep clear of the |x| and leaky kinks and sqrt's zero
            base = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
            p = ad.Parameter(base, "p", dtype=np.float64)
            err = finite_difference_check(
                lambda: ad.tsum(
                    ad.add(
                        ad.sigmoid(ad.leaky_relu(p, 0.2)),
                        ad.add(ad.exp(ad.mul(p, 0.3)), ad.absolute(p)),
                    )
                ),
                [p],
            )
            assert err < 1e-4
            q = ad.Parameter(rng.uniform(0.5, 2.0, size=shape), "q", dtype=np.float64)
            err = finite_difference_check(lambda: ad.tsum(ad.sqrt(q)), [q])
            assert err < 1e-4

    def test_reductions_and_shapes(self, rng):
        for _ in range(self.N_SHAPES):
            p = self._rand(rng, (2, 3, 2, 2))
            axes = (2, 3) if rng.uniform() < 0.5 else None
            keep = bool(rng.integers(0, 2))
            err = finite_difference_check(
                lambda: ad.tsum(ad.square(ad.tmean(p, axes=axes, keepdims=keep))), [p]
            )
            assert err < 1e-4
            err = finite_difference_check(
                lambda: ad.tsum(ad.square(ad.reshape(ad.narrow(p, 1, 1, 2), (2, 8)))), [p]
            )
            assert err < 1e-4

    def test_concat(self, rng):
        a = self._rand(rng, (1, 2, 3, 3))
        b = self._rand(rng, (1, 3, 3, 3))
        err = finite_difference_check(
            lambda: ad.tsum(ad.square(ad.concat([a, b], axis=1))), [a, b]
        )
        assert err < 1e-4

    def test_linear(self, rng):
        for _ in range(self.N_SHAPES):
            n, din, dout = rng.integers(1, 5, size=3)
            x = self._rand(rng, (n, din))
            w = self._rand(rng, (dout, din))
            b = self._rand(rng, (dout,))
            err = finite_difference_check(
                lambda: ad.tsum(ad.square(ad.linear(x, w, b))), [x, w, b]
            )
            assert err < 1e-4

    def test_conv2d(self, rng):
        for i in range(self.N_SHAPES):
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2))
            h = int(rng.integers(3, 6))
            wdt = int(rng.integers(3, 6))
            cin = int(rng.integers(1, 3))
            cout = int(rng.integers(1, 3))
            x = self._rand(rng, (1, cin, h, wdt))
            w = self._rand(rng, (cout, cin, 3, 3))
            b = self._rand(rng, (cout,))
            err = finite_difference_check(
                lambda: ad.tsum(ad.square(ad.conv2d(x, w, b, stride=stride, padding=padding))),
                [x, w, b],
            )
            assert err < 1e-4, f"case {i} stride={stride} padding={padding}: {err}"

    def test_upsample2x(self, rng):
        for _ in range(self.N_SHAPES):
            p = self._rand(rng, (1, 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))))
            err = finite_difference_check(lambda: ad.tsum(ad.square(ad.upsample2x(p))), [p])
            assert err < 1e-4

    def test_channel_stats(self, rng):
        for _ in range(self.N_SHAPES):
            p = self._rand(rng, (2, 2, 3, 3))
            def fn():
                mean, std = ad.channel_stats(p)
                return ad.tsum(ad.add(ad.square(mean), ad.square(std)))
            err = finite_difference_check(fn, [p])
            assert err < 1e-4
