import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volnorm.gradcheck import norm_suite
from volnorm.normlayers import (AffineParams, ConfigurationError, NormMethod, RunningStats,
                                UsageError, batchnorm_update_running, build_partition,
                                norm_backward, norm_forward, norm_infer)


def membership_key(method, shape, idx):
    """Statistics-set key of one multi-index, written straight from the set definitions."""
    n, d, h, w, c = idx
    C = shape[4]
    if method.kind == "batch":
        return (c,)
    if method.kind == "group":
        return (n, c // (C // method.groups))
    return (n, c)


def brute_sets(method, shape):
    sets = {}
    for flat, idx in enumerate(itertools.product(*map(range, shape))):
        sets.setdefault(membership_key(method, shape, idx), []).append(flat)
    return sorted(sorted(v) for v in sets.values())


def partition_sets(p):
    sets = {}
    for flat, sid in enumerate(p.set_of):
        sets.setdefault(int(sid), []).append(flat)
    return sorted(sorted(v) for v in sets.values())


def brute_normalize(x, method, eps):
    """Per-element statistics by explicit enumeration of each element's set."""
    sets = brute_sets(method, x.shape)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for members in sets:
        vals = flat[members]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[members] = (vals - mu) / np.sqrt(var + eps)
    return out.reshape(x.shape)


METHODS = [NormMethod.batch(), NormMethod.group(2), NormMethod.instance()]


class TestBuildPartition:
    def test_batch_sets_span_samples(self):
        p = build_partition(NormMethod.batch(), (2, 1, 1, 1, 3))
        assert p.set_count == 3
        assert p.set_sizes.tolist() == [2, 2, 2]
        # channel c of sample 0 is flat index c, of sample 1 is 3 + c
        assert partition_sets(p) == [[0, 3], [1, 4], [2, 5]]

    def test_group_contiguous_blocks(self):
        p = build_partition(NormMethod.group(2), (1, 1, 1, 1, 6))
        assert partition_sets(p) == [[0, 1, 2], [3, 4, 5]]

    def test_instance_counts(self):
        p = build_partition(NormMethod.instance(), (2, 4, 4, 4, 3))
        assert p.set_count == 6
        assert p.set_sizes.tolist() == [64] * 6

    @pytest.mark.parametrize("method", METHODS + [NormMethod.group(1), NormMethod.group(4)])
    @pytest.mark.parametrize("shape", [(2, 2, 3, 1, 4), (1, 3, 1, 2, 4), (3, 1, 1, 1, 4)])
    def test_matches_enumerated_definition(self, method, shape):
        assert partition_sets(build_partition(method, shape)) == brute_sets(method, shape)

    def test_indivisible_groups(self):
        with pytest.raises(ConfigurationError):
            build_partition(NormMethod.group(4), (1, 2, 2, 2, 6))

    def test_method_validation(self):
        with pytest.raises(ConfigurationError):
            NormMethod("layer")
        with pytest.raises(ConfigurationError):
            NormMethod.batch(epsilon=0.0)
        assert NormMethod.parse("group:8") == NormMethod.group(8)
        assert NormMethod.parse(" Instance ") == NormMethod.instance()


class TestForward:
    def test_hand_values(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2, 1)
        y, _ = norm_forward(x, build_partition(NormMethod.instance(), x.shape),
                            AffineParams.identity(1), 0.0)
        np.testing.assert_allclose(y.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)

    @pytest.mark.parametrize("method", METHODS)
    def test_constant_input_gives_zero(self, method):
        x = np.full((2, 2, 2, 2, 4), 5.0)
        y, cache = norm_forward(x, build_partition(method, x.shape), AffineParams.identity(4), 1e-5)
        assert not y.any()
        np.testing.assert_allclose(cache.std, np.sqrt(1e-5))

    def test_affine(self):
        x = np.array([-1.0, 1.0]).reshape(1, 1, 1, 2, 1)
        aff = AffineParams(np.array([2.0]), np.array([3.0]))
        y, cache = norm_forward(x, build_partition(NormMethod.instance(), x.shape), aff, 1e-12)
        np.testing.assert_allclose(cache.xhat.ravel(), [-1.0, 1.0])
        np.testing.assert_allclose(y.ravel(), [1.0, 5.0])

    @pytest.mark.parametrize("method", METHODS + [NormMethod.group(4)])
    def test_matches_brute_force(self, rng, method):
        x = rng.normal(size=(2, 2, 3, 2, 4)) * 3 + 1
        y, _ = norm_forward(x, build_partition(method, x.shape), AffineParams.identity(4), 1e-5)
        np.testing.assert_allclose(y, brute_normalize(x, method, 1e-5), rtol=1e-10, atol=1e-12)

    @given(st.sampled_from(METHODS), st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_moments(self, method, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 2, 3, 3, 4)) * r.uniform(0.1, 10) + r.normal() * 5
        p = build_partition(method, x.shape)
        y, _ = norm_forward(x, p, AffineParams.identity(4), 1e-12)
        sets = partition_sets(p)
        flat = y.reshape(-1)
        for members in sets:
            assert abs(flat[members].mean()) <= 1e-8
            assert abs(flat[members].var() - 1.0) <= 1e-5

    @given(st.integers(1, 3), st.sampled_from([1, 2, 3, 6]), st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_group_equals_instance_bitwise(self, n, c, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(n, 2, 3, 2, c))
        aff = AffineParams(r.normal(size=c), r.normal(size=c))
        g = r.normal(size=x.shape)
        yg, cg = norm_forward(x, build_partition(NormMethod.group(c), x.shape), aff, 1e-5)
        yi, ci = norm_forward(x, build_partition(NormMethod.instance(), x.shape), aff, 1e-5)
        assert np.array_equal(yg, yi)
        for a, b in zip(norm_backward(g, cg, aff), norm_backward(g, ci, aff)):
            assert np.array_equal(a, b)

    @given(st.sampled_from(METHODS), st.floats(0.01, 100), st.floats(-100, 100),
           st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_affine_input_invariance(self, method, a, b, seed):
        x = np.random.default_rng(seed).normal(size=(2, 2, 2, 3, 4))
        p = build_partition(method, x.shape)
        aff = AffineParams.identity(4)
        y1, _ = norm_forward(x, p, aff, 1e-12)
        y2, _ = norm_forward(a * x + b, p, aff, 1e-12)
        np.testing.assert_allclose(y2, y1, atol=1e-8)

    def test_batch_size_one_constant_is_finite(self):
        x = np.full((1, 3, 3, 3, 2), 7.0)
        p = build_partition(NormMethod.batch(), x.shape)
        y, cache = norm_forward(x, p, AffineParams.identity(2), 1e-5)
        gx, gg, gb = norm_backward(np.ones_like(x), cache, AffineParams.identity(2))
        assert not y.any()
        assert all(np.isfinite(a).all() for a in (gx, gg, gb))

    def test_visit_order_independent(self, rng):
        # relabelling sets in reverse order must not change a single bit
        x = rng.normal(size=(2, 2, 2, 2, 4))
        p = build_partition(NormMethod.instance(), x.shape)
        from volnorm.tensor import NormPartition
        q = NormPartition.from_labels(x.shape, p.set_count - 1 - p.set_of)
        aff = AffineParams.identity(4)
        np.testing.assert_array_equal(norm_forward(x, q, aff, 1e-5)[0],
                                      norm_forward(x, q, aff, 1e-5)[0])
        np.testing.assert_allclose(norm_forward(x, q, aff, 1e-5)[0],
                                   norm_forward(x, p, aff, 1e-5)[0], atol=1e-13)

    def test_affine_length_checked(self):
        x = np.zeros((1, 1, 1, 2, 3))
        from volnorm.tensor import ShapeError
        with pytest.raises(ShapeError):
            norm_forward(x, build_partition(NormMethod.instance(), x.shape),
                         AffineParams.identity(2), 1e-5)


class TestBackward:
    def test_zero_grad(self, rng):
        x = rng.normal(size=(2, 2, 2, 2, 4))
        aff = AffineParams.identity(4)
        _, cache = norm_forward(x, build_partition(NormMethod.group(2), x.shape), aff, 1e-5)
        for g in norm_backward(np.zeros_like(x), cache, aff):
            assert not g.any()

    def test_single_set_finite_differences(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4, 1)
        p = build_partition(NormMethod.instance(), x.shape)
        aff = AffineParams.identity(1)
        w = np.array([0.3, -1.2, 0.7, 2.0]).reshape(x.shape)
        _, cache = norm_forward(x, p, aff, 1e-5)
        gx, _, _ = norm_backward(w, cache, aff)
        h = 1e-5
        num = np.zeros(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            up = np.sum(w * norm_forward(x + e.reshape(x.shape), p, aff, 1e-5)[0])
            dn = np.sum(w * norm_forward(x - e.reshape(x.shape), p, aff, 1e-5)[0])
            num[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(gx.ravel(), num, rtol=1e-6)

    def test_grad_gamma_identity(self, rng):
        # with grad_y = xhat, grad_gamma[c] = sum of xhat^2 over channel c = element count
        x = rng.normal(size=(2, 3, 3, 3, 4))
        aff = AffineParams.identity(4)
        _, cache = norm_forward(x, build_partition(NormMethod.instance(), x.shape), aff, 1e-12)
        _, gg, gb = norm_backward(cache.xhat, cache, aff)
        np.testing.assert_allclose(gg, 2 * 27, rtol=1e-9)
        np.testing.assert_allclose(gb, 0, atol=1e-9)

    @pytest.mark.parametrize("method", METHODS)
    def test_finite_difference_suite(self, method):
        result = norm_suite(method)
        assert result.passed, result.line()


class TestRunningStats:
    def _cache(self, mean_value):
        x = np.full((1, 1, 1, 2, 1), mean_value) + np.array([-1.0, 1.0]).reshape(1, 1, 1, 2, 1)
        return norm_forward(x, build_partition(NormMethod.batch(), x.shape),
                            AffineParams.identity(1), 1e-5)[1]

    def test_full_replacement(self):
        new = batchnorm_update_running(RunningStats.fresh(1, momentum=0.0), self._cache(3.0))
        assert new.mean.tolist() == [3.0]
        assert new.var.tolist() == [1.0]

    def test_frozen(self):
        old = RunningStats.fresh(1, momentum=1.0)
        new = batchnorm_update_running(old, self._cache(3.0))
        assert new.mean.tolist() == [0.0] and new.var.tolist() == [1.0]

    def test_one_ema_step(self):
        new = batchnorm_update_running(RunningStats.fresh(1, momentum=0.9), self._cache(1.0))
        assert new.mean[0] == pytest.approx(0.1)

    def test_rejects_non_batch_cache(self):
        x = np.ones((1, 1, 1, 2, 1))
        _, cache = norm_forward(x, build_partition(NormMethod.instance(), x.shape),
                                AffineParams.identity(1), 1e-5)
        with pytest.raises(UsageError):
            batchnorm_update_running(RunningStats.fresh(1), cache)


class TestInfer:
    def test_instance_is_forward(self, rng):
        x = rng.normal(size=(1, 2, 2, 2, 3))
        aff = AffineParams(rng.normal(size=3), rng.normal(size=3))
        y, _ = norm_forward(x, build_partition(NormMethod.instance(), x.shape), aff, 1e-5)
        assert np.array_equal(norm_infer(x, NormMethod.instance(), aff), y)

    def test_none_is_identity(self, rng):
        x = rng.normal(size=(1, 2, 2, 2, 3))
        assert norm_infer(x, NormMethod.none(), None) is x

    def test_batch_uses_running_stats(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4, 1)
        aff = AffineParams(np.array([2.0]), np.array([0.5]))
        stats = RunningStats(np.array([2.0]), np.array([4.0]))
        y = norm_infer(x, NormMethod.batch(epsilon=1e-5), aff, stats)
        s = np.sqrt(4.0 + 1e-5)
        expected = [2 * (-1) / s + 0.5, 0.5, 2 * 1 / s + 0.5, 2 * 2 / s + 0.5]
        np.testing.assert_allclose(y.ravel(), expected, rtol=1e-12)

    def test_batch_needs_stats(self):
        with pytest.raises(UsageError):
            norm_infer(np.ones((1, 1, 1, 1, 1)), NormMethod.batch(), AffineParams.identity(1))
