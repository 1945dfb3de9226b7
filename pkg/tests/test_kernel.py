import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curlip.errors import DegenerateVector, ShapeMismatch
from curlip.kernel import ModelState, Param, Tensor, adamw_step, grad_check, no_grad
from curlip.kernel import functional as F
from curlip.kernel import checkpoint


def _p(name, arr):
    return Param(name, np.asarray(arr, dtype=np.float64))


class TestForwardExamples:
    def test_relu_forward_backward(self):
        x = _p("x", [-1.0, 0.0, 2.0])
        y = F.relu(x)
        np.testing.assert_array_equal(y.data, [0, 0, 2])
        y.backward(np.ones(3))
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_conv_hand_computed(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = F.conv2d(x, w).data[0, 0]
        # zero padding: corners see 4 ones, edges 6, centre 9
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 2, 5, 4))
        for b in range(2):
            for o in range(2):
                for i in range(5):
                    for j in range(4):
                        ref[b, o, i, j] = np.sum(xp[b, :, i:i + 3, j:j + 3] * w[o])
        np.testing.assert_allclose(F.conv2d(Tensor(x), Tensor(w)).data, ref, atol=1e-12)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeMismatch, match=r"\(1, 2, 3, 3\)"):
            F.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 3, 3))))

    def test_matmul_shape_error_mentions_shapes(self):
        with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestAdaptivePool:
    def test_hand_windows(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        out = F.adaptive_avg_pool2d(x, (2, 2)).data[0, 0]
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]])

    def test_identity_and_global_mean(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 7))
        np.testing.assert_allclose(F.adaptive_avg_pool2d(Tensor(x), (5, 7)).data, x)
        np.testing.assert_allclose(F.adaptive_avg_pool2d(Tensor(x), (1, 1)).data[..., 0, 0],
                                   x.mean(axis=(2, 3)))

    def test_overlapping_bins_match_loop(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 7, 5))
        p, q = 3, 2
        ref = np.zeros((1, 2, p, q))
        for i in range(p):
            r0, r1 = math.floor(i * 7 / p), math.ceil((i + 1) * 7 / p)
            for j in range(q):
                c0, c1 = math.floor(j * 5 / q), math.ceil((j + 1) * 5 / q)
                ref[..., i, j] = x[..., r0:r1, c0:c1].mean(axis=(-2, -1))
        np.testing.assert_allclose(F.adaptive_avg_pool2d(Tensor(x), (p, q)).data, ref)

    def test_too_large_target(self):
        with pytest.raises(ShapeMismatch):
            F.adaptive_avg_pool2d(Tensor(np.ones((1, 1, 2, 2))), (3, 1))


class TestCosine:
    def test_values(self):
        u = Tensor([1.0, 2.0, 3.0])
        assert F.cosine_sim(u, u).item() == pytest.approx(1.0)
        assert F.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0)
        assert F.cosine_sim(u, Tensor([-1.0, -2.0, -3.0])).item() == pytest.approx(-1.0)

    def test_zero_vector(self):
        with pytest.raises(DegenerateVector):
            F.cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
           st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_bounded(self, a, b):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        assert -1 - 1e-12 <= F.cosine_sim(Tensor(a), Tensor(b)).item() <= 1 + 1e-12


class TestSoftmaxBatchnormProps:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_sum_and_shift_invariance(self, seed, c):
        x = np.random.default_rng(seed).normal(scale=5, size=(4, 6))
        y = F.softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(F.softmax(Tensor(x + c), axis=1).data, y, atol=1e-6)

    def test_batchnorm_inference_identity(self):
        s = ModelState(dtype=np.float64)
        from curlip.kernel.layers import BatchNorm
        bn = BatchNorm(s, "bn", 3)
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        np.testing.assert_allclose(bn(Tensor(x), training=False).data, x, atol=1e-5 * 3)

    def test_batchnorm_running_stats_update(self):
        s = ModelState(dtype=np.float64)
        from curlip.kernel.layers import BatchNorm
        bn = BatchNorm(s, "bn", 2)
        x = np.random.default_rng(0).normal(loc=3.0, size=(4, 2, 3, 3))
        bn(Tensor(x), training=True)
        np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=(0, 2, 3)))

    def test_dropout_inverted_scaling(self):
        x = Tensor(np.ones(100_000))
        y = F.dropout(x, 0.25, np.random.default_rng(0), training=True).data
        assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
        assert abs(y.mean() - 1.0) < 0.01
        assert F.dropout(x, 0.25, None, training=False) is x


class TestAdamW:
    def _state(self, theta, grad):
        s = ModelState(dtype=np.float64)
        p = s.param("w", lambda: np.array([theta]))
        p.grad = np.array([grad])
        return s, p

    def test_first_step_identity(self):
        s, p = self._state(1.0, 0.5)
        adamw_step(s, lr=0.1, weight_decay=0.0)
        eps, b2 = 1e-8, 0.999
        expected = 1.0 - 0.1 * 0.5 / (0.5 + eps * math.sqrt(1 - b2))
        assert p.data[0] == pytest.approx(expected, abs=1e-7)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)
        assert s.step_count == 1

    def test_zero_grad_no_decay_unchanged(self):
        s, p = self._state(2.5, 0.0)
        adamw_step(s, lr=0.1, weight_decay=0.0)
        assert p.data[0] == 2.5

    def test_pure_decay_branch(self):
        s, p = self._state(2.0, 0.0)
        adamw_step(s, lr=0.1, weight_decay=0.1)
        assert p.data[0] == pytest.approx(0.99 * 2.0)

    def test_moments_keyed_by_trainable(self):
        s = ModelState(dtype=np.float64)
        s.param("a", lambda: np.ones(2))
        s.param("b", lambda: np.ones(2), trainable=False)
        adamw_step(s, lr=0.01)
        assert set(s.opt_moments) == {"a"}


class TestGradCheckContract:
    def test_square(self):
        x = _p("x", [3.0])
        rep = grad_check(lambda: (x * x).sum(), [x])
        assert rep.max_rel_error < 1e-9
        assert x.grad[0] == pytest.approx(6.0)

    def test_non_trainable_excluded(self):
        x = _p("x", [1.0, 2.0])
        c = Param("c", np.array([1.0, 2.0]), trainable=False)
        rep = grad_check(lambda: (x * c).sum(), [x, c])
        assert set(rep.per_param) == {"x"}

    def test_detects_wrong_gradient(self):
        x = _p("x", [1.5])

        def bad():
            return Tensor.from_op(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))

        assert not grad_check(bad, [x]).passed(1e-4)

    def test_kink_retried_with_smaller_step(self):
        # +-1e-5 crosses the relu kink at 0, +-1e-6 does not
        x = _p("x", [5e-6])
        rep = grad_check(lambda: (F.relu(x) * 3.0).sum(), [x])
        assert rep.checked == {"x": 1} and rep.kinked == {"x": 0}
        assert rep.passed(1e-6)

    def test_unresolvable_kink_fails(self):
        x = _p("x", [5e-8])
        rep = grad_check(lambda: F.relu(x).sum(), [x])
        assert rep.kinked == {"x": 1} and rep.unchecked == ["x"]
        assert not rep.passed(1e-4)

    def test_rejects_float32(self):
        x = Param("x", np.ones(2, dtype=np.float32))
        with pytest.raises(TypeError):
            grad_check(lambda: x.sum(), [x])


def _weighted(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed + 99).normal(size=out.shape)
    return (out * Tensor(w)).sum()


SHAPES = [(2, 3), (3, 5), (1, 7), (4, 2), (2, 6)]
SEEDS = [0, 1, 2]


def _primitive_cases():
    """(name, builder) where builder(shape, rng) -> (params, f)."""
    def unary(fn, positive=False):
        def build(shape, rng):
            arr = rng.normal(size=shape)
            if positive:
                arr = np.abs(arr) + 0.5
            x = _p("x", arr)
            return [x], lambda: fn(x)
        return build

    def matmul(shape, rng):
        a = _p("a", rng.normal(size=shape))
        b = _p("b", rng.normal(size=(shape[1], 3)))
        return [a, b], lambda: a @ b

    def conv(shape, rng):
        x = _p("x", rng.normal(size=(2, 2) + shape))
        w = _p("w", rng.normal(size=(3, 2, 3, 3)))
        b = _p("b", rng.normal(size=3))
        return [x, w, b], lambda: F.conv2d(x, w, b)

    def batchnorm(shape, rng):
        x = _p("x", rng.normal(size=(3, 2) + shape))
        g = _p("g", rng.normal(size=2) + 1.5)
        b = _p("b", rng.normal(size=2))
        rm = Param("rm", np.zeros(2), trainable=False)
        rv = Param("rv", np.ones(2), trainable=False)
        return [x, g, b], lambda: F.batchnorm(x, g, b, rm, rv, training=True)

    def batchnorm_eval(shape, rng):
        x = _p("x", rng.normal(size=(3,) + shape))
        c = shape[0]
        g = _p("g", rng.normal(size=c))
        b = _p("b", rng.normal(size=c))
        rm = Param("rm", rng.normal(size=c), trainable=False)
        rv = Param("rv", np.abs(rng.normal(size=c)) + 0.5, trainable=False)
        return [x, g, b], lambda: F.batchnorm(x, g, b, rm, rv, training=False)

    def layernorm(shape, rng):
        # two-feature layernorm is degenerate (outputs are always +-1)
        d = shape[-1] + 2
        x = _p("x", rng.normal(size=(shape[0], d)))
        g = _p("g", rng.normal(size=d))
        b = _p("b", rng.normal(size=d))
        return [x, g, b], lambda: F.layernorm(x, g, b)

    def dropout(shape, rng):
        x = _p("x", rng.normal(size=shape))
        return [x], lambda: F.dropout(x, 0.3, np.random.default_rng(5), training=True)

    def mean_axis(shape, rng):
        x = _p("x", rng.normal(size=shape))
        return [x], lambda: x.mean(axis=1)

    def add_mul(shape, rng):
        a = _p("a", rng.normal(size=shape))
        b = _p("b", rng.normal(size=(1, shape[1])))
        return [a, b], lambda: (a + b) * a - b / (b * b + 2.0)

    def reshape_permute(shape, rng):
        x = _p("x", rng.normal(size=(2,) + shape))
        return [x], lambda: x.permute(2, 0, 1).reshape(shape[1], -1)

    def pool(shape, rng):
        x = _p("x", rng.normal(size=(1, 2, shape[0] + 2, shape[1] + 3)))
        return [x], lambda: F.adaptive_avg_pool2d(x, (2, 2))

    def cross_entropy(shape, rng):
        x = _p("x", rng.normal(size=shape))
        t = rng.integers(0, shape[1], size=shape[0])
        return [x], lambda: F.cross_entropy(x, t)

    def l2n(shape, rng):
        x = _p("x", rng.normal(size=shape))
        return [x], lambda: F.l2_normalize(x)

    def embed_concat(shape, rng):
        w = _p("w", rng.normal(size=shape))
        ids = rng.integers(0, shape[0], size=(2, 4))
        y = _p("y", rng.normal(size=(2, 1, shape[1])))
        return [w, y], lambda: F.concat([F.embedding(w, ids), y], axis=1)

    def stack_pad(shape, rng):
        a = _p("a", rng.normal(size=shape))
        b = _p("b", rng.normal(size=shape))
        return [a, b], lambda: F.pad_axis(F.stack([a, b], axis=1), axis=2, after=2)

    def masked_logsoftmax(shape, rng):
        x = _p("x", rng.normal(size=(shape[0], shape[1] + 1)))
        keep = np.ones(x.shape, dtype=bool)
        keep[:, -1] = False
        return [x], lambda: F.log_softmax(F.masked_fill(x, keep), axis=1)[:, :-1]

    return {
        "matmul": matmul, "conv2d": conv, "batchnorm2d": batchnorm, "batchnorm_eval": batchnorm_eval,
        "relu": unary(F.relu), "gelu": unary(F.gelu), "layernorm": layernorm,
        "softmax": unary(lambda x: F.softmax(x, axis=-1)), "log_softmax": unary(F.log_softmax),
        "dropout": dropout, "mean": mean_axis, "add_mul_div": add_mul, "reshape_permute": reshape_permute,
        "adaptive_pool": pool, "cross_entropy": cross_entropy, "l2_normalize": l2n,
        "embedding_concat": embed_concat, "stack_pad": stack_pad, "masked_log_softmax": masked_logsoftmax,
        "getitem": unary(lambda x: x[:, ::2]),
    }


CASES = _primitive_cases()


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", SEEDS)
def test_primitive_gradients(name, seed):
    for shape in SHAPES:
        rng = np.random.default_rng(seed * 31 + hash(shape) % 1000)
        params, fn = CASES[name](shape, rng)
        rep = grad_check(lambda: _weighted(fn(), seed), params, seed=seed)
        assert rep.max_rel_error < 1e-6, (name, shape, rep.worst())


def test_no_grad_records_nothing():
    x = _p("x", [1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


class TestCheckpoint:
    def _state(self):
        s = ModelState(config={"a": 1, "nested": {"x": [1, 2]}})
        rng = np.random.default_rng(0)
        s.param("w", lambda: rng.normal(size=(3, 4)))
        s.param("rm", lambda: np.zeros(4), trainable=False)
        s.params["w"].grad = rng.normal(size=(3, 4)).astype(np.float32)
        adamw_step(s, lr=0.01)
        return s

    def test_round_trip_bit_exact(self, tmp_path):
        s = self._state()
        p1 = tmp_path / "a.ckpt"
        checkpoint.save(s, p1, meta={"val_loss": 0.25})
        loaded, meta = checkpoint.load(p1)
        p2 = tmp_path / "b.ckpt"
        checkpoint.save(loaded, p2, meta=meta)
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_bytes()[:8] == b"CURLIP01"
        np.testing.assert_array_equal(loaded.params["w"].data, s.params["w"].data)
        assert not loaded.params["rm"].trainable
        assert loaded.step_count == 1
        np.testing.assert_array_equal(loaded.opt_moments["w"][1], s.opt_moments["w"][1])
        assert loaded.config == s.config and meta == {"val_loss": 0.25}

    def test_bad_magic(self):
        from curlip.errors import CheckpointError
        with pytest.raises(CheckpointError):
            checkpoint.from_bytes(b"NOTACKPT" + b"\0" * 16)
