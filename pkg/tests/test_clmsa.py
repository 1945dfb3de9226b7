import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curlip.clmsa import Clmsa, ClmsaConfig, GmlpBlock, stack_and_permute
from curlip.errors import ConfigError, ShapeMismatch
from curlip.kernel import ModelState, Tensor, grad_check
from curlip.kernel import functional as F


def _clmsa(cfg=None, n_layers=4, seed=0):
    """float64 aggregator; the second construction binds to the converted params."""
    cfg = cfg or ClmsaConfig.desk()
    state = ModelState()
    Clmsa(state, cfg, n_layers, np.random.default_rng(seed))
    state = state.astype(np.float64)
    return state, Clmsa(state, cfg, n_layers, np.random.default_rng(seed))


def _desk(seed=0):
    return _clmsa(seed=seed)


class TestPermute:
    def test_shape(self):
        assert stack_and_permute(Tensor(np.zeros((2, 3, 5, 7)))).shape == (2, 3, 7, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_probes_and_involution(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 5, 4))
        y = stack_and_permute(Tensor(x)).data
        for _ in range(10):
            b, l, t, d = (rng.integers(s) for s in x.shape)
            assert y[b, l, d, t] == x[b, l, t, d]
        np.testing.assert_array_equal(stack_and_permute(Tensor(y)).data, x)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeMismatch):
            stack_and_permute(Tensor(np.zeros((2, 3, 4))))


class TestConvPyramid:
    def test_desk_shape(self):
        _, model = _desk()
        out = model.conv_pyramid(Tensor(np.random.default_rng(0).normal(size=(2, 4, 64, 64))), training=True)
        assert out.shape == (2, 4, 64, 64)

    @pytest.mark.parametrize("training", [True, False])
    def test_zero_input_gives_zero(self, training):
        _, model = _desk()
        out = model.conv_pyramid(Tensor(np.zeros((2, 4, 16, 16))), training=training)
        assert not np.any(out.data)

    def test_wrong_layer_count(self):
        _, model = _desk()
        with pytest.raises(ShapeMismatch):
            model.conv_pyramid(Tensor(np.zeros((1, 3, 8, 8))), training=False)


class TestPoolProject:
    def test_identity_projection(self):
        cfg = ClmsaConfig(channel_pyramid=(2,), pool_out=(4, 3), proj_dim=6)
        _, model = _clmsa(cfg, n_layers=1)
        model.proj.weight.data[...] = np.eye(6)
        model.proj.bias.data[...] = 0
        x = np.random.default_rng(0).normal(size=(2, 2, 4, 3))
        out = model.pool_project(Tensor(x)).data
        np.testing.assert_array_equal(out, x.transpose(0, 2, 1, 3).reshape(2, 4, 6))

    def test_channel_major_flattening(self):
        cfg = ClmsaConfig(channel_pyramid=(2,), pool_out=(1, 2), proj_dim=4)
        _, model = _clmsa(cfg, n_layers=1)
        model.proj.weight.data[...] = np.eye(4)
        model.proj.bias.data[...] = 0
        x = np.array([[[[1.0, 2.0]], [[3.0, 4.0]]]])   # channels c0=(1,2), c1=(3,4)
        np.testing.assert_array_equal(model.pool_project(Tensor(x)).data, [[[1, 2, 3, 4]]])

    def test_constant_pools_to_constant(self):
        out = F.adaptive_avg_pool2d(Tensor(np.full((1, 4, 64, 50), 2.5)), (8, 16)).data
        np.testing.assert_allclose(out, 2.5, rtol=0, atol=1e-12)

    def test_trace_shapes(self):
        _, model = _desk()
        trace = {}
        model.pool_project(Tensor(np.ones((2, 4, 64, 64))), trace)
        assert trace == {"pooled": (2, 4, 8, 16), "flat": (2, 8, 64), "projected": (2, 8, 32)}


def _gmlp(n_tokens=5, dim=6, seed=0):
    state = ModelState()
    GmlpBlock(state, "g", n_tokens, dim, 2, np.random.default_rng(seed))
    return state.astype(np.float64)


class TestGmlp:
    def _block(self, state, n_tokens=5, dim=6):
        return GmlpBlock(state, "g", n_tokens, dim, 2, np.random.default_rng(0))

    def test_zero_spatial_weight_gate_is_one(self):
        state = _gmlp()
        block = self._block(state)
        block.spatial_w.data[...] = 0
        v = Tensor(np.random.default_rng(1).normal(size=(3, 5, 6)))
        np.testing.assert_allclose(block.gate(v).data, 1.0, atol=1e-3)

    def test_initial_gate_close_to_one(self):
        state = _gmlp()
        block = self._block(state)
        v = Tensor(np.random.default_rng(1).normal(size=(3, 5, 6)))
        np.testing.assert_allclose(block.gate(v).data, 1.0, atol=1e-2)

    def test_zero_input_zero_biases(self):
        state = _gmlp()
        block = self._block(state)
        for name, p in state.params.items():
            if name.endswith(".bias") or name.endswith("spatial_b") or name.endswith(".beta"):
                p.data[...] = 0
        assert not np.any(block(Tensor(np.zeros((2, 5, 6)))).data)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_token_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        state = _gmlp()
        block = self._block(state)
        block.spatial_w.data[...] = rng.normal(size=(5, 5))
        block.spatial_b.data[...] = rng.normal(size=(5, 1))
        x = rng.normal(size=(2, 5, 6))
        perm = rng.permutation(5)
        base = block(Tensor(x)).data
        block.spatial_w.data[...] = block.spatial_w.data[perm][:, perm]
        block.spatial_b.data[...] = block.spatial_b.data[perm]
        np.testing.assert_allclose(block(Tensor(x[:, perm])).data, base[:, perm], atol=1e-12)

    def test_token_count_checked(self):
        block = self._block(_gmlp())
        with pytest.raises(ShapeMismatch):
            block(Tensor(np.zeros((1, 4, 6))))


class TestForward:
    def test_desk_trace(self):
        _, model = _desk()
        trace = {}
        out = model(Tensor(np.random.default_rng(0).normal(size=(2, 4, 64, 64))), training=True, trace=trace)
        assert out.shape == (2, 32)
        assert trace == {"permuted": (2, 4, 64, 64), "conv": (2, 4, 64, 64), "pooled": (2, 4, 8, 16),
                         "flat": (2, 8, 64), "projected": (2, 8, 32), "gmlp": (2, 8, 32), "f_url": (2, 32)}

    def test_inference_deterministic(self):
        _, model = _desk()
        h = Tensor(np.random.default_rng(0).normal(size=(2, 4, 64, 64)))
        np.testing.assert_array_equal(model(h).data, model(h).data)

    def test_every_parameter_receives_gradient(self):
        state, model = _desk()
        rng = np.random.default_rng(1)
        model.gmlp.spatial_w.data[...] = rng.normal(0, 0.3, model.gmlp.spatial_w.shape)
        out = model(Tensor(rng.normal(size=(3, 4, 64, 64))), training=True)
        (out * Tensor(rng.normal(size=out.shape))).sum().backward()
        for p in state.trainable():
            assert np.linalg.norm(p.grad) > 0, p.name

    def test_grad_check(self):
        state, model = _desk()
        rng = np.random.default_rng(2)
        model.gmlp.spatial_w.data[...] = rng.normal(0, 0.3, model.gmlp.spatial_w.shape)
        h = Tensor(rng.normal(size=(2, 4, 64, 64)))
        weights = Tensor(rng.normal(size=(2, 32)))
        report = grad_check(lambda: (model(h, training=True) * weights).sum(), state.trainable(),
                            seed=0, n_coords=3, max_attempts=12)
        assert report.passed(1e-4), report.worst()


class TestConfig:
    def test_full_reshape_width(self):
        assert ClmsaConfig.full().flat_width == 768

    @pytest.mark.parametrize("kw", [{"channel_pyramid": ()}, {"pool_out": (0, 4)}, {"proj_dim": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ClmsaConfig(**kw)
