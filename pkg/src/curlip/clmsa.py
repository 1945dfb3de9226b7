"""Cross-layer multi-scale aggregation of all encoder layers into one URL
feature vector: conv pyramid, adaptive pooling, projection, gMLP and a mean
over the token axis."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .kernel import ModelState, Tensor
from .kernel import functional as F
from .kernel.layers import BatchNorm, Conv3x3, LayerNorm, Linear


@dataclass(frozen=True)
class ClmsaConfig:
    channel_pyramid: tuple[int, ...] = (16, 8, 8, 4)
    pool_out: tuple[int, int] = (8, 16)
    proj_dim: int = 32
    gmlp_expansion: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channel_pyramid", tuple(int(c) for c in self.channel_pyramid))
        object.__setattr__(self, "pool_out", tuple(int(c) for c in self.pool_out))
        if not self.channel_pyramid or min(self.channel_pyramid) < 1:
            raise ConfigError(f"channel pyramid must be non-empty and positive: {self.channel_pyramid}")
        if len(self.pool_out) != 2 or min(self.pool_out) < 1:
            raise ConfigError(f"pool_out must be two positive sizes: {self.pool_out}")
        if self.proj_dim < 1 or self.gmlp_expansion < 1 or (self.gmlp_expansion * self.proj_dim) % 2:
            raise ConfigError("proj_dim and gmlp_expansion must be positive with an even expanded width")

    @classmethod
    def desk(cls) -> "ClmsaConfig":
        return cls()

    @classmethod
    def full(cls) -> "ClmsaConfig":
        return cls(channel_pyramid=(64, 32, 16, 8), pool_out=(25, 96), proj_dim=128)

    @property
    def flat_width(self) -> int:
        return self.channel_pyramid[-1] * self.pool_out[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_pyramid"] = list(self.channel_pyramid)
        d["pool_out"] = list(self.pool_out)
        return d


def stack_and_permute(hidden: Tensor) -> Tensor:
    """(B, L, T, D) -> (B, L, D, T)."""
    if hidden.ndim != 4:
        raise ShapeMismatch(f"expected a (B, L, T, D) layer stack, got {hidden.shape}")
    return hidden.permute(0, 1, 3, 2)


class GmlpBlock:
    """Pre-norm gMLP block with a spatial gating unit along the token axis."""

    def __init__(self, state: ModelState, name: str, n_tokens: int, dim: int, expansion: int,
                 rng: np.random.Generator):
        hidden = expansion * dim
        self.half = hidden // 2
        self.n_tokens = n_tokens
        self.ln = LayerNorm(state, f"{name}.ln", dim)
        self.expand = Linear(state, f"{name}.expand", dim, hidden, rng)
        self.gate_ln = LayerNorm(state, f"{name}.gate_ln", self.half)
        eps = 1e-3 / n_tokens
        self.spatial_w = state.param(f"{name}.spatial_w", lambda: rng.uniform(-eps, eps, (n_tokens, n_tokens)))
        self.spatial_b = state.param(f"{name}.spatial_b", lambda: np.ones((n_tokens, 1)))
        self.project = Linear(state, f"{name}.project", self.half, dim, rng)

    def gate(self, v: Tensor) -> Tensor:
        return self.spatial_w @ self.gate_ln(v) + self.spatial_b

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.n_tokens:
            raise ShapeMismatch(f"gMLP expects (B, {self.n_tokens}, d), got {x.shape}")
        z = F.gelu(self.expand(self.ln(x)))
        u, v = z[..., :self.half], z[..., self.half:]
        return x + self.project(u * self.gate(v))


class Clmsa:
    def __init__(self, state: ModelState, cfg: ClmsaConfig, n_layers: int, rng: np.random.Generator,
                 prefix: str = "clmsa"):
        self.cfg = cfg
        self.n_layers = n_layers
        chans = (n_layers,) + cfg.channel_pyramid
        self.convs = [Conv3x3(state, f"{prefix}.conv{i}", chans[i], chans[i + 1], rng)
                      for i in range(len(cfg.channel_pyramid))]
        self.norms = [BatchNorm(state, f"{prefix}.bn{i}", chans[i + 1]) for i in range(len(cfg.channel_pyramid))]
        self.proj = Linear(state, f"{prefix}.proj", cfg.flat_width, cfg.proj_dim, rng)
        self.gmlp = GmlpBlock(state, f"{prefix}.gmlp", cfg.pool_out[0], cfg.proj_dim, cfg.gmlp_expansion, rng)

    def conv_pyramid(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.n_layers:
            raise ShapeMismatch(f"conv pyramid expects (B, {self.n_layers}, D, T), got {x.shape}")
        for conv, bn in zip(self.convs, self.norms):
            x = F.relu(bn(conv(x), training))
        return x

    def pool_project(self, x: Tensor, trace: dict | None = None) -> Tensor:
        b, c = x.shape[:2]
        p, q = self.cfg.pool_out
        pooled = F.adaptive_avg_pool2d(x, (p, q))
        # token axis forward, then channel-major flattening within each token
        flat = pooled.permute(0, 2, 1, 3).reshape(b, p, c * q)
        out = self.proj(flat)
        if trace is not None:
            trace.update(pooled=pooled.shape, flat=flat.shape, projected=out.shape)
        return out

    def forward(self, hidden: Tensor, training: bool = False, trace: dict | None = None) -> Tensor:
        """Layer stack (B, L, T, D) -> f_url (B, proj_dim)."""
        x = stack_and_permute(hidden)
        if trace is not None:
            trace["permuted"] = x.shape
        x = self.conv_pyramid(x, training)
        if trace is not None:
            trace["conv"] = x.shape
        x = self.gmlp(self.pool_project(x, trace))
        if trace is not None:
            trace["gmlp"] = x.shape
        f_url = x.mean(axis=1)
        if trace is not None:
            trace["f_url"] = f_url.shape
        return f_url

    __call__ = forward
