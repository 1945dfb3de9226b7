"""IP branch and blockwise multimodal coupling of URL and IP features,
followed by the classification head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .kernel import ModelState, Tensor
from .kernel import functional as F
from .kernel.layers import BatchNorm, Linear


@dataclass(frozen=True)
class BmmcConfig:
    block_size: int = 16
    alpha_min: float = 0.1
    block_dropout: float = 0.1
    n_classes: int = 2
    context_dim: int = 32

    def __post_init__(self):
        if self.block_size < 1 or self.context_dim < 1:
            raise ConfigError("block_size and context_dim must be >= 1")
        if not 0.0 <= self.alpha_min < 1.0:
            raise ConfigError(f"alpha_min must be in [0, 1), got {self.alpha_min}")
        if not 0.0 <= self.block_dropout < 1.0:
            raise ConfigError(f"block_dropout must be in [0, 1), got {self.block_dropout}")
        if self.n_classes not in (2, 3):
            raise ConfigError(f"n_classes must be 2 or 3, got {self.n_classes}")

    def to_dict(self) -> dict:
        return asdict(self)


def ip_branch(ip_feat: Tensor, weight: Tensor) -> Tensor:
    """f_ip = relu(IP_embed @ W_ip)."""
    if ip_feat.ndim != 2 or ip_feat.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"IP features {ip_feat.shape} do not match W_ip {weight.shape}")
    return F.relu(ip_feat @ weight)


@dataclass
class ModalityBlocks:
    blocks: list[Tensor]          # per modality (B, N_m, C_b, D_ext)
    channels: list[int]           # original C_m
    block_size: int

    @property
    def n_blocks(self) -> list[int]:
        return [b.shape[1] for b in self.blocks]

    def pad_mask(self, m: int) -> np.ndarray:
        """True on padded channels of modality ``m``, shape (N_m, C_b)."""
        n = self.blocks[m].shape[1]
        return (np.arange(n * self.block_size) >= self.channels[m]).reshape(n, self.block_size)


def partition_blocks(features: list[Tensor], block_size: int) -> ModalityBlocks:
    """Zero-pad each (B, C_m, D_ext) feature to a multiple of ``block_size``
    channels and split into (B, N_m, C_b, D_ext) blocks."""
    blocks, channels = [], []
    for x in features:
        if x.ndim != 3:
            raise ShapeMismatch(f"expected (B, C, D_ext) features, got {x.shape}")
        b, c, d = x.shape
        n = math.ceil(c / block_size)
        padded = F.pad_axis(x, axis=1, after=n * block_size - c)
        blocks.append(padded.reshape(b, n, block_size, d))
        channels.append(c)
    return ModalityBlocks(blocks, channels, block_size)


def global_context(mb: ModalityBlocks) -> Tensor:
    """Sum of blocks per modality, averaged over D_ext, summed over modalities -> (B, C_b)."""
    if not mb.blocks:
        raise ShapeMismatch("need at least one modality")
    g = None
    for blk in mb.blocks:
        gm = blk.sum(axis=1).mean(axis=2)
        g = gm if g is None else g + gm
    return g


def rescale_attention(scores: Tensor, alpha_min: float) -> tuple[Tensor, Tensor]:
    """Softmax over all blocks, then affine map into [alpha_min, 1].

    Returns (alpha, softmax) so the pre-rescale distribution can be inspected.
    """
    probs = F.softmax(scores, axis=-1)
    return probs * (1.0 - alpha_min) + alpha_min, probs


def sample_block_mask(shape: tuple[int, int], p: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(1 - p) keep mask drawn per (example, block)."""
    return (rng.random(shape) >= p).astype(np.float64)


def apply_block_dropout(mb: ModalityBlocks, alpha: Tensor, p: float, rng: np.random.Generator | None,
                        training: bool) -> list[Tensor]:
    """Scale every block by alpha (and a keep mask in training, without
    rescaling) and reshape back to (B, C_m, D_ext), dropping the padding."""
    total = sum(mb.n_blocks)
    if alpha.shape[-1] != total:
        raise ShapeMismatch(f"alpha has {alpha.shape[-1]} entries for {total} blocks")
    weights = alpha
    if training and p > 0:
        weights = alpha * sample_block_mask(alpha.shape, p, rng).astype(alpha.dtype)
    outs, start = [], 0
    for blk, c in zip(mb.blocks, mb.channels):
        b, n, cb, d = blk.shape
        w = weights[:, start:start + n].reshape(b, n, 1, 1)
        start += n
        outs.append((blk * w).reshape(b, n * cb, d)[:, :c, :])
    return outs


@dataclass
class FusedOutput:
    url: Tensor
    ip: Tensor
    alpha: Tensor
    probs: Tensor
    logits: Tensor


class Bmmc:
    """IP branch + coupler + concat/affine head.

    Both modalities enter as (B, d_f, 1) so blocks are channel groups of the
    two feature vectors.
    """

    def __init__(self, state: ModelState, cfg: BmmcConfig, feat_dim: int, ip_dim: int,
                 rng: np.random.Generator, prefix: str = "bmmc"):
        self.cfg = cfg
        self.feat_dim = feat_dim
        self.w_ip = state.param(f"{prefix}.ip_branch.weight",
                                lambda: rng.normal(0.0, np.sqrt(2.0 / ip_dim), (ip_dim, feat_dim)))
        n_total = 2 * math.ceil(feat_dim / cfg.block_size)
        # followed by batch norm, so a bias would be redundant
        self.joint = Linear(state, f"{prefix}.joint", cfg.block_size, cfg.context_dim, rng, bias=False)
        self.joint_bn = BatchNorm(state, f"{prefix}.joint_bn", cfg.context_dim)
        self.score = Linear(state, f"{prefix}.score", cfg.context_dim, n_total, rng)
        self.head = Linear(state, f"{prefix}.head", 2 * feat_dim, cfg.n_classes, rng)

    def context(self, mb: ModalityBlocks, training: bool) -> Tensor:
        return F.relu(self.joint_bn(self.joint(global_context(mb)), training))

    def forward(self, f_url: Tensor, ip_feat: Tensor, training: bool = False,
                rng: np.random.Generator | None = None, use_ip: bool = True) -> FusedOutput:
        if f_url.ndim != 2 or f_url.shape[1] != self.feat_dim:
            raise ShapeMismatch(f"f_url must be (B, {self.feat_dim}), got {f_url.shape}")
        f_ip = ip_branch(ip_feat, self.w_ip)
        if not use_ip:
            f_ip = Tensor(np.zeros(f_ip.shape, dtype=f_url.dtype))
        b, d = f_url.shape
        mb = partition_blocks([f_url.reshape(b, d, 1), f_ip.reshape(b, d, 1)], self.cfg.block_size)
        alpha, probs = rescale_attention(self.score(self.context(mb, training)), self.cfg.alpha_min)
        x_url, x_ip = apply_block_dropout(mb, alpha, self.cfg.block_dropout, rng, training)
        x_url, x_ip = x_url.reshape(b, d), x_ip.reshape(b, d)
        logits = classify(x_url, x_ip, self.head)
        return FusedOutput(x_url, x_ip, alpha, probs, logits)

    __call__ = forward


def classify(x_url: Tensor, x_ip: Tensor, head: Linear) -> Tensor:
    if x_url.shape != x_ip.shape:
        raise ShapeMismatch(f"modality shapes differ: {x_url.shape} vs {x_ip.shape}")
    return head(F.concat([x_url, x_ip], axis=1))
