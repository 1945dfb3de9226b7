"""Pre-norm transformer encoder with student/teacher token-contrastive
pretraining and an MLM head tied to the token embedding."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, EmptyMaskSet, ShapeMismatch
from .kernel import ModelState, Tensor, adamw_step, no_grad
from .kernel import functional as F
from .kernel.layers import LayerNorm, Linear
from .tokenizer import MaskedSeq, TokenSeq, Vocab, encode, mask_tokens

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 64
    vocab_size: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.n_layers, self.d_model, self.n_heads, self.ffn_mult) < 1 or self.max_len < 3:
            raise ConfigError(f"invalid encoder config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def desk(cls, vocab_size: int = 512, **kw) -> "EncoderConfig":
        return cls(n_layers=4, d_model=64, n_heads=4, max_len=64, vocab_size=vocab_size, **kw)

    @classmethod
    def full(cls, vocab_size: int = 512, **kw) -> "EncoderConfig":
        return cls(n_layers=12, d_model=768, n_heads=12, max_len=200, vocab_size=vocab_size, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


class Encoder:
    """Token + position embeddings followed by ``n_layers`` pre-norm blocks.

    ``forward`` returns the per-layer outputs stacked as (B, L, T, D) and the
    final layer-normed states (B, T, D).
    """

    def __init__(self, state: ModelState, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "encoder"):
        self.cfg = cfg
        d, v, t = cfg.d_model, cfg.vocab_size, cfg.max_len
        self.tok = state.param(f"{prefix}.tok_emb", lambda: rng.normal(0.0, 0.02, (v, d)))
        self.pos = state.param(f"{prefix}.pos_emb", lambda: rng.normal(0.0, 0.02, (t, d)))
        self.layers = []
        for i in range(cfg.n_layers):
            p = f"{prefix}.layers.{i}"
            self.layers.append({
                "ln1": LayerNorm(state, f"{p}.ln1", d),
                "q": Linear(state, f"{p}.attn.q", d, d, rng),
                # a key bias shifts every score of a query equally, so it has no gradient
                "k": Linear(state, f"{p}.attn.k", d, d, rng, bias=False),
                "v": Linear(state, f"{p}.attn.v", d, d, rng),
                "o": Linear(state, f"{p}.attn.o", d, d, rng),
                "ln2": LayerNorm(state, f"{p}.ln2", d),
                "up": Linear(state, f"{p}.ffn.up", d, cfg.ffn_mult * d, rng),
                "down": Linear(state, f"{p}.ffn.down", cfg.ffn_mult * d, d, rng),
            })
        self.final_ln = LayerNorm(state, f"{prefix}.final_ln", d)

    def _attention(self, layer, x: Tensor, keep: np.ndarray, training: bool, rng) -> Tensor:
        b, t, d = x.shape
        h = self.cfg.n_heads
        dh = d // h

        def heads(z: Tensor) -> Tensor:
            return z.reshape(b, t, h, dh).permute(0, 2, 1, 3)

        q, k, v = heads(layer["q"](x)), heads(layer["k"](x)), heads(layer["v"](x))
        scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = F.softmax(F.masked_fill(scores, keep), axis=-1)
        attn = F.dropout(attn, self.cfg.dropout, rng, training)
        ctx = (attn @ v).permute(0, 2, 1, 3).reshape(b, t, d)
        return layer["o"](ctx)

    def forward(self, ids: np.ndarray, attn_mask: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        ids = np.asarray(ids, dtype=np.int64)
        attn_mask = np.asarray(attn_mask)
        if ids.ndim != 2 or ids.shape[1] != self.cfg.max_len or attn_mask.shape != ids.shape:
            raise ShapeMismatch(f"expected ids/mask of shape (B, {self.cfg.max_len}), "
                                f"got {ids.shape} and {attn_mask.shape}")
        present = attn_mask.astype(bool)
        # rows with no real token would softmax over nothing; let them attend everywhere
        keep = (present | ~present.any(axis=1, keepdims=True))[:, None, None, :]
        scale = present[..., None].astype(self.tok.dtype)
        x = F.embedding(self.tok, ids) * scale + self.pos
        x = F.dropout(x, self.cfg.dropout, rng, training)
        outputs = []
        for layer in self.layers:
            x = x + F.dropout(self._attention(layer, layer["ln1"](x), keep, training, rng),
                              self.cfg.dropout, rng, training)
            ff = layer["down"](F.gelu(layer["up"](layer["ln2"](x))))
            x = x + F.dropout(ff, self.cfg.dropout, rng, training)
            outputs.append(x)
        return F.stack(outputs, axis=1), self.final_ln(x)

    __call__ = forward


class MlmHead:
    """Logits over the vocabulary using the (tied) token embedding."""

    def __init__(self, state: ModelState, encoder: Encoder, prefix: str = "mlm"):
        self.encoder = encoder
        self.bias = state.param(f"{prefix}.bias", lambda: np.zeros(encoder.cfg.vocab_size))

    def __call__(self, states: Tensor) -> Tensor:
        return states @ self.encoder.tok.permute(1, 0) + self.bias


# -- losses --------------------------------------------------------------------

def _positions(mask_positions: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    if any(len(m) == 0 for m in mask_positions):
        raise EmptyMaskSet("every example needs at least one masked position")
    rows = np.concatenate([np.full(len(m), b) for b, m in enumerate(mask_positions)]).astype(np.int64)
    cols = np.concatenate([np.asarray(m) for m in mask_positions]).astype(np.int64)
    return rows, cols


def tacl_loss(student_final: Tensor, teacher_final: Tensor | np.ndarray, attn_mask: np.ndarray,
              mask_positions: Sequence[Sequence[int]], tau: float = 0.1) -> Tensor:
    """Token-aware contrastive loss between student and teacher final states.

    For each masked position i the positive is the teacher state at i and the
    candidates are all teacher states at non-PAD positions of the same
    sequence.  Summed over masked positions, averaged over the batch.  The
    teacher side is treated as a constant.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    teacher = teacher_final.detach() if isinstance(teacher_final, Tensor) else Tensor(teacher_final)
    if student_final.shape != teacher.shape:
        raise ShapeMismatch(f"student {student_final.shape} vs teacher {teacher.shape}")
    b = student_final.shape[0]
    if len(mask_positions) != b:
        raise ShapeMismatch(f"{len(mask_positions)} mask sets for batch of {b}")
    rows, cols = _positions(mask_positions)
    present = np.asarray(attn_mask).astype(bool)
    s = F.l2_normalize(student_final[rows, cols], axis=-1)             # (M, D)
    t = F.l2_normalize(teacher, axis=-1, where=present)                # (B, T, D)
    sims = (s.reshape(len(rows), 1, -1) @ t[rows].permute(0, 2, 1)).reshape(len(rows), -1) * (1.0 / tau)
    logp = F.log_softmax(F.masked_fill(sims, present[rows]), axis=-1)  # (M, T)
    return -logp[np.arange(len(rows)), cols].sum() * (1.0 / b)


def mlm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the masked positions.

    ``logits`` holds one row per masked position (M, V).
    """
    if logits.shape[0] == 0:
        raise EmptyMaskSet("no masked positions")
    return F.cross_entropy(logits, targets)


def total_pretrain_loss(mlm: Tensor, tacl: Tensor, lam: float = 1.0) -> Tensor:
    if lam < 0:
        raise ValueError(f"loss weight must be non-negative, got {lam}")
    return mlm if lam == 0 else mlm + tacl * lam


# -- pretraining ---------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    lam: float = 1.0
    tau: float = 0.1
    mask_rate: float = 0.15
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 1
    max_steps: int | None = None
    teacher_ema: float | None = None


def init_pretrain_state(cfg: EncoderConfig, seed: int) -> tuple[ModelState, Encoder, MlmHead]:
    state = ModelState(config={"encoder": cfg.to_dict()})
    rng = np.random.default_rng(seed)
    enc = Encoder(state, cfg, rng)
    return state, enc, MlmHead(state, enc)


def make_teacher(student: ModelState, cfg: EncoderConfig) -> tuple[ModelState, Encoder]:
    """Frozen copy of the student's encoder parameters."""
    teacher = student.copy()
    for name in [n for n in teacher.params if not n.startswith("encoder.")]:
        del teacher.params[name]
    teacher.opt_moments.clear()
    teacher.freeze()
    return teacher, Encoder(teacher, cfg, np.random.default_rng(0))


@dataclass
class PretrainStep:
    step: int
    mlm: float
    tacl: float
    total: float


def mask_batch(seqs: Sequence[TokenSeq], vocab_size: int, rate: float,
               rng: np.random.Generator) -> list[MaskedSeq]:
    return [mask_tokens(s, vocab_size, rate, seed=int(rng.integers(2**63))) for s in seqs]


def pretrain_losses(encoder: Encoder, head: MlmHead, teacher: Encoder, masked: Sequence[MaskedSeq],
                    clean_ids: np.ndarray, attn_mask: np.ndarray, lam: float, tau: float,
                    training: bool = True, rng=None) -> tuple[Tensor, Tensor, Tensor]:
    with no_grad():
        _, teacher_final = teacher(clean_ids, attn_mask, training=False)
    ids = np.array([m.ids for m in masked], dtype=np.int64)
    positions = [m.mask_positions for m in masked]
    _, student_final = encoder(ids, attn_mask, training=training, rng=rng)
    rows, cols = _positions(positions)
    targets = np.concatenate([m.original_ids for m in masked]).astype(np.int64)
    mlm = mlm_loss(head(student_final[rows, cols]), targets)
    tacl = tacl_loss(student_final, teacher_final, attn_mask, positions, tau)
    return mlm, tacl, total_pretrain_loss(mlm, tacl, lam)


@dataclass
class PretrainResult:
    state: ModelState            # student: encoder.* and mlm.* parameters
    history: list[PretrainStep]
    teacher: ModelState
    teacher_checksum: str        # taken when the teacher was snapshotted


def pretrain(urls: Sequence[str], vocab: Vocab, cfg: EncoderConfig, pcfg: PretrainConfig, seed: int = 0,
             log_path: str | Path | None = None,
             on_step: Callable[[PretrainStep], None] | None = None) -> PretrainResult:
    """Student/teacher pretraining; only the student is updated.

    ``epochs=0`` returns the initial state.
    """
    if len(vocab) > cfg.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} pieces but encoder vocab_size is {cfg.vocab_size}")
    state, enc, head = init_pretrain_state(cfg, seed)
    teacher_state, teacher = make_teacher(state, cfg)
    teacher_checksum = teacher_state.checksum()
    rng = np.random.default_rng(seed + 1)
    seqs = [encode(u, vocab, cfg.max_len) for u in urls]
    seqs = [s for s in seqs if sum(s.attn_mask) > 2]
    history: list[PretrainStep] = []
    step = 0
    done = pcfg.max_steps is not None and pcfg.max_steps <= 0
    for _ in range(pcfg.epochs):
        if done:
            break
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), pcfg.batch_size):
            batch = [seqs[i] for i in order[start:start + pcfg.batch_size]]
            clean = np.array([s.ids for s in batch], dtype=np.int64)
            attn = np.array([s.attn_mask for s in batch], dtype=np.int64)
            masked = mask_batch(batch, cfg.vocab_size, pcfg.mask_rate, rng)
            state.zero_grad()
            mlm, tacl, total = pretrain_losses(enc, head, teacher, masked, clean, attn,
                                               pcfg.lam, pcfg.tau, True, rng)
            total.backward()
            adamw_step(state, pcfg.lr, weight_decay=pcfg.weight_decay)
            if pcfg.teacher_ema is not None:
                a = pcfg.teacher_ema
                for name, p in teacher_state.params.items():
                    p.data[...] = a * p.data + (1 - a) * state.params[name].data
            step += 1
            rec = PretrainStep(step, float(mlm.item()), float(tacl.item()), float(total.item()))
            history.append(rec)
            if on_step:
                on_step(rec)
            if step % 50 == 0:
                log.info("pretrain step %d total %.4f", step, rec.total)
            if pcfg.max_steps is not None and step >= pcfg.max_steps:
                done = True
                break
    if log_path is not None:
        write_loss_log(history, log_path)
    return PretrainResult(state, history, teacher_state, teacher_checksum)


def write_loss_log(history: Sequence[PretrainStep], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mlm", "tacl", "total"])
        for h in history:
            w.writerow([h.step, repr(h.mlm), repr(h.tacl), repr(h.total)])


def token_separation(state: ModelState, cfg: EncoderConfig, teacher_state: ModelState, urls: Sequence[str],
                     vocab: Vocab, seed: int = 0, rate: float = 0.15) -> tuple[float, float]:
    """Mean cosine of masked student states to their teacher counterparts and
    to the other non-PAD teacher states of the same sequence."""
    enc = Encoder(state, cfg, np.random.default_rng(0))
    teacher = Encoder(teacher_state, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(seed)
    seqs = [s for s in (encode(u, vocab, cfg.max_len) for u in urls) if sum(s.attn_mask) > 2]
    pos_sims, neg_sims = [], []
    with no_grad():
        for start in range(0, len(seqs), 64):
            batch = seqs[start:start + 64]
            attn = np.array([s.attn_mask for s in batch])
            masked = mask_batch(batch, cfg.vocab_size, rate, rng)
            _, tf = teacher(np.array([s.ids for s in batch]), attn)
            _, sf = enc(np.array([m.ids for m in masked]), attn)
            tn = tf.data / np.linalg.norm(tf.data, axis=-1, keepdims=True)
            sn = sf.data / np.linalg.norm(sf.data, axis=-1, keepdims=True)
            for b, m in enumerate(masked):
                real = np.flatnonzero(attn[b])
                for i in m.mask_positions:
                    cos = tn[b, real] @ sn[b, i]
                    pos_sims.append(float(cos[real == i][0]))
                    neg_sims.extend(cos[real != i].tolist())
    return float(np.mean(pos_sims)), float(np.mean(neg_sims))
