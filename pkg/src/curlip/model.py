"""End-to-end detector: encoder -> aggregator -> coupler/head, plus
fine-tuning with validation-loss model selection and batched inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bmmc import Bmmc, FusedOutput
from .clmsa import Clmsa
from .config import RunConfig
from .encoder import Encoder
from .ip_features import IpEmbedder
from .kernel import ModelState, Tensor, adamw_step, no_grad
from .kernel import functional as F
from .tokenizer import Vocab, encode_batch
from .url_corpus import Dataset, Label

log = logging.getLogger(__name__)


def label_index(label: Label, n_classes: int) -> int:
    if label is None:
        raise ValueError("record has no label")
    if n_classes == 2:
        return 0 if label is Label.BENIGN else 1
    return {Label.BENIGN: 0, Label.MALICIOUS: 1, Label.PHISHING: 2}[label]


@dataclass
class EncodedData:
    ids: np.ndarray
    attn_mask: np.ndarray
    ip: np.ndarray
    labels: np.ndarray | None

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "EncodedData":
        return EncodedData(self.ids[idx], self.attn_mask[idx], self.ip[idx],
                           None if self.labels is None else self.labels[idx])


def encode_dataset(ds: Dataset | Sequence, vocab: Vocab, cfg: RunConfig,
                   embedder: IpEmbedder | None = None) -> EncodedData:
    records = list(ds)
    embedder = embedder or IpEmbedder()
    ids, mask = encode_batch([r.raw for r in records], vocab, cfg.encoder.max_len)
    ip = embedder.batch([r.ip for r in records])
    labels = None
    if records and all(r.label is not None for r in records):
        labels = np.array([label_index(r.label, cfg.bmmc.n_classes) for r in records], dtype=np.int64)
    return EncodedData(ids, mask, ip.reshape(len(records), -1), labels)


class CurlIpModel:
    def __init__(self, state: ModelState, cfg: RunConfig, ip_dim: int = 13, seed: int = 0):
        self.state = state
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(state, cfg.encoder, rng)
        self.clmsa = Clmsa(state, cfg.clmsa, cfg.encoder.n_layers, rng)
        self.bmmc = Bmmc(state, cfg.bmmc, cfg.clmsa.proj_dim, ip_dim, rng)
        self.use_ip = cfg.train.use_ip

    def forward(self, ids, attn_mask, ip, training: bool = False,
                rng: np.random.Generator | None = None, trace: dict | None = None) -> FusedOutput:
        hidden, _ = self.encoder(ids, attn_mask, training=training, rng=rng)
        if trace is not None:
            trace["hidden"] = hidden.shape
        f_url = self.clmsa(hidden, training=training, trace=trace)
        ip_t = Tensor(np.asarray(ip, dtype=self.state.dtype))
        out = self.bmmc(f_url, ip_t, training=training, rng=rng, use_ip=self.use_ip)
        if trace is not None:
            trace["f_ip"] = out.ip.shape
            trace["logits"] = out.logits.shape
        return out

    __call__ = forward

    def loss(self, batch: EncodedData, training: bool = False, rng=None) -> Tensor:
        out = self.forward(batch.ids, batch.attn_mask, batch.ip, training, rng)
        return F.cross_entropy(out.logits, batch.labels)


def new_state(cfg: RunConfig, pretrained: ModelState | None = None) -> ModelState:
    """Fresh model state, seeded with the encoder weights of ``pretrained``."""
    state = ModelState(config=cfg.to_dict())
    if pretrained is not None:
        for name, p in pretrained.params.items():
            if name.startswith("encoder."):
                state.param(name, lambda p=p: p.data.copy(), trainable=True)
    return state


def build_model(cfg: RunConfig, state: ModelState | None = None, ip_dim: int = 13) -> CurlIpModel:
    state = state if state is not None else new_state(cfg)
    return CurlIpModel(state, cfg, ip_dim=ip_dim, seed=cfg.train.seed)


def evaluate_loss(model: CurlIpModel, data: EncodedData, batch_size: int = 64) -> float:
    """Example-weighted mean cross-entropy in inference mode."""
    total = 0.0
    with no_grad():
        for start in range(0, len(data), batch_size):
            part = data.take(slice(start, start + batch_size))
            total += float(model.loss(part).item()) * len(part)
    return total / max(len(data), 1)


def predict_proba(model: CurlIpModel, data: EncodedData, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            part = data.take(slice(start, start + batch_size))
            logits = model(part.ids, part.attn_mask, part.ip).logits
            out.append(F.softmax(logits, axis=-1).data.astype(np.float64))
    if not out:
        return np.zeros((0, model.cfg.bmmc.n_classes))
    return np.concatenate(out)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing single example joins the previous
    batch because batch norm needs at least two samples."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class FinetuneResult:
    state: ModelState
    best_epoch: int
    best_val_loss: float
    history: list[EpochRecord]


def finetune(train: EncodedData, val: EncodedData, cfg: RunConfig, state: ModelState | None = None,
             on_epoch: Callable[[EpochRecord], None] | None = None) -> FinetuneResult:
    """Train the full model on cross-entropy; keep the epoch with the lowest
    validation loss.  ``epochs=0`` returns the starting state untouched."""
    tc = cfg.train
    model = build_model(cfg, state, ip_dim=train.ip.shape[1])
    rng = np.random.default_rng(tc.seed + 17)
    best_state = model.state.copy()
    best_loss = evaluate_loss(model, val)
    best_epoch = 0
    history: list[EpochRecord] = []
    for epoch in range(1, tc.epochs + 1):
        running, seen = 0.0, 0
        for idx in batches(len(train), tc.batch_size, rng):
            part = train.take(idx)
            model.state.zero_grad()
            loss = model.loss(part, training=True, rng=rng)
            loss.backward()
            adamw_step(model.state, tc.lr, weight_decay=tc.weight_decay)
            running += float(loss.item()) * len(idx)
            seen += len(idx)
        val_loss = evaluate_loss(model, val)
        rec = EpochRecord(epoch, running / max(seen, 1), val_loss)
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f", epoch, rec.train_loss, val_loss)
        if on_epoch:
            on_epoch(rec)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = model.state.copy()
    return FinetuneResult(best_state, best_epoch, best_loss, history)
