"""Byte-level BPE vocabulary, fixed-length encoding and BERT-style masking."""

from __future__ import annotations

import enum
import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import NoMaskablePositions, VocabTooSmall

PAD, UNK, CLS, SEP, MASK = range(5)
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
N_SPECIAL = len(SPECIALS)
BYTE_OFFSET = N_SPECIAL
MIN_VOCAB = N_SPECIAL + 256
MERGES_SENTINEL = "#MERGES"


@lru_cache(maxsize=1)
def _byte_to_char() -> dict[int, str]:
    """GPT-2 style reversible map from bytes to printable characters."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) \
        + list(range(ord("®"), ord("ÿ") + 1))
    chars = keep[:]
    n = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            chars.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(keep, chars)}


def _piece_to_text(piece: bytes) -> str:
    table = _byte_to_char()
    return "".join(table[b] for b in piece)


def _text_to_piece(text: str) -> bytes:
    inv = {c: b for b, c in _byte_to_char().items()}
    return bytes(inv[c] for c in text)


class Vocab:
    """Specials, 256 byte pieces and an ordered merge list.

    ``pieces[i]`` is the byte string of id ``i`` (``None`` for specials);
    ``merges[k]`` is the (left, right) id pair that produced id 261 + k.
    """

    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        self._cache: dict[bytes, tuple[int, ...]] = {}
        self.pieces: list[bytes | None] = [None] * N_SPECIAL + [bytes([b]) for b in range(256)]
        self.merges: list[tuple[int, int]] = []
        self.rank: dict[tuple[int, int], int] = {}
        self.id_of: dict[bytes | str, int] = {s: i for i, s in enumerate(SPECIALS)}
        for b in range(256):
            self.id_of[bytes([b])] = BYTE_OFFSET + b
        for left, right in merges:
            self.add_merge(left, right)

    def add_merge(self, left: int, right: int) -> int:
        self._cache.clear()
        new_id = len(self.pieces)
        piece = self.pieces[left] + self.pieces[right]
        self.pieces.append(piece)
        self.rank[(left, right)] = len(self.merges)
        self.merges.append((left, right))
        self.id_of.setdefault(piece, new_id)
        return new_id

    def __len__(self) -> int:
        return len(self.pieces)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.merges == other.merges

    def segment(self, data: bytes) -> tuple[int, ...]:
        """Apply merges in rank order (lowest rank first) to a byte string."""
        hit = self._cache.get(data)
        if hit is not None:
            return hit
        ids = [BYTE_OFFSET + b for b in data]
        while len(ids) > 1:
            best_rank, best_pair = None, None
            for pair in zip(ids, ids[1:]):
                r = self.rank.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_pair = r, pair
            if best_pair is None:
                break
            new_id = N_SPECIAL + 256 + best_rank
            merged, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best_pair:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        out = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[data] = out
        return out

    def decode(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.pieces[i] for i in ids if i >= N_SPECIAL)

    # -- persistence -----------------------------------------------------
    def to_text(self) -> str:
        lines = list(SPECIALS)
        lines += [_piece_to_text(p) for p in self.pieces[N_SPECIAL:]]
        lines.append(MERGES_SENTINEL)
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        lines = text.rstrip("\n").split("\n")
        cut = len(lines) - 1 - lines[::-1].index(MERGES_SENTINEL)
        merges = [tuple(int(t) for t in ln.split()) for ln in lines[cut + 1:] if ln.strip()]
        vocab = cls(merges)
        pieces = lines[:cut]
        if len(pieces) != len(vocab) or tuple(pieces[:N_SPECIAL]) != SPECIALS:
            raise ValueError("vocab file pieces do not match its merge list")
        for i, text_piece in enumerate(pieces[N_SPECIAL:], start=N_SPECIAL):
            if _text_to_piece(text_piece) != vocab.pieces[i]:
                raise ValueError(f"vocab piece {i} disagrees with merge history")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _tiebreak(seed: int, pair: tuple[int, int]) -> bytes:
    return hashlib.blake2b(f"{seed}:{pair[0]}:{pair[1]}".encode(), digest_size=8).digest()


def _pairs(seq: Sequence[int]) -> Counter:
    return Counter(zip(seq, seq[1:]))


def train_vocab(corpus: Iterable[str], vocab_size: int, seed: int = 0) -> Vocab:
    """Greedy byte-pair merging until ``vocab_size`` pieces exist.

    The most frequent adjacent pair is merged each round; equal counts are
    ordered by a seeded hash.  Training stops early when no pair is left.
    """
    if vocab_size < MIN_VOCAB:
        raise VocabTooSmall(f"vocab_size must be >= {MIN_VOCAB}, got {vocab_size}")
    words = Counter(s.encode("utf-8") for s in corpus)
    seqs = [[BYTE_OFFSET + b for b in w] for w in words]
    counts = list(words.values())

    pair_counts: Counter = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, seq in enumerate(seqs):
        for pair, c in _pairs(seq).items():
            pair_counts[pair] += c * counts[wi]
            where[pair].add(wi)

    vocab = Vocab()
    while len(vocab) < vocab_size and pair_counts:
        top = max(pair_counts.values())
        best = min((p for p, c in pair_counts.items() if c == top), key=lambda p: _tiebreak(seed, p))
        new_id = vocab.add_merge(*best)
        for wi in list(where.pop(best, ())):
            seq = seqs[wi]
            old = _pairs(seq)
            if best not in old:
                continue
            merged, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == best[0] and seq[i + 1] == best[1]:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(seq[i])
                    i += 1
            seqs[wi] = merged
            new = _pairs(merged)
            for pair, c in old.items():
                pair_counts[pair] -= c * counts[wi]
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            for pair, c in new.items():
                pair_counts[pair] += c * counts[wi]
                where[pair].add(wi)
    return vocab


# -- sequences ---------------------------------------------------------------

@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    attn_mask: tuple[int, ...]


class ReplaceKind(enum.Enum):
    MASK = "mask"
    RANDOM = "random"
    KEEP = "keep"


@dataclass(frozen=True)
class MaskedSeq:
    ids: tuple[int, ...]
    attn_mask: tuple[int, ...]
    mask_positions: tuple[int, ...]
    original_ids: tuple[int, ...]
    kinds: tuple[ReplaceKind, ...]

    def restore(self) -> TokenSeq:
        ids = list(self.ids)
        for pos, orig in zip(self.mask_positions, self.original_ids):
            ids[pos] = orig
        return TokenSeq(tuple(ids), self.attn_mask)


def encode(url: str, vocab: Vocab, max_len: int) -> TokenSeq:
    """[CLS] pieces [SEP] [PAD]...; pieces are truncated so SEP always fits."""
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    pieces = vocab.segment(url.encode("utf-8"))[: max_len - 2]
    ids = (CLS,) + pieces + (SEP,)
    n = len(ids)
    return TokenSeq(ids + (PAD,) * (max_len - n), (1,) * n + (0,) * (max_len - n))


def encode_batch(urls: Sequence[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [encode(u, vocab, max_len) for u in urls]
    return (np.array([s.ids for s in seqs], dtype=np.int64).reshape(len(seqs), max_len),
            np.array([s.attn_mask for s in seqs], dtype=np.int64).reshape(len(seqs), max_len))


def maskable_positions(seq: TokenSeq) -> list[int]:
    return [i for i, t in enumerate(seq.ids) if t not in (CLS, SEP, PAD)]


def mask_tokens(seq: TokenSeq, vocab_size: int, rate: float = 0.15, seed: int = 0) -> MaskedSeq:
    """Select each maskable position with probability ``rate`` (at least one),
    then replace 80% with [MASK], 10% with a random non-special id, keep 10%."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must be in (0, 1), got {rate}")
    cand = maskable_positions(seq)
    if not cand:
        raise NoMaskablePositions("sequence has only CLS/SEP/PAD tokens")
    rng = np.random.default_rng(seed)
    chosen = [p for p, u in zip(cand, rng.random(len(cand))) if u < rate]
    if not chosen:
        chosen = [cand[int(rng.integers(len(cand)))]]
    ids = list(seq.ids)
    kinds = []
    for pos in chosen:
        u = rng.random()
        if u < 0.8:
            ids[pos] = MASK
            kinds.append(ReplaceKind.MASK)
        elif u < 0.9:
            ids[pos] = int(rng.integers(N_SPECIAL, vocab_size))
            kinds.append(ReplaceKind.RANDOM)
        else:
            kinds.append(ReplaceKind.KEEP)
    return MaskedSeq(tuple(ids), seq.attn_mask, tuple(chosen),
                     tuple(seq.ids[p] for p in chosen), tuple(kinds))
