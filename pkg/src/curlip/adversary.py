"""Compound-attack adversarial URLs: evasion characters between subword
pieces of the registrable domain label."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoDomain
from .ip_features import IPv4, derive_ip_from_hash, parse_ipv4
from .errors import BadIp
from .tokenizer import Vocab
from .url_corpus import Dataset, Label, UrlRecord, parse_url


@dataclass(frozen=True)
class AdversarialSample:
    original: UrlRecord
    perturbed_url: str
    # offsets of the inserted characters inside perturbed_url (UTF-8 bytes)
    inserted_positions: tuple[int, ...]
    pseudo_ip: IPv4
    perturbed: bool = True

    def to_record(self) -> UrlRecord:
        return parse_url(self.perturbed_url).with_meta(self.pseudo_ip, self.original.label)


def _is_ip_literal(host: str) -> bool:
    try:
        parse_ipv4(host)
    except BadIp:
        return False
    return True


def perturb_domain(rec: UrlRecord, vocab: Vocab, evasion_char: str = "-", seed: int = 0,
                   max_insertions: int | None = None) -> AdversarialSample:
    """Insert ``evasion_char`` at internal subword boundaries of the
    second-level label.

    Boundaries next to an existing '-' or '.' and boundaries that would split
    a multi-byte UTF-8 character are skipped.  With ``max_insertions`` set, a
    seeded subset of the boundaries is used.  A label that segments into a
    single piece comes back unchanged with ``perturbed=False``.
    """
    labels = rec.host.split(".")
    if len(labels) < 2 or not labels[-2] or _is_ip_literal(rec.host):
        raise NoDomain(f"no registrable label in host {rec.host!r}")
    raw_b = rec.raw.encode("utf-8")
    host_start = len(rec.raw[: rec.host_span[0]].encode("utf-8"))
    host_end = len(rec.raw[: rec.host_span[1]].encode("utf-8"))
    host_b = raw_b[host_start:host_end]
    sld_end = host_b.rfind(b".")
    sld_start = host_b.rfind(b".", 0, sld_end) + 1
    sld = host_b[sld_start:sld_end].lower()
    evasion = evasion_char.encode("utf-8")

    offsets, pos = [], 0
    for piece_id in vocab.segment(sld)[:-1]:
        pos += len(vocab.pieces[piece_id])
        left, right = sld[pos - 1:pos], sld[pos:pos + 1]
        if left in (b"-", b".") or right in (b"-", b".") or (right[0] & 0xC0) == 0x80:
            continue
        offsets.append(pos)

    if max_insertions is not None and len(offsets) > max_insertions:
        pick = np.random.default_rng(seed).choice(len(offsets), size=max_insertions, replace=False)
        offsets = sorted(offsets[i] for i in pick)

    base = host_start + sld_start
    out = bytearray(raw_b)
    inserted = []
    for k, off in enumerate(offsets):
        at = base + off + k * len(evasion)
        out[at:at] = evasion
        inserted.append(at)
    perturbed = out.decode("utf-8")
    return AdversarialSample(rec, perturbed, tuple(inserted), derive_ip_from_hash(perturbed),
                             perturbed=bool(inserted))


def remove_insertions(sample: AdversarialSample, evasion_char: str = "-") -> str:
    """Undo ``perturb_domain`` using the recorded insertion offsets."""
    buf = bytearray(sample.perturbed_url.encode("utf-8"))
    width = len(evasion_char.encode("utf-8"))
    for at in reversed(sample.inserted_positions):
        del buf[at:at + width]
    return buf.decode("utf-8")


@dataclass(frozen=True)
class AdversarialSet:
    dataset: Dataset
    samples: tuple[AdversarialSample, ...]
    skipped: int


def build_adversarial_set(ds: Dataset, vocab: Vocab, fraction_malicious: float, seed: int = 0,
                          evasion_char: str = "-", max_insertions: int | None = None) -> AdversarialSet:
    """Append perturbed copies of a seeded ``floor(fraction * n)`` subset of
    the non-benign records.

    Records whose host has no registrable label, or whose label does not
    split, are skipped and counted.  The output keeps every input record in
    order (origin ``clean``) followed by the adversarial ones (origin
    ``adversarial``) in input order.
    """
    if not 0.0 <= fraction_malicious <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction_malicious}")
    bad = [i for i, r in enumerate(ds.records) if r.label is not None and r.label != Label.BENIGN]
    if not bad:
        raise ValueError("dataset has no malicious records")
    n_pick = int(np.floor(fraction_malicious * len(bad) + 1e-9))
    chosen = sorted(np.random.default_rng(seed).permutation(bad)[:n_pick].tolist())

    samples, skipped = [], 0
    for k, idx in enumerate(chosen):
        try:
            s = perturb_domain(ds.records[idx], vocab, evasion_char, seed=seed + k,
                               max_insertions=max_insertions)
        except NoDomain:
            skipped += 1
            continue
        if not s.perturbed:
            skipped += 1
            continue
        samples.append(s)

    records = list(ds.records) + [s.to_record() for s in samples]
    base_origins = list(ds.origins) if ds.origins else ["clean"] * len(ds)
    origins = base_origins + ["adversarial"] * len(samples)
    out = Dataset.from_records(records, ds.source_path, ds.skipped, origins)
    return AdversarialSet(out, tuple(samples), skipped)
