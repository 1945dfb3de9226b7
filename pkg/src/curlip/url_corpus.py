"""URL parsing, CSV ingestion, corpus statistics and deterministic splits."""

from __future__ import annotations

import csv
import enum
import ipaddress
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BadIp, BadRatios, LabelError, MalformedUrl, SchemaError
from .ip_features import IPv4, ip_class, parse_ipv4


class Label(enum.Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    PHISHING = "phishing"

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise LabelError(f"unknown label {text!r}") from None

    def __str__(self) -> str:
        return self.value


class TldKind(enum.Enum):
    COM = "com"
    CC_TLD = "cctld"
    OTHER_GTLD = "other_gtld"


_SCHEME_RE = re.compile(r"^([A-Za-z][A-Za-z0-9+.\-]*)://")
_ILLEGAL_HOST = re.compile(r"[\s\x00-\x1f\x7f]")


def tld_kind(tld: str) -> TldKind:
    """Three-way taxonomy: exactly "com", any two-letter TLD, everything else."""
    if tld == "com":
        return TldKind.COM
    if len(tld) == 2 and tld.isascii() and tld.isalpha():
        return TldKind.CC_TLD
    return TldKind.OTHER_GTLD


@dataclass(frozen=True)
class UrlRecord:
    raw: str
    scheme: str
    host: str
    tld: str
    tld_kind: TldKind
    path_query: str
    ip: IPv4 | None = None
    label: Label | None = None
    # [start, end) character span of the host inside ``raw``
    host_span: tuple[int, int] = (0, 0)

    def with_meta(self, ip: IPv4 | None, label: Label | None) -> "UrlRecord":
        return UrlRecord(self.raw, self.scheme, self.host, self.tld, self.tld_kind,
                         self.path_query, ip, label, self.host_span)


def parse_url(raw: str) -> UrlRecord:
    """Split ``raw`` into scheme, host, TLD and the verbatim remainder.

    The scheme defaults to ``http``.  The authority ends at the first ``/``,
    ``?`` or ``#``; user-info and port are stripped from the host, which is
    lowercased.  ``path_query`` is everything after the host and port.
    """
    if not raw:
        raise MalformedUrl("empty URL")
    m = _SCHEME_RE.match(raw)
    if m:
        scheme = m.group(1).lower()
        start = m.end()
    else:
        scheme = "http"
        start = 0

    end = len(raw)
    for sep in "/?#":
        pos = raw.find(sep, start)
        if pos != -1:
            end = min(end, pos)
    authority = raw[start:end]
    at = authority.rfind("@")
    host_start = start + at + 1 if at != -1 else start
    colon = raw.find(":", host_start, end)
    host_end = colon if colon != -1 else end

    host_raw = raw[host_start:host_end]
    if not host_raw or host_raw.strip(".") == "":
        raise MalformedUrl(f"no host in {raw!r}")
    if _ILLEGAL_HOST.search(host_raw):
        raise MalformedUrl(f"illegal character in host of {raw!r}")
    host = host_raw.lower()
    if host.endswith("."):
        host = host[:-1]
        host_end -= 1
    tld = host.rsplit(".", 1)[-1]
    if not tld:
        raise MalformedUrl(f"empty label at end of host {host!r}")
    return UrlRecord(raw=raw, scheme=scheme, host=host, tld=tld, tld_kind=tld_kind(tld),
                     path_query=raw[end:], host_span=(host_start, host_end))


@dataclass(frozen=True)
class Dataset:
    records: tuple[UrlRecord, ...]
    source_path: str = ""
    class_counts: Mapping[Label, int] = field(default_factory=dict)
    skipped: int = 0
    # provenance per record ("clean" / "adversarial"), empty when not tracked
    origins: tuple[str, ...] = ()

    @classmethod
    def from_records(cls, records: Iterable[UrlRecord], source_path: str = "", skipped: int = 0,
                     origins: Sequence[str] = ()) -> "Dataset":
        records = tuple(records)
        counts = Counter(r.label for r in records if r.label is not None)
        return cls(records, source_path, {lab: counts.get(lab, 0) for lab in Label}, skipped, tuple(origins))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        origins = tuple(self.origins[i] for i in indices) if self.origins else ()
        return Dataset.from_records((self.records[i] for i in indices), self.source_path, 0, origins)


HEADER = ["url", "ip", "label"]


def load_dataset(path: str | Path, format: str = "csv") -> Dataset:
    """Read a ``url,ip,label`` CSV; malformed URL rows are skipped and counted."""
    if format != "csv":
        raise SchemaError(f"unsupported format {format!r}")
    path = Path(path)
    records: list[UrlRecord] = []
    origins: list[str] = []
    skipped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != HEADER:
            raise SchemaError(f"{path}: expected header {','.join(HEADER)}, got {header}")
        has_origin = len(header) > 3 and header[3].strip().lower() == "origin"
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 3:
                raise SchemaError(f"{path}: row {reader.line_num} has {len(row)} fields")
            label = Label.parse(row[2])
            try:
                rec = parse_url(row[0].strip())
                ip = parse_ipv4(row[1].strip()) if row[1].strip() else None
            except (MalformedUrl, BadIp):
                skipped += 1
                continue
            records.append(rec.with_meta(ip, label))
            if has_origin:
                origins.append(row[3].strip() if len(row) > 3 else "clean")
    return Dataset.from_records(records, str(path), skipped, origins)


def write_dataset(ds: Dataset, path: str | Path, with_origin: bool = False) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER + (["origin"] if with_origin else []))
        for i, r in enumerate(ds.records):
            row = [r.raw, str(r.ip) if r.ip else "", str(r.label) if r.label else ""]
            if with_origin:
                row.append(ds.origins[i] if ds.origins else "clean")
            w.writerow(row)


# -- statistics ---------------------------------------------------------------

class AsnMap:
    """Longest-prefix lookup from IPv4 CIDR prefixes to ASN ids."""

    def __init__(self, prefixes: Mapping[str, str]):
        self._nets = sorted(((ipaddress.IPv4Network(p, strict=False), asn) for p, asn in prefixes.items()),
                            key=lambda na: -na[0].prefixlen)

    @classmethod
    def load(cls, path: str | Path) -> "AsnMap":
        entries = {}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0].strip().lower() == "prefix":
                    continue
                entries[row[0].strip()] = row[1].strip()
        return cls(entries)

    def lookup(self, ip: IPv4) -> str | None:
        addr = ipaddress.IPv4Address(str(ip))
        for net, asn in self._nets:
            if addr in net:
                return asn
        return None


IP_CLASS_BUCKETS = ("A", "B", "C", "D/E")


def dataset_stats(ds: Dataset, asn_map: AsnMap | None = None, top_k: int = 5) -> dict:
    """Per-label TLD-kind shares (percent), IP class counts and top ASNs.

    Returns a JSON-ready dict with keys ``tld_shares``, ``ip_class_counts`` and
    ``top_asn``, each mapping label name to its statistics.
    """
    by_label: dict[Label, list[UrlRecord]] = {lab: [] for lab in Label}
    for r in ds.records:
        if r.label is not None:
            by_label[r.label].append(r)

    tld_shares, ip_counts, top_asn = {}, {}, {}
    for lab, recs in by_label.items():
        kinds = Counter(r.tld_kind for r in recs)
        n = len(recs)
        tld_shares[lab.value] = {k.value: (100.0 * kinds.get(k, 0) / n if n else 0.0) for k in TldKind}
        classes = Counter()
        asns = Counter()
        for r in recs:
            if r.ip is None:
                continue
            c = ip_class(r.ip)
            classes["D/E" if c in ("D", "E") else c] += 1
            if asn_map is not None:
                asn = asn_map.lookup(r.ip)
                if asn is not None:
                    asns[asn] += 1
        ip_counts[lab.value] = {b: classes.get(b, 0) for b in IP_CLASS_BUCKETS}
        ranked = sorted(asns.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
        top_asn[lab.value] = [[asn, cnt] for asn, cnt in ranked]
    return {"tld_shares": tld_shares, "ip_class_counts": ip_counts, "top_asn": top_asn}


# -- splits -------------------------------------------------------------------

def split_dataset(ds: Dataset, ratios: Sequence[float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle into (train, val, test).

    val and test sizes are floored; the leftover rows go to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return tuple(ds.subset([int(i) for i in part]) for part in parts)  # type: ignore[return-value]


__all__ = [
    "AsnMap", "Dataset", "Label", "TldKind", "UrlRecord", "dataset_stats",
    "load_dataset", "parse_url", "split_dataset", "tld_kind", "write_dataset",
]
