"""IPv4 parsing, classful ranges and the 13-d IP feature vector."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadIp, EmptyInput, SchemaError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

IP_CLASSES = ("A", "B", "C", "D", "E")
N_BUCKETS = 4
FEATURE_DIM = 4 + len(IP_CLASSES) + N_BUCKETS


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True, order=True)
class IPv4:
    octets: tuple[int, int, int, int]

    def __str__(self) -> str:
        return ".".join(str(o) for o in self.octets)


def parse_ipv4(text: str) -> IPv4:
    """Strict dotted quad; leading zeros are accepted, CIDR suffixes are not."""
    parts = text.split(".")
    if len(parts) != 4:
        raise BadIp(f"expected 4 fields in {text!r}")
    octets = []
    for part in parts:
        if not part or not part.isascii() or not part.isdigit():
            raise BadIp(f"non-numeric field {part!r} in {text!r}")
        val = int(part)
        if val > 255:
            raise BadIp(f"octet {val} out of range in {text!r}")
        octets.append(val)
    return IPv4(tuple(octets))


def ip_class(ip: IPv4) -> str:
    first = ip.octets[0]
    if first <= 127:
        return "A"
    if first <= 191:
        return "B"
    if first <= 223:
        return "C"
    if first <= 239:
        return "D"
    return "E"


def prefix_bucket(ip: IPv4) -> int:
    return fnv1a_64(bytes(ip.octets[:2])) % N_BUCKETS


def ip_embed_input(ip: IPv4) -> np.ndarray:
    """octets/255, class one-hot (A..E), /16-prefix bucket one-hot."""
    feat = np.zeros(FEATURE_DIM, dtype=np.float64)
    feat[:4] = np.asarray(ip.octets, dtype=np.float64) / 255.0
    feat[4 + IP_CLASSES.index(ip_class(ip))] = 1.0
    feat[4 + len(IP_CLASSES) + prefix_bucket(ip)] = 1.0
    return feat


def derive_ip_from_hash(url: str) -> IPv4:
    """Pseudo-IP whose octets are the four low-order bytes of FNV-1a(url)."""
    if not url:
        raise EmptyInput("cannot derive an IP from an empty URL")
    h = fnv1a_64(url.encode("utf-8"))
    return IPv4(tuple((h >> (8 * i)) & 0xFF for i in range(4)))


class IpEmbedder:
    """Maps optional IPs to feature rows, with an optional external table.

    Records without an IP get an all-zero row.
    """

    def __init__(self, dim: int = FEATURE_DIM, table: dict[IPv4, np.ndarray] | None = None):
        self.dim = dim
        self.table = table or {}
        if not self.table and dim != FEATURE_DIM:
            raise SchemaError(f"built-in IP features have dimension {FEATURE_DIM}, config asks for {dim}")

    @classmethod
    def from_csv(cls, path: str | Path, dim: int) -> "IpEmbedder":
        """Load ``ip,v1,...,vF`` rows replacing the built-in featurisation."""
        table = {}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0].strip().lower() != "ip" or len(header) - 1 != dim:
                raise SchemaError(f"{path}: expected header ip,v1..v{dim}, got {header}")
            for row in reader:
                if not row:
                    continue
                if len(row) - 1 != dim:
                    raise SchemaError(f"{path}: row for {row[0]} has {len(row) - 1} values, expected {dim}")
                table[parse_ipv4(row[0].strip())] = np.asarray([float(v) for v in row[1:]])
        return cls(dim, table)

    def __call__(self, ip: IPv4 | None) -> np.ndarray:
        if ip is None:
            return np.zeros(self.dim)
        if self.table:
            return self.table.get(ip, np.zeros(self.dim))
        return ip_embed_input(ip)

    def batch(self, ips) -> np.ndarray:
        return np.stack([self(ip) for ip in ips]) if ips else np.zeros((0, self.dim))
