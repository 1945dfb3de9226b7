"""Synthetic labelled URL corpora for desk-scale experiments.

Benign URLs use dictionary-word domains on .com and country-code TLDs;
malicious ones use hyphen/digit domains on rare generic TLDs.  IPs are drawn
from class-dependent address pools.  The ``ip_only`` variant draws URL text
independently of the label so that only the IP carries signal.
"""

from __future__ import annotations

import numpy as np

from .ip_features import IPv4
from .url_corpus import Dataset, Label, parse_url

WORDS = (
    "apple river garden market travel news music sport health school cloud green house light "
    "table paper story water stone forest music video photo email world office money family "
    "energy coffee studio design smart simple daily local global digital urban north south "
    "ocean mountain city book food home shop blog media games art science"
).split()
BENIGN_TLDS = ("com", "com", "com", "de", "uk", "fr", "nl", "jp", "it", "ca")
RARE_TLDS = ("xyz", "top", "cfd", "icu", "buzz", "sbs", "rest", "cyou")
BAIT = ("login", "secure", "verify", "account", "update", "wallet", "bank", "support")
PATHS = ("", "/", "/about", "/index.html", "/news/{w}", "/products/{w}", "/{w}/{w}")
BAD_PATHS = ("/", "/login.php?id={n}", "/verify?session={n}", "/{w}/auth", "/wp-admin/{n}")


def _word(rng) -> str:
    return WORDS[int(rng.integers(len(WORDS)))]


def _benign_url(rng) -> str:
    host = _word(rng) + (_word(rng) if rng.random() < 0.6 else "")
    if rng.random() < 0.5:
        host = "www." + host
    tld = BENIGN_TLDS[int(rng.integers(len(BENIGN_TLDS)))]
    path = PATHS[int(rng.integers(len(PATHS)))].replace("{w}", _word(rng))
    scheme = "https" if rng.random() < 0.7 else "http"
    return f"{scheme}://{host}.{tld}{path}"


def _malicious_url(rng) -> str:
    parts = [BAIT[int(rng.integers(len(BAIT)))], str(int(rng.integers(10, 99999)))]
    if rng.random() < 0.5:
        parts.insert(0, _word(rng))
    if rng.random() < 0.5:
        parts.append(BAIT[int(rng.integers(len(BAIT)))])
    tld = RARE_TLDS[int(rng.integers(len(RARE_TLDS)))]
    path = BAD_PATHS[int(rng.integers(len(BAD_PATHS)))].replace("{w}", _word(rng))
    path = path.replace("{n}", str(int(rng.integers(1000, 10**6))))
    return f"http://{'-'.join(parts)}.{tld}{path}"


def _ip(rng, malicious: bool) -> IPv4:
    # benign hosts sit in a few large class-A/B provider blocks, malicious ones in class-C hosting ranges
    if malicious:
        first = int(rng.choice([185, 193, 194, 195, 203, 212]))
    else:
        first = int(rng.choice([13, 23, 34, 52, 104, 151]))
    return IPv4((first, int(rng.integers(256)), int(rng.integers(256)), int(rng.integers(1, 255))))


def make_corpus(n: int = 2000, malicious_fraction: float = 0.5, seed: int = 0,
                ip_only: bool = False) -> Dataset:
    """Generate ``n`` labelled URLs.

    With ``ip_only`` every URL is drawn from a 50/50 mixture of the benign and
    malicious text generators regardless of its label, so URL text alone is
    uninformative.
    """
    rng = np.random.default_rng(seed)
    records = []
    n_bad = int(round(n * malicious_fraction))
    labels = np.array([1] * n_bad + [0] * (n - n_bad))
    rng.shuffle(labels)
    for lab in labels:
        bad = bool(lab)
        text_bad = rng.random() < 0.5 if ip_only else bad
        url = _malicious_url(rng) if text_bad else _benign_url(rng)
        rec = parse_url(url).with_meta(_ip(rng, bad), Label.MALICIOUS if bad else Label.BENIGN)
        records.append(rec)
    return Dataset.from_records(records, source_path=f"synthetic(seed={seed}, ip_only={ip_only})")
