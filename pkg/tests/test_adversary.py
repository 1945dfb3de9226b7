import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curlip.adversary import build_adversarial_set, perturb_domain, remove_insertions
from curlip.errors import NoDomain
from curlip.ip_features import derive_ip_from_hash
from curlip.tokenizer import train_vocab
from curlip.url_corpus import Dataset, Label, parse_url

VOCAB = train_vocab(["pay", "pal", "secure", "login", "bank", "verify", "account"] * 4, 330, seed=0)


def segment_oracle(vocab, data: bytes):
    """Independent rank-order BPE: repeatedly merge the lowest-ranked adjacent pair of byte strings."""
    pieces = [bytes([b]) for b in data]
    ranks = {(vocab.pieces[a], vocab.pieces[b]): k for k, (a, b) in enumerate(vocab.merges)}
    while True:
        cands = [(ranks[(x, y)], i) for i, (x, y) in enumerate(zip(pieces, pieces[1:])) if (x, y) in ranks]
        if not cands:
            return pieces
        r = min(cands)[0]
        x, y = [p for p, k in ranks.items() if k == r][0]
        out, i = [], 0
        while i < len(pieces):
            if i + 1 < len(pieces) and pieces[i] == x and pieces[i + 1] == y:
                out.append(x + y)
                i += 2
            else:
                out.append(pieces[i])
                i += 1
        pieces = out


def _rec(url, label=Label.MALICIOUS):
    return parse_url(url).with_meta(None, label)


class TestPerturb:
    def test_paypal(self):
        assert segment_oracle(VOCAB, b"paypal") == [b"pay", b"pal"]
        s = perturb_domain(_rec("http://paypal.com/login"), VOCAB)
        assert s.perturbed_url == "http://pay-pal.com/login"
        assert s.inserted_positions == (10,)
        assert s.pseudo_ip == derive_ip_from_hash(s.perturbed_url)

    def test_single_piece_flagged(self):
        s = perturb_domain(_rec("http://a.com"), VOCAB)
        assert s.perturbed_url == "http://a.com" and s.inserted_positions == () and not s.perturbed

    @pytest.mark.parametrize("url", ["http://10.0.0.1/x", "http://com", "http://.com"])
    def test_no_domain(self, url):
        try:
            rec = _rec(url)
        except Exception:
            pytest.skip("not parseable")
        with pytest.raises(NoDomain):
            perturb_domain(rec, VOCAB)

    def test_only_second_level_touched(self):
        s = perturb_domain(_rec("https://Secure.PayPal.co/pay?pal=1"), VOCAB)
        assert s.perturbed_url.startswith("https://Secure.")
        assert s.perturbed_url.endswith(".co/pay?pal=1")
        assert remove_insertions(s) == s.original.raw

    def test_skips_existing_hyphen(self):
        s = perturb_domain(_rec("http://pay-pal.com"), VOCAB)
        assert s.perturbed_url.count("--") == 0

    def test_max_insertions(self):
        full = perturb_domain(_rec("http://securebankloginverify.com"), VOCAB)
        capped = perturb_domain(_rec("http://securebankloginverify.com"), VOCAB, max_insertions=1)
        assert len(full.inserted_positions) > 1
        assert len(capped.inserted_positions) == 1

    def test_utf8_not_split(self):
        s = perturb_domain(_rec("http://bänk.com"), train_vocab(["bänk"] * 3 + ["b"], 262))
        s.perturbed_url.encode("utf-8").decode("utf-8")
        assert remove_insertions(s) == "http://bänk.com"

    @settings(max_examples=150, deadline=None)
    @given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=24),
           st.sampled_from(["com", "de", "xyz", "online"]),
           st.sampled_from(["", "/", "/login?x=1", "/a/b#c"]))
    def test_properties(self, label, tld, rest):
        label = label.strip("-") or "x"
        url = f"http://sub.{label}.{tld}{rest}"
        s = perturb_domain(_rec(url), VOCAB)
        assert parse_url(s.perturbed_url).tld == tld
        assert remove_insertions(s) == url
        assert s.pseudo_ip == derive_ip_from_hash(s.perturbed_url)
        # changes confined to the second-level label
        assert s.perturbed_url.startswith("http://sub.") and s.perturbed_url.endswith(f".{tld}{rest}")


def _ds(benign, malicious):
    recs = [_rec(u, Label.BENIGN) for u in benign] + [_rec(u, Label.MALICIOUS) for u in malicious]
    return Dataset.from_records(recs)


class TestBuildSet:
    BEN = [f"http://site{i}.com" for i in range(4)]

    def test_composition(self):
        out = build_adversarial_set(_ds(self.BEN, ["http://paypal.com", "http://securebank.com"]), VOCAB, 0.5, seed=1)
        assert len(out.dataset) == 7
        assert out.dataset.origins.count("adversarial") == 1
        adv = out.dataset.records[-1]
        assert adv.label is Label.MALICIOUS and adv.ip == derive_ip_from_hash(adv.raw)

    def test_zero_fraction_identity(self):
        ds = _ds(self.BEN, ["http://paypal.com"])
        out = build_adversarial_set(ds, VOCAB, 0.0, seed=1)
        assert out.dataset.records == ds.records

    def test_ip_literals_all_skipped(self):
        out = build_adversarial_set(_ds(self.BEN, ["http://1.2.3.4/", "http://5.6.7.8/"]), VOCAB, 1.0, seed=0)
        assert out.skipped == 2 and len(out.samples) == 0

    def test_requires_malicious(self):
        with pytest.raises(ValueError):
            build_adversarial_set(_ds(self.BEN, []), VOCAB, 0.5)

    def test_deterministic_and_ordered(self):
        mal = [f"http://securelogin{i}.com" for i in range(20)]
        a = build_adversarial_set(_ds(self.BEN, mal), VOCAB, 0.5, seed=9)
        b = build_adversarial_set(_ds(self.BEN, mal), VOCAB, 0.5, seed=9)
        assert a.dataset.records == b.dataset.records
        idx = [mal.index(s.original.raw) for s in a.samples]
        assert idx == sorted(idx)
