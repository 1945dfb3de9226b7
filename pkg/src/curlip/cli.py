"""Command-line entry point: stats | train-vocab | pretrain | finetune |
attack | eval | predict.

Exit status is 0 on success, 1 for invalid usage or input, 2 for failures
while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import build_adversarial_set
from .config import RunConfig
from .encoder import pretrain, write_loss_log
from .errors import (BadIp, BadRatios, CheckpointError, ConfigError, LabelError, MalformedUrl, SchemaError,
                     VocabTooSmall)
from .ip_features import FEATURE_DIM, IpEmbedder, parse_ipv4
from .kernel import checkpoint
from .metrics import binary_report, multiclass_report
from .model import build_model, encode_dataset, finetune, new_state, predict_proba
from .tokenizer import Vocab, train_vocab
from .url_corpus import AsnMap, Dataset, dataset_stats, load_dataset, parse_url, split_dataset, write_dataset

log = logging.getLogger("curlip")

VALIDATION_ERRORS = (ConfigError, SchemaError, LabelError, BadRatios, VocabTooSmall, CheckpointError,
                     FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers -------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    seed = _seed(args, cfg.train.seed)
    cfg = cfg.replace("train", seed=seed)
    overrides = {k: getattr(args, k) for k in ("epochs", "lr", "batch_size") if getattr(args, k, None) is not None}
    if overrides:
        cfg = cfg.replace("train", **overrides)
    return cfg


def _seed(args, default: int) -> int:
    env = os.environ.get("CURLIP_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CURLIP_SEED must be an integer, got {env!r}") from None
    return args.seed if getattr(args, "seed", None) is not None else default


def _embedder(args) -> IpEmbedder:
    if getattr(args, "ip_embeddings", None):
        return IpEmbedder.from_csv(args.ip_embeddings, args.ip_dim)
    return IpEmbedder()


def _load_checkpoint(path) -> tuple:
    state, meta = checkpoint.load(path)
    cfg = RunConfig.from_dict(state.config)
    if "vocab" not in meta:
        raise CheckpointError(f"{path} carries no vocabulary")
    return state, meta, cfg, Vocab.from_text(meta["vocab"])


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _read_unlabelled(path) -> Dataset:
    """CSV with a ``url`` column (``ip``/``label`` optional), or one URL per line."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    records, skipped = [], 0
    if lines and lines[0].strip().lower().startswith("url"):
        reader = csv.DictReader(lines)
        rows = [(row.get("url", ""), row.get("ip") or "") for row in reader]
    else:
        rows = [(ln, "") for ln in lines if ln.strip()]
    for url, ip in rows:
        try:
            records.append(parse_url(url.strip()).with_meta(parse_ipv4(ip.strip()) if ip.strip() else None, None))
        except (MalformedUrl, BadIp):
            skipped += 1
    return Dataset.from_records(records, str(path), skipped)


# -- subcommands ---------------------------------------------------------------

def cmd_stats(args) -> None:
    ds = load_dataset(args.data)
    asn = AsnMap.load(args.asn) if args.asn else None
    report = dataset_stats(ds, asn, top_k=args.top_k)
    report["n_records"] = len(ds)
    report["skipped"] = ds.skipped
    _write_json(report, args.out)


def cmd_train_vocab(args) -> None:
    cfg = _config(args)
    ds = load_dataset(args.data)
    size = args.vocab_size or cfg.train.vocab_size
    vocab = train_vocab((r.raw for r in ds), size, seed=cfg.train.seed)
    vocab.save(args.out)
    log.info("vocabulary with %d pieces written to %s", len(vocab), args.out)


def _vocab_for(args, cfg: RunConfig, urls) -> Vocab:
    if getattr(args, "vocab", None):
        vocab = Vocab.load(args.vocab)
    else:
        vocab = train_vocab(urls, cfg.train.vocab_size, seed=cfg.train.seed)
    if len(vocab) > cfg.encoder.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} pieces, encoder.vocab_size is {cfg.encoder.vocab_size}")
    return vocab


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace("train", pretrain_steps=args.steps)
    ds = load_dataset(args.data)
    urls = [r.raw for r in ds]
    vocab = _vocab_for(args, cfg, urls)
    result = pretrain(urls, vocab, cfg.encoder, cfg.train.pretrain_config(), seed=cfg.train.seed)
    state, history = result.state, result.history
    state.config = cfg.to_dict()
    meta = {"kind": "pretrain", "vocab": vocab.to_text(), "steps": len(history),
            "final_loss": history[-1].total if history else None}
    checkpoint.save(state, args.out, meta)
    if args.log:
        write_loss_log(history, args.log)


def cmd_finetune(args) -> None:
    cfg = _config(args)
    ds = load_dataset(args.data)
    if args.val_data:
        train_ds, val_ds = ds, load_dataset(args.val_data)
    else:
        train_ds, val_ds, _ = split_dataset(ds, cfg.train.split, cfg.train.seed)
    pretrained = None
    if args.pretrained:
        pretrained, pmeta = checkpoint.load(args.pretrained)
        vocab = Vocab.from_text(pmeta["vocab"]) if not args.vocab else Vocab.load(args.vocab)
        pcfg = RunConfig.from_dict(pretrained.config)
        if pcfg.encoder != cfg.encoder:
            raise ConfigError("encoder settings differ from the pretrained checkpoint")
    else:
        vocab = _vocab_for(args, cfg, [r.raw for r in train_ds])
    embedder = _embedder(args)
    train_enc = encode_dataset(train_ds, vocab, cfg, embedder)
    val_enc = encode_dataset(val_ds, vocab, cfg, embedder)
    if train_enc.labels is None or val_enc.labels is None or len(val_enc) == 0:
        raise SchemaError("fine-tuning needs labelled training and validation rows")
    rows = []
    result = finetune(train_enc, val_enc, cfg, new_state(cfg, pretrained),
                      on_epoch=lambda r: rows.append(r))
    meta = {"kind": "model", "vocab": vocab.to_text(), "val_loss": result.best_val_loss,
            "best_epoch": result.best_epoch, "ip_dim": int(train_enc.ip.shape[1])}
    checkpoint.save(result.state, args.out, meta)
    if args.log:
        with Path(args.log).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for r in rows:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])


def cmd_attack(args) -> None:
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    elif args.checkpoint:
        vocab = _load_checkpoint(args.checkpoint)[3]
    else:
        raise UsageError("attack needs --vocab or --checkpoint")
    ds = load_dataset(args.data)
    seed = _seed(args, 0)
    out = build_adversarial_set(ds, vocab, args.fraction, seed=seed, evasion_char=args.evasion_char,
                                max_insertions=args.max_insertions)
    write_dataset(out.dataset, args.out, with_origin=True)
    log.info("%d adversarial samples, %d skipped", len(out.samples), out.skipped)


def _scores(args):
    state, meta, cfg, vocab = _load_checkpoint(args.checkpoint)
    model = build_model(cfg, state, ip_dim=meta.get("ip_dim", FEATURE_DIM))
    return model, cfg, vocab


def cmd_eval(args) -> None:
    model, cfg, vocab = _scores(args)
    ds = load_dataset(args.data)
    enc = encode_dataset(ds, vocab, cfg, _embedder(args))
    if enc.labels is None:
        raise SchemaError("evaluation data must be labelled")
    probs = predict_proba(model, enc)
    threshold = args.threshold if args.threshold is not None else cfg.eval.threshold
    if cfg.bmmc.n_classes == 2:
        report = binary_report(probs[:, 1], enc.labels, threshold, cfg.eval.fpr_levels)
    else:
        report = multiclass_report(probs, enc.labels, cfg.eval.fpr_levels)
    if ds.origins:
        pred = probs.argmax(axis=1)
        by_origin = {}
        for origin in sorted(set(ds.origins)):
            idx = [i for i, o in enumerate(ds.origins) if o == origin]
            by_origin[origin] = {"n": len(idx), "accuracy": float(np.mean(pred[idx] == enc.labels[idx]))}
        report.extra["by_origin"] = by_origin
    report.extra["n_records"] = len(ds)
    _write_json(report.to_dict(), args.out)
    if args.roc_csv:
        report.write_roc_csv(args.roc_csv)


def cmd_predict(args) -> None:
    model, cfg, vocab = _scores(args)
    ds = _read_unlabelled(args.data)
    enc = encode_dataset(ds, vocab, cfg, _embedder(args))
    probs = predict_proba(model, enc)
    names = ["p_benign", "p_malicious", "p_phishing"][:cfg.bmmc.n_classes]
    lines = []
    for rec, p in zip(ds.records, probs):
        row = {"url": rec.raw, **{n: float(v) for n, v in zip(names, p)}, "pred": names[int(p.argmax())][2:]}
        lines.append(json.dumps(row))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curlip", description="URL + IP malicious-URL detector")
    parser.add_argument("--version", action="version", version=f"curlip {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True, out=True, config=False, seed=False):
        if data:
            p.add_argument("--data", required=True, help="input CSV (url,ip,label)")
        if out:
            p.add_argument("--out", required=True, help="output path")
        if config:
            p.add_argument("--config", help="TOML run configuration")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (CURLIP_SEED overrides)")

    p = sub.add_parser("stats", help="TLD / IP-class / ASN statistics as JSON")
    common(p, out=False)
    p.add_argument("--out", default="-")
    p.add_argument("--asn", help="CSV of prefix,asn")
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-vocab", help="learn a byte-level BPE vocabulary")
    common(p, config=True, seed=True)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("pretrain", help="student/teacher encoder pretraining")
    common(p, config=True, seed=True)
    p.add_argument("--vocab", help="vocabulary file (trained from --data if absent)")
    p.add_argument("--steps", type=int, help="number of optimisation steps")
    p.add_argument("--log", help="loss CSV (step,mlm,tacl,total)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the full detector")
    common(p, config=True, seed=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pretrained", help="pretraining checkpoint")
    g.add_argument("--from-scratch", action="store_true", help="random encoder initialisation")
    p.add_argument("--vocab")
    p.add_argument("--val-data", help="validation CSV (default: split --data)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--log", help="per-epoch loss CSV")
    p.add_argument("--ip-embeddings", help="CSV ip,v1..vF replacing the built-in IP features")
    p.add_argument("--ip-dim", type=int, default=FEATURE_DIM)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("attack", help="append hyphen-insertion adversarial copies of malicious URLs")
    common(p, seed=True)
    p.add_argument("--vocab")
    p.add_argument("--checkpoint")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--evasion-char", default="-")
    p.add_argument("--max-insertions", type=int)
    p.set_defaults(func=cmd_attack)

    for name, func, helptext in (("eval", cmd_eval, "metrics report on labelled data"),
                                 ("predict", cmd_predict, "per-URL class probabilities as JSONL")):
        p = sub.add_parser(name, help=helptext)
        common(p, out=False)
        p.add_argument("--out", default="-")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--ip-embeddings")
        p.add_argument("--ip-dim", type=int, default=FEATURE_DIM)
        if name == "eval":
            p.add_argument("--roc-csv", help="write ROC points here")
            p.add_argument("--threshold", type=float)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"curlip: error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"curlip: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"curlip: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
