"""Command-line entry point: ``isochrony-st <command> ...``.

Exit codes: 0 success, 1 I/O or parse failure, 2 configuration or
validation failure, 3 numeric failure. Logs go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

from . import config as cfgio
from .data import (ConsistencyError, CorpusConfig, CorpusFormatError, Vocabulary, generate_splits, read_corpus,
                   write_corpus)
from .inference import DecodedFormatError, beam_search, decoded_record, read_decoded, write_decoded
from .metrics import evaluate
from .model import CheckpointError, ModelConfig, load_checkpoint
from .training import NumericError, TrainConfig, train

log = logging.getLogger("isochrony_st")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

CORPUS_REQUIRED = ("n_train", "n_dev", "n_test")
SPLITS = ("train", "dev", "test")


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(p.encode())
        h.update(b"\0")
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, resolved: dict, seed, started: float, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "config": resolved,
        "seed": seed,
        "started": started,
        "finished": time.time(),
        "inputs": sorted(str(p) for p in inputs),
        "input_hash": file_digest(inputs) if inputs else None,
        "outputs": sorted(str(p) for p in outputs) + [str(path)],
    }
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    values = cfgio.read_kv(args.config)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cc = cfgio.build(CorpusConfig, values, required=CORPUS_REQUIRED, overrides=overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_splits(cc)
    outputs = []
    for name in SPLITS:
        p = out / f"{name}.jsonl"
        write_corpus(p, splits[name])
        outputs.append(p)
    vocab_path = out / "vocab.txt"
    cc.vocabulary().write(vocab_path)
    outputs.append(vocab_path)
    write_manifest(out / "manifest.json", "gen-data", asdict(cc), cc.seed, started, [args.config], outputs)
    log.info("wrote %s", ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return EXIT_OK


def _vocab_for(data_path: Path, explicit: str | None = None) -> Vocabulary:
    p = Path(explicit) if explicit else (data_path if data_path.is_dir() else data_path.parent) / "vocab.txt"
    return Vocabulary.read(p)


def _model_config(path: str | None, vocab: Vocabulary, feat_dim: int, ablate: bool) -> ModelConfig:
    values = cfgio.read_kv(path) if path else {}
    mc = cfgio.build(ModelConfig, values, overrides={"ablate_timing": True} if ablate else {})
    if "vocab_size" in values and mc.vocab_size != vocab.size:
        raise cfgio.ConfigError(f"vocab_size={mc.vocab_size} but the vocabulary has {vocab.size} tokens")
    if "feat_dim" in values and mc.feat_dim != feat_dim:
        raise cfgio.ConfigError(f"feat_dim={mc.feat_dim} but the corpus has {feat_dim}-dim features")
    mc.vocab_size = vocab.size
    mc.feat_dim = feat_dim
    return mc


def cmd_train(args) -> int:
    started = time.time()
    data = Path(args.data)
    vocab = _vocab_for(data)
    train_set = read_corpus(data / "train.jsonl")
    dev_path = data / "dev.jsonl"
    dev = read_corpus(dev_path) if dev_path.exists() else []
    if not train_set:
        raise cfgio.ConfigError("training corpus is empty")
    mc = _model_config(args.model_config, vocab, train_set[0].features.shape[1], args.ablate_timing)
    values = cfgio.read_kv(args.train_config) if args.train_config else {}
    overrides = {"checkpoint": str(args.out)}
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    tc = cfgio.build(TrainConfig, values, overrides=overrides)
    report_path = str(args.out) + ".report.tsv"
    inputs = [data / "train.jsonl", data / "vocab.txt"] + ([dev_path] if dev else [])
    inputs += [p for p in (args.model_config, args.train_config) if p]
    train(train_set, mc, tc, vocab, dev=dev, resume_from=args.resume, report_path=report_path,
          meta={"model_config": asdict(mc)})
    write_manifest(str(args.out) + ".manifest.json", "train",
                   {"model": asdict(mc), "train": asdict(tc)}, tc.seed, started, inputs,
                   [args.out, report_path])
    return EXIT_OK


def cmd_translate(args) -> int:
    started = time.time()
    model, _, _ = load_checkpoint(args.ckpt)
    data = Path(args.data)
    vocab = _vocab_for(data, args.vocab)
    if vocab.size != model.config.vocab_size:
        raise CheckpointError(f"parameter dec.emb: checkpoint vocabulary {model.config.vocab_size} "
                              f"!= vocabulary file {vocab.size}")
    corpus = read_corpus(data)
    records = []
    for u in corpus:
        if u.features.shape[1] != model.config.feat_dim:
            raise CheckpointError(f"parameter enc.in.w: expects {model.config.feat_dim}-dim features, "
                                  f"corpus has {u.features.shape[1]}")
        h = beam_search(model, u.features, u.total_frames, vocab, args.beam, args.max_len, args.alpha,
                        args.force_eos_at_zero)[0]
        records.append(decoded_record(u.uid, h, vocab, args.alpha))
    write_decoded(args.out, records)
    write_manifest(str(args.out) + ".manifest.json", "translate",
                   {"beam": args.beam, "alpha": args.alpha, "max_len": args.max_len,
                    "force_eos_at_zero": args.force_eos_at_zero}, None, started, [args.ckpt, data], [args.out])
    log.info("decoded %d utterances", len(records))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    decoded = read_decoded(args.hyp)
    data = Path(args.data)
    corpus = read_corpus(data)
    try:
        vocab = _vocab_for(data)
    except OSError:
        vocab = None
    try:
        report = evaluate(decoded, corpus, vocab)
    except KeyError as exc:
        raise cfgio.ConfigError(exc.args[0]) from exc
    report.write(args.out)
    print(report.summary())
    write_manifest(str(args.out) + ".manifest.json", "evaluate", {}, None, started, [args.hyp, data], [args.out])
    return EXIT_OK


def cmd_repro_trend(args) -> int:
    """gen-data -> train baseline and timing-conditioned models -> translate -> evaluate."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    rc = main(["gen-data", "--out", str(data), "--config", args.corpus_config]
              + (["--seed", str(args.seed)] if args.seed is not None else []))
    if rc:
        return rc
    results = {}
    for name, extra in (("baseline", ["--ablate-timing"]), ("ic", [])):
        ckpt = out / f"{name}.npz"
        argv = ["train", "--data", str(data), "--out", str(ckpt)] + extra
        if args.model_config:
            argv += ["--model-config", args.model_config]
        if args.train_config:
            argv += ["--train-config", args.train_config]
        rc = main(argv)
        if rc:
            return rc
        hyp = out / f"{name}.test.decoded.jsonl"
        rc = main(["translate", "--ckpt", str(ckpt), "--data", str(data / "test.jsonl"), "--beam", str(args.beam),
                   "--out", str(hyp)])
        if rc:
            return rc
        decoded = read_decoded(hyp)
        results[name] = evaluate(decoded, read_corpus(data / "test.jsonl"), Vocabulary.read(data / "vocab.txt"))
        results[name].write(out / f"{name}.eval.tsv")
    print(f"{'model':<12}{'BLEU':>8}{'Ovr':>8}")
    for name, label in (("baseline", "ST baseline"), ("ic", "I-C ST")):
        r = results[name]
        print(f"{label:<12}{r.bleu:>8.2f}{r.mean_overlap:>8.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isochrony-st", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--model-config")
    t.add_argument("--train-config")
    t.add_argument("--out", required=True)
    t.add_argument("--ablate-timing", action="store_true")
    t.add_argument("--noise-sigma", type=float)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("translate", help="decode a corpus file")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--beam", type=int, default=5)
    d.add_argument("--out", required=True)
    d.add_argument("--vocab")
    d.add_argument("--max-len", type=int)
    d.add_argument("--alpha", type=float, default=0.6)
    d.add_argument("--force-eos-at-zero", action="store_true")
    d.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="score decoded output")
    e.add_argument("--hyp", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("repro-trend", help="baseline vs timing-conditioned comparison")
    r.add_argument("--out", required=True)
    r.add_argument("--corpus-config", required=True)
    r.add_argument("--model-config")
    r.add_argument("--train-config")
    r.add_argument("--seed", type=int)
    r.add_argument("--beam", type=int, default=5)
    r.set_defaults(func=cmd_repro_trend)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (CorpusFormatError, DecodedFormatError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (cfgio.ConfigError, CheckpointError, ConsistencyError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
