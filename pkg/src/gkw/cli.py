"""Command-line pipeline driver.

One binary, six subcommands: generate, features, train, score, eval,
gradcheck. The pipeline is linear, so they share the config machinery: an
optional JSON config file with one section per subcommand, overridden by
flags. Every report carries the resolved config and the checksums of its
inputs; none carries a timestamp, so strict-determinism runs are
byte-reproducible.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.

numpy is imported lazily inside main() so that `--threads` and
`--strict-determinism` can pin the BLAS thread pools first; once numpy is
up, the knobs are inert.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, GkwError, NumericError

log = logging.getLogger("gkw")

_SUBCOMMANDS = ("generate", "features", "train", "score", "eval", "gradcheck")

# flat option names accepted per config-file section
_SECTION_KEYS = {
    "generate": {
        "out", "vocab_size", "stop_word_count", "utterance_words",
        "prototype_frames", "prototype_sigma", "prototype_ripple",
        "frame_noise_sigma", "train_size", "dev_size", "test_size",
        "zipf_exponent", "miss_rate", "false_alarm_rate", "concentration",
        "confusion_map",
    },
    "features": {"out"},
    "train": {
        "arch", "targets", "target_file", "out", "learning_rate",
        "batch_size", "epochs", "patience", "loss_log",
    },
    "score": {"split", "out", "emit_localization"},
    "eval": {"mode", "split", "alpha", "keywords", "min_occurrences",
             "semantic_map", "confusion", "out"},
    "gradcheck": {"arch", "step", "corrupt"},
}


class _Args(argparse.Namespace):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gkw",
        description="Train and evaluate word-prediction speech models "
        "supervised by soft visual tags.",
    )
    parser.add_argument("--config", help="JSON config file with per-subcommand sections")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--threads", type=_positive_int,
                        help="BLAS/OpenMP thread cap (set before numpy loads)")
    parser.add_argument("--strict-determinism", action="store_true",
                        help="single-threaded BLAS; byte-reproducible outputs")
    parser.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="model arithmetic precision (default f32)")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(_SUBCOMMANDS) + "}")

    p = sub.add_parser("generate", help="write a synthetic grounded corpus")
    p.add_argument("--out", help="output directory (default corpus/)")

    p = sub.add_parser("features", help="extract MFCC matrices from WAV files")
    p.add_argument("wavs", nargs="+", help="input .wav files")
    p.add_argument("--out", help="output directory (default alongside inputs)")

    p = sub.add_parser("train", help="train a model on a corpus manifest")
    p.add_argument("manifest", help="corpus manifest.jsonl")
    p.add_argument("--arch", choices=("cnn", "psc"), default=None)
    p.add_argument("--targets", choices=("oracle", "vision", "file"), default=None,
                   help="supervision source (default vision)")
    p.add_argument("--target-file", dest="target_file",
                   help="vision-target file for --targets file")
    p.add_argument("--out", help="checkpoint path (default model.gkwm)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--patience", type=_positive_int)
    p.add_argument("--loss-log", dest="loss_log",
                   help="per-epoch loss CSV path (default <out>.losses.csv)")

    p = sub.add_parser("score", help="score a split with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", choices=("train", "dev", "test"), default=None)
    p.add_argument("--out", help="score table path (default scores.tsv)")
    p.add_argument("--emit-localization", dest="emit_localization",
                   action="store_true", default=None,
                   help="also write per-utterance activation matrices (psc only)")

    p = sub.add_parser("eval", help="evaluate a score table against a manifest")
    p.add_argument("scores", help="score table .tsv")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=("bow", "kws", "semantic-kws"), default=None)
    p.add_argument("--split", choices=("train", "dev", "test"), default=None)
    p.add_argument("--alpha", action="append", type=float, default=None,
                   help="BoW decision threshold (repeatable)")
    p.add_argument("--keywords", type=_positive_int, default=None,
                   help="number of keywords to draw for spotting")
    p.add_argument("--min-occurrences", dest="min_occurrences", type=_positive_int,
                   help="minimum test-split occurrences for a keyword")
    p.add_argument("--semantic-map", dest="semantic_map",
                   help="JSON keyword relabelling map (semantic-kws mode)")
    p.add_argument("--confusion", action="store_true", default=None,
                   help="append a false-alarm co-occurrence report (bow mode)")
    p.add_argument("--out", help="report path (default stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference check of both backward passes")
    p.add_argument("--arch", choices=("cnn", "psc", "both"), default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--corrupt", action="store_true", default=None,
                   help=argparse.SUPPRESS)  # negative-control hook for tests

    return parser


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError("config file must be a JSON object of sections")
    for section, values in data.items():
        if section not in _SECTION_KEYS and section != "common":
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        allowed = (
            {"seed", "threads", "strict_determinism", "precision"}
            if section == "common"
            else _SECTION_KEYS[section]
        )
        for key in values:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in config section {section!r}")
    return data


def _merge(args, file_config):
    """Flags beat file values beat built-in defaults."""
    common = file_config.get("common", {})
    for key in ("seed", "threads", "precision"):
        if getattr(args, key, None) is None and key in common:
            setattr(args, key, common[key])
    if not args.strict_determinism and common.get("strict_determinism"):
        args.strict_determinism = True
    section = file_config.get(args.command, {})
    for key, value in section.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _resolved_config(args, keys):
    out = {
        "command": args.command,
        "seed": args.seed,
        "precision": args.precision or "f32",
        "strict_determinism": bool(args.strict_determinism),
    }
    for key in sorted(keys):
        out[key] = getattr(args, key, None)
    return out


def _checksum(path):
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_report(out, report):
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
        print(out)
    else:
        sys.stdout.write(text)


def _corpus(manifest_path):
    from .synth import CorpusManifest
    from .targets import Vocabulary

    manifest = CorpusManifest.load(manifest_path)
    vocab_path = manifest.root / "vocabulary.txt"
    if not vocab_path.exists():
        raise DataError(f"no vocabulary.txt next to {manifest_path}")
    return manifest, Vocabulary.load(vocab_path)


# -- subcommands --------------------------------------------------------------

def cmd_generate(args):
    from .synth import SynthConfig, corpus_stats, generate_corpus
    from .targets import VisionChannelConfig

    channel_kwargs = {}
    for key in ("miss_rate", "false_alarm_rate", "concentration"):
        if getattr(args, key, None) is not None:
            channel_kwargs[key] = getattr(args, key)
    confusion = getattr(args, "confusion_map", None)
    if confusion is not None:
        channel_kwargs["confusion_map"] = {
            word: [(str(n), float(p)) for n, p in edges]
            for word, edges in confusion.items()
        }
    else:
        channel_kwargs["confusion_map"] = SynthConfig().channel.confusion_map

    synth_kwargs = {}
    for key in ("vocab_size", "stop_word_count", "prototype_sigma",
                "prototype_ripple", "frame_noise_sigma", "train_size",
                "dev_size", "test_size", "zipf_exponent"):
        if getattr(args, key, None) is not None:
            synth_kwargs[key] = getattr(args, key)
    for key in ("utterance_words", "prototype_frames"):
        if getattr(args, key, None) is not None:
            synth_kwargs[key] = tuple(getattr(args, key))
    if args.seed is not None:
        synth_kwargs["seed"] = args.seed

    config = SynthConfig(channel=VisionChannelConfig(**channel_kwargs), **synth_kwargs)
    out_dir = Path(getattr(args, "out", None) or "corpus")
    manifest = generate_corpus(config, out_dir)
    stats = corpus_stats(manifest)
    manifest_path = out_dir / "manifest.jsonl"
    print(manifest_path)
    print(f"checksum {_checksum(manifest_path)}")
    print(f"utterances {stats['utterances']}  types {stats['type_count']}  "
          f"tokens {stats['token_count']}")
    zipf = stats["zipf_exponent"]
    if zipf is not None:
        print(f"zipf fit {zipf:.3f}")
    return 0


def cmd_features(args):
    from .features import FeatureConfig, extract_mfcc, load_wav, write_features

    config = FeatureConfig()
    out_dir = Path(args.out) if getattr(args, "out", None) else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for wav in args.wavs:
        wav = Path(wav)
        signal, rate = load_wav(wav)
        if rate != config.sample_rate:
            raise DataError(
                f"{wav}: sample rate {rate} != expected {config.sample_rate}"
            )
        feats = extract_mfcc(signal, config)
        target = (out_dir or wav.parent) / (wav.stem + ".gkwf")
        write_features(target, feats)
        print(f"{target} {feats.shape[0]}x{feats.shape[1]}")
    return 0


def _training_targets(args, manifest, vocab):
    from .targets import load_vision_targets, oracle_bow

    mode = getattr(args, "targets", None) or "vision"
    if mode == "oracle":
        return {
            utt_id: oracle_bow(tokens, vocab)
            for utt_id, tokens in manifest.transcriptions().items()
        }
    if mode == "file":
        path = getattr(args, "target_file", None)
        if not path:
            raise ConfigError("--targets file needs --target-file PATH")
        return load_vision_targets(path, vocab)
    paths = manifest.target_paths()
    if not paths:
        raise DataError("manifest references no vision-target files; "
                        "use --targets oracle or --targets file")
    targets = {}
    for rel in paths:
        targets.update(load_vision_targets(manifest.root / rel, vocab))
    return targets


def cmd_train(args):
    import numpy as np

    from .models import TrainConfig, cnn_pool, psc, save_checkpoint, train
    from .tensor import as_dtype

    manifest, vocab = _corpus(args.manifest)
    targets = _training_targets(args, manifest, vocab)
    arch = getattr(args, "arch", None) or "cnn"
    spec = (psc if arch == "psc" else cnn_pool)(len(vocab))

    train_ids = manifest.ids("train")
    dev_ids = manifest.ids("dev")
    if not train_ids or not dev_ids:
        raise DataError("manifest needs non-empty train and dev splits")
    features = manifest.load_features(train_ids + dev_ids)

    config = TrainConfig(
        learning_rate=getattr(args, "learning_rate", None),
        batch_size=getattr(args, "batch_size", None) or 32,
        epochs=getattr(args, "epochs", None) or 60,
        seed=args.seed if args.seed is not None else 0,
        patience=getattr(args, "patience", None) or 5,
    )

    out = Path(getattr(args, "out", None) or "model.gkwm")
    loss_log = Path(getattr(args, "loss_log", None) or str(out) + ".losses.csv")
    epochs = []

    def progress(epoch, train_loss, dev_loss):
        epochs.append((epoch, train_loss, dev_loss))
        log.info("epoch %d: train %.6f dev %.6f", epoch, train_loss, dev_loss)

    model, metadata = train(
        features, targets, train_ids, dev_ids, spec, config,
        progress=progress, dtype=as_dtype(args.precision or "f32"),
    )

    with open(loss_log, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,dev_loss\n")
        for epoch, train_loss, dev_loss in epochs:
            fh.write(f"{epoch},{train_loss:.6f},{dev_loss:.6f}\n")

    metadata = dict(metadata)
    metadata["config"] = _resolved_config(args, _SECTION_KEYS["train"] - {"out", "loss_log"})
    metadata["inputs"] = {"manifest": _checksum(Path(args.manifest))}
    save_checkpoint(out, model, vocab.fingerprint(), metadata)
    best_dev = metadata["dev_loss"][metadata["best_epoch"] - 1]
    print(out)
    print(f"best epoch {metadata['best_epoch']}  dev loss {best_dev:.6f}")
    return 0


def cmd_score(args):
    from .evaluation import ScoreTable
    from .features import write_features
    from .models import PSC, load_checkpoint, score_utterances
    from .tensor import as_dtype

    manifest, vocab = _corpus(args.manifest)
    model, fingerprint, _ = load_checkpoint(
        args.checkpoint, vocab=vocab, dtype=as_dtype(args.precision or "f32")
    )
    split = getattr(args, "split", None) or "test"
    ids = manifest.ids(split)
    if not ids:
        raise DataError(f"manifest has no {split!r} utterances")
    features = manifest.load_features(ids)
    scores = score_utterances(model, features, ids)
    table = ScoreTable(ids, scores, vocab)
    out = Path(getattr(args, "out", None) or "scores.tsv")
    table.save(out)
    print(out)

    if getattr(args, "emit_localization", None):
        if model.spec.variant != PSC:
            raise ConfigError("--emit-localization needs a psc checkpoint")
        loc_dir = out.parent / (out.stem + ".localization")
        loc_dir.mkdir(parents=True, exist_ok=True)
        for utt_id in ids:
            model.predict(features[utt_id])
            h, h_lengths = model.localization()
            write_features(loc_dir / f"{utt_id}.gkwf", h[0, : h_lengths[0]])
        print(loc_dir)
    return 0


def cmd_eval(args):
    from .evaluation import (
        ScoreTable,
        average_precision,
        bow_metrics,
        bow_predict,
        build_reference,
        confusion_report,
        keyword_spot,
        load_semantic_map,
        select_keywords,
    )

    manifest, vocab = _corpus(args.manifest)
    table = ScoreTable.load(args.scores, vocab=vocab)
    split = getattr(args, "split", None) or "test"
    transcriptions = manifest.transcriptions(split)
    missing = [u for u in table.utt_ids if u not in transcriptions]
    if missing:
        raise DataError(
            f"score table utterance {missing[0]!r} is not in the {split!r} split"
        )
    reference = build_reference({u: transcriptions[u] for u in table.utt_ids})

    mode = getattr(args, "mode", None) or "bow"
    report = {
        "mode": mode,
        "config": _resolved_config(args, _SECTION_KEYS["eval"] - {"out"}),
        "inputs": {
            "scores": _checksum(Path(args.scores)),
            "manifest": _checksum(Path(args.manifest)),
        },
    }

    if mode == "bow":
        alphas = getattr(args, "alpha", None) or [0.4, 0.7]
        for alpha in alphas:
            if not 0.0 <= alpha <= 1.0:
                raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
        operating = {}
        for alpha in alphas:
            metrics = bow_metrics(bow_predict(table, alpha), reference)
            operating[f"{alpha:g}"] = {
                "precision": metrics["precision"],
                "recall": metrics["recall"],
                "fscore": metrics["fscore"],
                "flags": metrics["flags"],
            }
        report["alpha"] = operating
        report["average_precision"] = average_precision(table, reference)
        if getattr(args, "confusion", None):
            rows = confusion_report(table, reference, min(alphas))
            report["confusion"] = [list(r) for r in rows[:50]]
    else:
        count = getattr(args, "keywords", None) or 20
        min_occ = getattr(args, "min_occurrences", None) or 5
        keywords = select_keywords(
            reference, vocab, count=count, min_occurrences=min_occ,
            seed=args.seed if args.seed is not None else 0,
        )
        semantic_map = None
        if mode == "semantic-kws":
            path = getattr(args, "semantic_map", None)
            if not path:
                default = manifest.root / "semantic_map.json"
                if not default.exists():
                    raise ConfigError(
                        "semantic-kws mode needs --semantic-map PATH "
                        "(no semantic_map.json beside the manifest)"
                    )
                path = default
            semantic_map = load_semantic_map(path)
        report.update(keyword_spot(table, keywords, reference, semantic_map=semantic_map))

    _write_report(getattr(args, "out", None), report)
    return 0


def cmd_gradcheck(args):
    from .models import CNN_POOL, PSC, gradient_check, toy_spec

    arch = getattr(args, "arch", None) or "both"
    variants = {"cnn": (CNN_POOL,), "psc": (PSC,), "both": (CNN_POOL, PSC)}[arch]
    step = getattr(args, "step", None) or 1e-5
    seed = args.seed if args.seed is not None else 0
    worst = 0.0
    failed = False
    for variant in variants:
        max_rel, name = gradient_check(
            toy_spec(variant), seed=seed, step=step,
            corrupt=bool(getattr(args, "corrupt", None)),
        )
        status = "ok" if max_rel <= 1e-6 else "FAIL"
        print(f"{variant}: max relative error {max_rel:.3e} ({name}) {status}")
        worst = max(worst, max_rel)
        failed = failed or max_rel > 1e-6
    if failed:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")
    return 0


_HANDLERS = {
    "generate": cmd_generate,
    "features": cmd_features,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _pin_threads(count):
    # effective only before the first numpy import in this process
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "BLIS_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(count)


def main(argv=None):
    logging.basicConfig(
        level=getattr(logging, os.environ.get("GKW_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv, namespace=_Args())
    except SystemExit as err:
        # argparse exits 2 on usage errors; usage errors are exit 1 here
        return 0 if err.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1

    try:
        file_config = _load_config_file(args.config) if args.config else {}
        args = _merge(args, file_config)
        if args.strict_determinism:
            _pin_threads(1)
        elif getattr(args, "threads", None):
            _pin_threads(args.threads)
        return _HANDLERS[args.command](args)
    except ConfigError as err:
        print(f"gkw: configuration error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"gkw: data error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"gkw: numeric failure: {err}", file=sys.stderr)
        return 3
    except GkwError as err:
        print(f"gkw: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"gkw: data error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
