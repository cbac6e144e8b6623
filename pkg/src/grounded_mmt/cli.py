"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import model as mq
from .autodiff import NumericError
from .bpe import BpeError, bpe_decode, bpe_encode, bpe_train
from .checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .data import AlignmentError, DataFormatError, ParallelCorpus, load_features, read_lines, write_lines
from .metrics import MetricError, bleu, format_bleu, grounding_accuracy
from .synth import SynthConfig, SynthConfigError, read_annotations, read_lexicon, synth_generate
from .vocab import Vocabulary
from .trainer import Dataset, TrainConfig, TrainingError, params_from_checkpoint, run_ablation, run_lambda_sweep, train

log = logging.getLogger("grounded_mmt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dataset(src, tgt, feat, amb=None) -> Dataset:
    corpus = ParallelCorpus.load(src, tgt)
    feats = load_features(feat)
    if feats.n != len(corpus):
        raise AlignmentError(f"{feat}: {feats.n} feature rows for {len(corpus)} sentence pairs")
    ann = read_annotations(amb) if amb else None
    if ann is not None and len(ann) != len(corpus):
        raise AlignmentError(f"{amb}: {len(ann)} annotation lines for {len(corpus)} sentence pairs")
    return Dataset(corpus, feats, ann)


def _require(cfg: TrainConfig, *keys) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise UsageError(f"config is missing {', '.join(missing)}")


def _train_valid(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    _require(cfg, "train_src", "train_tgt", "train_feat", "valid_src", "valid_tgt", "valid_feat")
    return (_dataset(cfg.train_src, cfg.train_tgt, cfg.train_feat),
            _dataset(cfg.valid_src, cfg.valid_tgt, cfg.valid_feat, cfg.valid_amb or None))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_sentences=args.n_sentences, n_words=args.n_words, n_ambiguous=args.n_ambiguous,
        senses=args.senses, min_len=args.min_len, max_len=args.max_len, feat_dim=args.feat_dim,
        noise=args.noise, seed=args.seed,
    )
    paths = synth_generate(cfg).save(args.out)
    for key, p in paths.items():
        print(f"{key}\t{p}")
    return EXIT_OK


def cmd_bpe_train(args) -> int:
    corpus = [s for path in args.input for s in read_lines(path)]
    model = bpe_train(corpus, args.merges)
    model.save(args.output)
    print(f"learned {len(model.merges)} merges -> {args.output}")
    if args.apply:
        src, dst = args.apply
        write_lines(dst, [bpe_encode(model, s) for s in read_lines(src)])
    return EXIT_OK


def _manifest(cfg: TrainConfig, outputs: dict[str, str]) -> dict:
    hashes = {}
    for key in ("train_src", "train_tgt", "train_feat", "valid_src", "valid_tgt", "valid_feat", "valid_amb"):
        path = getattr(cfg, key)
        if path:
            hashes[key] = file_hash(path)
    return {"version": __version__, "seed": cfg.seed, "config": cfg.to_dict(), "data_hashes": hashes,
            "outputs": outputs}


def _config_from_manifest(path) -> TrainConfig:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = TrainConfig(**manifest["config"])
    for key, digest in manifest.get("data_hashes", {}).items():
        if file_hash(getattr(cfg, key)) != digest:
            raise DataFormatError(f"{getattr(cfg, key)}: content differs from the manifest ({key})")
    return cfg


def cmd_train(args) -> int:
    if bool(args.config) == bool(args.manifest):
        raise UsageError("train: give exactly one of --config or --manifest")
    cfg = load_config(args.config) if args.config else _config_from_manifest(args.manifest)
    if args.out_dir:
        cfg = cfg.replace(out_dir=args.out_dir)
    _require(cfg, "out_dir")
    train_data, valid_data = _train_valid(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"best": str(out / "best.ckpt"), "last": str(out / "last.ckpt"),
               "metrics": str(out / "metrics.tsv"), "manifest": str(out / "manifest.json")}
    (out / "manifest.json").write_text(json.dumps(_manifest(cfg, outputs), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    trainer, best = train(cfg, train_data, valid_data, checkpoint_dir=out, resume_from=args.resume,
                          log_timing=not args.no_timing)
    save_checkpoint(out / "best.ckpt", best)
    print(f"trained {trainer.epoch} epochs, best validation BLEU {format_bleu(trainer.best_score)}")
    return EXIT_OK


def cmd_translate(args) -> int:
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.src_vocab != first.src_vocab or c.tgt_vocab != first.tgt_vocab:
            raise CheckpointError("ensemble checkpoints use different vocabularies")
    models = [params_from_checkpoint(c) for c in ckpts]
    d_expected = models[0].dims.feat_dim
    feats = load_features(args.feat)
    if feats.d != d_expected:
        raise DataFormatError(f"{args.feat}: feature dimension mismatch, expected d={d_expected}, got d={feats.d}")
    sentences = read_lines(args.src)
    if feats.n < len(sentences):
        raise AlignmentError(f"{args.feat}: {feats.n} feature rows for {len(sentences)} sentences")
    src_vocab, tgt_vocab = Vocabulary(first.src_vocab), Vocabulary(first.tgt_vocab)
    use_visual = bool(first.config.get("use_visual", True))
    mode = "beam" if args.beam > 1 else "greedy"
    hyps = []
    for i, sent in enumerate(sentences):
        ids = src_vocab.encode(sent)
        if not ids:
            hyps.append([])
            continue
        out, _ = mq.translate(np.array(ids), feats.features[i], models, mode, args.beam, args.max_len, use_visual)
        toks = tgt_vocab.decode(out)
        hyps.append(bpe_decode(toks) if args.bpe_decode else toks)
    write_lines(args.out, hyps)
    print(f"translated {len(hyps)} sentences -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    refs = read_lines(args.ref)
    hyps = read_lines(args.hyp)
    print(f"BLEU\t{format_bleu(bleu(refs, hyps))}")
    if args.amb:
        lex = read_lexicon(args.lex) if args.lex else None
        acc = grounding_accuracy(hyps, refs, read_annotations(args.amb), lex)
        print(f"grounding_accuracy\t{100 * acc:.2f}")
    return EXIT_OK


def _test_set(args) -> Dataset | None:
    if not args.test_src:
        return None
    return _dataset(args.test_src, args.test_tgt, args.test_feat, args.test_amb)


def _write_report(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    train_data, valid_data = _train_valid(cfg)
    test = _test_set(args) or valid_data
    report = run_ablation(cfg, train_data, valid_data, test, seeds=args.seeds)
    _write_report(report.table(), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    train_data, valid_data = _train_valid(cfg)
    table = run_lambda_sweep(cfg, train_data, valid_data, _test_set(args), args.grid_a, args.grid_r, args.seeds)
    _write_report(table.table(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grounded-mmt", description="Visually grounded translation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic ambiguous corpus")
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--n-sentences", type=int, default=2000)
    s.add_argument("--n-words", type=int, default=40)
    s.add_argument("--n-ambiguous", type=int, default=8)
    s.add_argument("--senses", type=int, default=2)
    s.add_argument("--min-len", type=int, default=4)
    s.add_argument("--max-len", type=int, default=8)
    s.add_argument("--feat-dim", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bpe-train", help="learn BPE merges (and optionally apply them)")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--merges", type=int, default=10000)
    s.add_argument("--output", required=True)
    s.add_argument("--apply", nargs=2, metavar=("IN", "OUT"))
    s.set_defaults(func=cmd_bpe_train)

    s = sub.add_parser("train", help="train from a config file or a run manifest")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--out-dir")
    s.add_argument("--resume", help="last.ckpt to continue from")
    s.add_argument("--no-timing", action="store_true", help="write '-' instead of wall-clock seconds")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="decode a source file")
    s.add_argument("--checkpoint", nargs="+", required=True, help="one or more checkpoints (ensemble)")
    s.add_argument("--src", required=True)
    s.add_argument("--feat", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--beam", type=int, default=1)
    s.add_argument("--max-len", type=int, default=50)
    s.add_argument("--bpe-decode", action="store_true", help="join subwords back into words")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="BLEU and grounding accuracy")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--amb", help="annotation file for grounding accuracy")
    s.add_argument("--lex", help="sense lexicon")
    s.set_defaults(func=cmd_evaluate)

    for name, func, help_ in (("ablate", cmd_ablate, "train the five ablation configurations"),
                              ("sweep", cmd_sweep, "lambda grid for q-waae")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--seeds", type=int, nargs="+", default=[0])
        s.add_argument("--test-src")
        s.add_argument("--test-tgt")
        s.add_argument("--test-feat")
        s.add_argument("--test-amb")
        s.add_argument("--out", help="report table (also printed)")
        if name == "sweep":
            s.add_argument("--grid-a", type=float, nargs="+", default=[0.2, 0.5, 0.8])
            s.add_argument("--grid-r", type=float, nargs="+", default=[0.2, 0.5, 0.8])
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("grounded-mmt: a subcommand is required")
        if args.command in ("ablate", "sweep") and args.test_src and not (args.test_tgt and args.test_feat):
            raise UsageError(f"{args.command}: --test-src needs --test-tgt and --test-feat")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, AlignmentError, CheckpointError, BpeError, MetricError, SynthConfigError,
            mq.ModelError, OSError, UnicodeDecodeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
