"""Command-line pipeline: gen-data, train, decode, eval, rescore.

Every subcommand takes ``--config FILE`` (JSON object keyed by flag names,
dashes or underscores). Values from the config file override the flags.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from . import lattice as latmod
from . import synthdata
from .decoder import DecoderConfig, MergeStrategy, NoHypothesisError
from .evaluation import BEAM_SWEEP, beam_sweep, decode_corpus, default_strategy, nbest_lists, rescore_corpus
from .lattice import LatticeError
from .lm import NGramLM, train_ngram
from .model.network import Transducer, checkpoint_bytes, preset
from .numerics import ContractError
from .train import TrainConfig, TrainingDiverged, format_curve, train

log = logging.getLogger("vqlattice")

VARIANTS = {"baseline": "baseline", "vlc": "vlc", "vq": "vq"}
# flags that name files; they stay out of the config hash so relocated runs match
_PATH_KEYS = {"config", "out", "data", "checkpoint", "dev", "test", "lm_data", "lm"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# provenance


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(args: argparse.Namespace) -> str:
    settings = {k: v for k, v in vars(args).items() if k not in _PATH_KEYS and k != "func"}
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(args, checkpoint=None) -> List[str]:
    lines = [
        f"# vqlattice {__version__} {args.command}",
        f"# config_hash {config_hash(args)}",
        f"# seed {args.seed}",
    ]
    if checkpoint is not None:
        lines.append(f"# checkpoint_sha256 {sha256_file(checkpoint)}")
    return lines


def write_report(path, header: List[str], body: List[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(header + body) + "\n")


# ----------------------------------------------------------------------------
# helpers


def _load_model(path) -> Transducer:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Transducer.load(path)


def _load_data(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return synthdata.load(path)


def _strategy(args, model: Transducer) -> MergeStrategy:
    if args.strategy is None:
        return default_strategy(model.config.variant)
    try:
        strategy = MergeStrategy.parse(args.strategy)
        strategy.check_variant(model.config.variant)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    return strategy


def _fmt_labels(vocab, labels) -> str:
    return " ".join(vocab.decode(labels))


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    task = synthdata.SynthTask(num_labels=args.num_labels, noise=args.noise, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    body = ["split\tcount\tdigest"]
    for split, count in (("train", args.train_count), ("dev", args.dev_count), ("test", args.test_count)):
        ds = synthdata.generate(task, count, split)
        synthdata.save(ds, out / f"{split}.txt")
        body.append(f"{split}\t{count}\t{sha256_file(out / f'{split}.txt')[:16]}")
    write_report(out / "gen_data_report.txt", provenance(args), body)
    return 0


def cmd_train(args) -> int:
    data = _load_data(args.data)
    cfg = preset(VARIANTS[args.variant], num_labels=len(data.vocab), feat_dim=data.feat_dim)
    model = Transducer.init(cfg, data.vocab, seed=args.seed)
    tcfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        temp_start=args.temp_start, temp_end=args.temp_end,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, curve = train(model, data, tcfg, checkpoint_dir=out / "epochs" if args.keep_epochs else None)
    extra = {"variant": args.variant, "train": {k: v for k, v in vars(tcfg).items()}}
    (out / "model.ckpt").write_bytes(checkpoint_bytes(model, extra))
    (out / "loss_curve.tsv").write_text(format_curve(curve))
    write_report(
        out / "train_report.txt",
        provenance(args, out / "model.ckpt"),
        [f"variant\t{args.variant}", f"utterances\t{len(data)}", f"final_nll\t{curve[-1][1]:.6f}"],
    )
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_data(args.data)
    strategy = _strategy(args, model)
    config = DecoderConfig(beam=args.beam, u_max_ratio=args.u_max_ratio, strategy=strategy, emit_lattice=True)
    corpus = decode_corpus(model, data, config)
    out = Path(args.out)
    (out / "lattices").mkdir(parents=True, exist_ok=True)
    lines = []
    checksum = model.vocab.checksum()
    for utt, res in zip(data, corpus.results):
        lines.append(f"{utt.uid}\t{_fmt_labels(model.vocab, res.best.labels)}\t{res.best.score:.9g}")
        if not args.no_lattice:
            latmod.save(res.lattice, out / "lattices" / f"{utt.uid}.lat", checksum)
    (out / "transcripts.txt").write_text("\n".join(lines) + "\n")
    invalid = corpus.invalid()
    body = [
        f"strategy\t{strategy}",
        f"beam\t{args.beam}",
        f"wer\t{corpus.wer():.6f}",
        f"oracle_wer\t{corpus.oracle_wer():.6f}",
        f"density\t{corpus.density():.6f}",
        f"invalid_lattices\t{len(invalid)}",
    ]
    write_report(out / "decode_report.txt", provenance(args, args.checkpoint), body)
    if invalid:
        raise LatticeError(f"{len(invalid)} lattices failed validation")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_data(args.data)
    strategy = _strategy(args, model)
    beams = [int(b) for b in str(args.beams).split(",")]
    if any(b < 1 for b in beams):
        raise UsageError("beam sizes must be >= 1")
    rows = beam_sweep(model, data, strategy, beams, args.u_max_ratio)
    body = [f"# strategy {strategy}", "beam\twer\toracle_wer\tdensity\tinvalid_lattices"]
    body += [f"{r.beam}\t{r.wer:.6f}\t{r.oracle_wer:.6f}\t{r.density:.6f}\t{r.invalid}" for r in rows]
    write_report(args.out, provenance(args, args.checkpoint), body)
    if any(r.invalid for r in rows):
        raise LatticeError("some lattices failed validation")
    return 0


def cmd_rescore(args) -> int:
    model = _load_model(args.checkpoint)
    dev, test = _load_data(args.dev), _load_data(args.test)
    symbols = model.vocab.symbols
    if args.lm is not None:
        lm = NGramLM.load(args.lm)
    else:
        corpus = _load_data(args.lm_data)
        lm = train_ngram([corpus.vocab.decode(u.labels) for u in corpus], symbols, args.order, args.k)
    strategy = _strategy(args, model)
    config = DecoderConfig(beam=args.beam, u_max_ratio=args.u_max_ratio, strategy=strategy)
    dev_nb = nbest_lists(decode_corpus(model, dev, config), args.nbest, args.margin)
    test_nb = nbest_lists(decode_corpus(model, test, config), args.nbest, args.margin)
    outcome = rescore_corpus(
        dev_nb, [u.labels for u in dev], test_nb, [u.labels for u in test], lm, symbols, args.lam
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lm.save(out / "lm.txt")
    lines = [f"{u.uid}\t{_fmt_labels(model.vocab, h)}" for u, h in zip(test, outcome.hypotheses)]
    (out / "rescored.txt").write_text("\n".join(lines) + "\n")
    body = [f"# strategy {strategy}", f"# beam {args.beam} nbest {args.nbest} margin {args.margin}"]
    if outcome.table:
        body.append("lambda\tdev_errors")
        body += [f"{lam:.1f}\t{err}" for lam, err in outcome.table]
    body += [
        f"best_lambda\t{outcome.lam:.1f}",
        f"test_wer_before\t{outcome.baseline_wer:.6f}",
        f"test_wer_after\t{outcome.rescored_wer:.6f}",
        f"absolute_improvement\t{outcome.baseline_wer - outcome.rescored_wer:.6f}",
    ]
    write_report(out / "rescore_report.txt", provenance(args, args.checkpoint), body)
    return 0


# ----------------------------------------------------------------------------
# argument parsing


def _decode_flags(p):
    p.add_argument("--checkpoint", required=True, help="model checkpoint (model.ckpt)")
    p.add_argument("--strategy", default=None,
                   help="none | same_label_sequence | vq_state | vq_code | limited_context[:k] "
                        "(default: per model variant)")
    p.add_argument("--u-max-ratio", type=float, default=1.0, help="U_max = ceil(ratio * T)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqlattice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="JSON file whose keys override flags")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("gen-data", cmd_gen_data, "write train/dev/test synthetic datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-count", type=int, default=3000)
    p.add_argument("--dev-count", type=int, default=200)
    p.add_argument("--test-count", type=int, default=200)
    p.add_argument("--num-labels", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)

    p = command("train", cmd_train, "train a transducer")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="vq")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--temp-start", type=float, default=TrainConfig.temp_start)
    p.add_argument("--temp-end", type=float, default=TrainConfig.temp_end)
    p.add_argument("--keep-epochs", action="store_true", help="also save one checkpoint per epoch")

    p = command("decode", cmd_decode, "beam search with lattice generation")
    _decode_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--no-lattice", action="store_true", help="skip writing lattice files")

    p = command("eval", cmd_eval, "WER / oracle WER / density over a beam sweep")
    _decode_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--beams", default=",".join(map(str, BEAM_SWEEP)))

    p = command("rescore", cmd_rescore, "n-gram rescoring of pruned lattices")
    _decode_flags(p)
    p.add_argument("--dev", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--lm-data", default=None, help="dataset whose labels train the n-gram model")
    p.add_argument("--lm", default=None, help="previously saved n-gram model")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--k", type=float, default=0.1)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--nbest", type=int, default=100)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--lam", type=float, default=None, help="fixed LM weight (default: tune on dev)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _apply_config(args, parser):
    if args.config is None:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        overrides = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    known = vars(args)
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("func", "command", "config"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        setattr(args, dest, value)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        args = _apply_config(args, parser)
        if args.command == "rescore" and (args.lm is None) == (args.lm_data is None):
            raise UsageError("rescore needs exactly one of --lm-data or --lm")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, FileNotFoundError, NoHypothesisError, LatticeError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
