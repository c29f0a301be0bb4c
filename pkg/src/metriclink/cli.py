"""Command-line entry point: ``metriclink {prepare,candgen,train,eval,link}``.

Settings come from an optional INI-style ``--config`` file with
``[paths]``, ``[candgen]`` and ``[train]`` sections; command-line flags
override it.  All randomness derives from ``--seed``.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from ._io import open_text, write_atomic
from .candgen import CandGenParams, CandidateIndex, read_candidates_tsv, write_candidates_tsv
from .corpus import Corpus, dump_pubtator, expand_corpus, load_pubtator, resolve_gold
from .embed import Tables, load_subword_table, load_word_vectors
from .lexicon import load_medic
from .metricnet import load_checkpoint, save_checkpoint
from .pipeline import (
    ConfigError,
    Featurizer,
    TrainConfig,
    candidate_fn,
    evaluate,
    mention_text,
    rank,
    train,
    write_history,
    write_report,
)
from .plotting import plot_candidates, plot_eval, plot_history

log = logging.getLogger("metriclink")

SPLITS = ("train", "test")

# option name -> (config section, key, type)
_SETTINGS = {
    "lexicon": ("paths", "lexicon", str),
    "train": ("paths", "train", str),
    "test": ("paths", "test", str),
    "vectors": ("paths", "vectors", str),
    "subword": ("paths", "subword", str),
    "checkpoint": ("paths", "checkpoint", str),
    "out": ("paths", "out", str),
    "t1": ("candgen", "t1", float),
    "t2": ("candgen", "t2", float),
    "k1": ("candgen", "k1", int),
    "k2": ("candgen", "k2", int),
    "alpha": ("train", "alpha", float),
    "lr": ("train", "lr", float),
    "epochs": ("train", "max_epochs", int),
    "patience": ("train", "patience", int),
    "batch_size": ("train", "batch_size", int),
    "validation_fraction": ("train", "validation_fraction", float),
    "finetune_embeddings": ("train", "finetune_embeddings", bool),
    "use_subword": ("train", "use_subword", bool),
    "abbrev": ("train", "use_abbrev_expansion", bool),
    "seed": ("train", "seed", int),
}


class CLIError(Exception):
    pass


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    cp = configparser.ConfigParser()
    if args.config:
        if not Path(args.config).is_file():
            raise CLIError(f"missing config file: {args.config}")
        cp.read(args.config, encoding="utf-8")
    for name, (section, key, typ) in _SETTINGS.items():
        if getattr(args, name, None) is not None or not cp.has_option(section, key):
            continue
        if typ is bool:
            value = cp.getboolean(section, key)
        else:
            value = typ(cp.get(section, key))
        setattr(args, name, value)
    return args


def _require(args, *names) -> None:
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            raise CLIError(f"--{name.replace('_', '-')} is required")
        if not Path(value).exists():
            raise CLIError(f"missing file: {value}")


def _candgen_params(args) -> CandGenParams:
    d = CandGenParams()
    return CandGenParams(
        args.t1 if args.t1 is not None else d.t1,
        args.t2 if args.t2 is not None else d.t2,
        args.k1 if args.k1 is not None else d.k1,
        args.k2 if args.k2 is not None else d.k2,
    )


def _train_config(args) -> TrainConfig:
    d = TrainConfig()
    pick = lambda v, dv: dv if v is None else v  # noqa: E731
    return TrainConfig(
        alpha=pick(args.alpha, d.alpha),
        lr=pick(args.lr, d.lr),
        max_epochs=pick(args.epochs, d.max_epochs),
        patience=pick(args.patience, d.patience),
        batch_size=pick(args.batch_size, d.batch_size),
        seed=pick(args.seed, d.seed),
        validation_fraction=pick(args.validation_fraction, d.validation_fraction),
        finetune_embeddings=bool(args.finetune_embeddings),
        use_subword=bool(args.use_subword),
        use_abbrev_expansion=bool(args.abbrev),
    )


def _tables(args) -> Tables:
    word = sub = None
    if args.vectors:
        _require(args, "vectors")
        word = load_word_vectors(args.vectors)
    if args.use_subword:
        _require(args, "subword")
        sub = load_subword_table(args.subword)
    if word is None and sub is None:
        raise CLIError("--vectors is required (or --subword with --use-subword)")
    return Tables(word, sub)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepared(out: Path, split: str) -> Path:
    return out / "prepared" / f"{split}.txt"


def _load_split(args, out: Path, split: str) -> Optional[Corpus]:
    """Prefer the prepared (expanded) corpus in ``out``; fall back to the raw path."""
    path = _prepared(out, split)
    if not path.exists():
        raw = getattr(args, split, None)
        if raw is None:
            return None
        _require(args, split)
        path = Path(raw)
    return load_pubtator(path, split)


def _load_candidates(out: Path, split: str):
    path = out / f"candidates.{split}.tsv"
    if not path.exists():
        return None
    with open_text(path) as f:
        return read_candidates_tsv(f)


@contextmanager
def _outputs() -> Iterator[list[Path]]:
    """Collect written paths; remove them all if the command fails."""
    written: list[Path] = []
    try:
        yield written
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise


def _write_text(written: list[Path], path: Path, render) -> None:
    buf = io.StringIO(newline="")
    render(buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    written.append(path)
    write_atomic(path, buf.getvalue().encode("utf-8"))


def cmd_prepare(args) -> int:
    _require(args, "lexicon")
    lex = load_medic(args.lexicon)
    out = _out_dir(args)
    rows = []
    with _outputs() as written:
        for split in SPLITS:
            if getattr(args, split) is None:
                continue
            _require(args, split)
            corpus = expand_corpus(load_pubtator(getattr(args, split), split))
            _write_text(written, _prepared(out, split), lambda f, c=corpus: dump_pubtator(c, f))
            unmapped = sum(1 for _, m in corpus.mentions() if not resolve_gold(m, lex))
            expanded = sum(1 for _, m in corpus.mentions() if m.expanded is not None)
            rows.append((split, len(corpus), corpus.n_mentions(), len(corpus.unique_concepts()), expanded, unmapped))
        if not rows:
            raise CLIError("give --train and/or --test")
        header = ("split", "documents", "mentions", "unique_concepts", "expanded_mentions", "unmapped_mentions")
        table = "\t".join(header) + "\n" + "".join("\t".join(map(str, r)) + "\n" for r in rows)
        _write_text(written, out / "stats.tsv", lambda f: f.write(table))
    print(f"lexicon\t{len(lex)} concepts")
    sys.stdout.write(table)
    return 0


def cmd_candgen(args) -> int:
    _require(args, "lexicon")
    lex = load_medic(args.lexicon)
    tables = _tables(args)
    params = _candgen_params(args)
    out = _out_dir(args)
    index = CandidateIndex(lex, tables)
    abbrev = bool(args.abbrev)
    done = 0
    with _outputs() as written:
        for split in SPLITS:
            corpus = _load_split(args, out, split)
            if corpus is None:
                continue
            items = list(corpus.mentions())
            texts = [mention_text(m, abbrev) for _, m in items]
            unique = list(dict.fromkeys(texts))
            if args.jobs > 1:
                with ThreadPoolExecutor(args.jobs) as pool:
                    sets = list(pool.map(lambda t: index.generate(t, params), unique))
            else:
                sets = [index.generate(t, params) for t in unique]
            by_text = dict(zip(unique, sets))
            _write_text(written, out / f"candidates.{split}.tsv", lambda f, s=sets: write_candidates_tsv(s, f))
            hits = [bool(set(resolve_gold(m, lex)) & set(by_text[t].concept_ids())) for (_, m), t in zip(items, texts)]
            recall = sum(hits) / len(hits) if hits else 0.0
            fig = out / f"candidates.{split}.png"
            written.append(fig)
            plot_candidates([len(by_text[t]) for t in texts], hits, fig, title=split)
            print(f"{split}\tmentions {len(items)}\trecall {recall:.4f}")
            done += 1
        if not done:
            raise CLIError("no corpus found: run prepare or give --train/--test")
    return 0


def cmd_train(args) -> int:
    _require(args, "lexicon")
    lex = load_medic(args.lexicon)
    tables = _tables(args)
    params = _candgen_params(args)
    cfg = _train_config(args)
    out = _out_dir(args)
    corpus = _load_split(args, out, "train")
    if corpus is None:
        raise CLIError("no training corpus: run prepare or give --train")
    cands = candidate_fn(lex, tables, params, cache=_load_candidates(out, "train"))
    result = train(corpus, lex, tables, cfg, params, candidates=cands)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    with _outputs() as written:
        written.append(ckpt)
        save_checkpoint(result.model, ckpt)
        _write_text(written, out / "history.csv", lambda f: write_history(result.history, f))
        fig = out / "history.png"
        written.append(fig)
        plot_history(result.history, fig, result.best_epoch)
    last = result.history[-1]
    print(
        f"triplets {len(result.pool.triplets)}\tskipped {len(result.pool.skipped)}\t"
        f"epochs {last.epoch}\tbest_epoch {result.best_epoch}\tcheckpoint {ckpt}"
    )
    return 0


def _load_model(args, out: Path):
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    if not ckpt.exists():
        raise CLIError(f"missing checkpoint: {ckpt}")
    return load_checkpoint(ckpt)


def cmd_eval(args) -> int:
    _require(args, "lexicon")
    out = _out_dir(args)
    model = _load_model(args, out)
    lex = load_medic(args.lexicon)
    tables = _tables(args)
    params = _candgen_params(args)
    corpus = _load_split(args, out, "test")
    if corpus is None:
        raise CLIError("no test corpus: run prepare or give --test")
    cands = candidate_fn(lex, tables, params, cache=_load_candidates(out, "test"))
    result = evaluate(model, corpus, lex, tables, params, use_abbrev_expansion=bool(args.abbrev), candidates=cands, jobs=args.jobs)
    with _outputs() as written:
        _write_text(written, out / "report.tsv", lambda f: write_report(result, f))
        fig = out / "eval.png"
        written.append(fig)
        plot_eval(result, fig)
    print(f"accuracy {result.accuracy:.4f} ({result.tp}/{result.total})")
    return 0


def cmd_link(args) -> int:
    _require(args, "lexicon")
    out = Path(args.out or ".")
    model = _load_model(args, out)
    lex = load_medic(args.lexicon)
    tables = _tables(args)
    cs = CandidateIndex(lex, tables).generate(args.mention, _candgen_params(args))
    pred = rank(model, args.mention, cs, Featurizer(model, tables))
    if not pred.ranked:
        print("no candidates", file=sys.stderr)
        return 1
    for cid, score in pred.ranked[: args.top]:
        print(f"{cid}\t{lex[cid].preferred_name}\t{score:.6f}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "candgen": cmd_candgen,
    "train": cmd_train,
    "eval": cmd_eval,
    "link": cmd_link,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="INI file with [paths], [candgen], [train] sections")
    g.add_argument("--seed", type=int, help="seed for every random choice (default 0)")
    g.add_argument("--jobs", type=int, default=1, help="worker threads for per-mention work")
    g.add_argument("--out", help="output directory (default .)")
    g.add_argument("-v", "--verbose", action="store_true")

    paths = common.add_argument_group("inputs")
    paths.add_argument("--lexicon", help="MEDIC TSV (.gz ok)")
    paths.add_argument("--train", help="training corpus, PubTator (.gz ok)")
    paths.add_argument("--test", help="test corpus, PubTator (.gz ok)")
    paths.add_argument("--vectors", help="text word-vector table")
    paths.add_argument("--subword", help="binary subword table")
    paths.add_argument("--checkpoint", help="model checkpoint (default OUT/model.ckpt)")

    cg = common.add_argument_group("candidate generation")
    cg.add_argument("--t1", type=float, help="cosine threshold (0.7)")
    cg.add_argument("--t2", type=float, help="Jaccard threshold (0.1)")
    cg.add_argument("--k1", type=int, help="cosine candidates kept (3)")
    cg.add_argument("--k2", type=int, help="Jaccard candidates kept (7)")

    tr = common.add_argument_group("training")
    tr.add_argument("--alpha", type=float, help="triplet margin (1.0)")
    tr.add_argument("--lr", type=float, help="Adam learning rate (0.001)")
    tr.add_argument("--epochs", type=int, help="maximum epochs (50)")
    tr.add_argument("--patience", type=int, help="early-stopping patience (5)")
    tr.add_argument("--batch-size", type=int, help="triplets per Adam step (32)")
    tr.add_argument("--validation-fraction", type=float, help="held-out share of training abstracts (0.1)")
    tr.add_argument("--finetune-embeddings", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--use-subword", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--abbrev", action=argparse.BooleanOptionalAction, default=None, help="link abbreviation-expanded mention text")

    parser = argparse.ArgumentParser(prog="metriclink", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="parse corpora, expand abbreviations, print statistics")
    sub.add_parser("candgen", parents=[common], help="generate candidate sets and report recall")
    sub.add_parser("train", parents=[common], help="train the triplet encoder")
    sub.add_parser("eval", parents=[common], help="accuracy@1 on the test split")
    link = sub.add_parser("link", parents=[common], help="rank concepts for one mention")
    link.add_argument("mention")
    link.add_argument("--top", type=int, default=5)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _merge_config(args)
        return COMMANDS[args.command](args)
    except (CLIError, ConfigError, ValueError, OSError) as exc:
        print(f"metriclink {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
