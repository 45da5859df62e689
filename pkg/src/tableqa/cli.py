"""Command-line interface: one subcommand per pipeline stage.

Every config key is exposed as a flag of the same name on every subcommand
(and in ``--help``); precedence is defaults < --config file < explicit
flags.  Unknown flags are hard errors.  All stages are deterministic given
identical inputs and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bm25 as bm25_mod
from . import dedup as dedup_mod
from . import index as index_mod
from . import metrics as metrics_mod
from . import mining as mining_mod
from . import pipeline as pipeline_mod
from . import reader as reader_mod
from . import training as training_mod
from .config import Config, ConfigError, build_config, config_field_types
from .data import (
    DataFormatError,
    Question,
    load_corpus,
    load_examples,
    load_pairs,
    save_corpus,
    save_pairs,
)
from .encoder import CheckpointError, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("tableqa")

_BM25_MAGIC = b"BM25IDX\x01"
_EMB_MAGIC = b"EMBINDEX"


def _str2bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("configuration", "override any config key")
    group.add_argument("--config", type=Path, default=None, help="key=value config file")
    group.add_argument("--threads", type=int, default=1,
                       help="upper bound on intra-stage parallelism")
    for name, typ in config_field_types().items():
        flag_type = _str2bool if typ is bool else typ
        group.add_argument(f"--{name}", type=flag_type, default=None,
                           help=f"config key ({typ.__name__})")
    return parent


def _cfg_from_args(args: argparse.Namespace) -> Config:
    overrides = {name: getattr(args, name) for name in config_field_types()}
    return build_config(args.config, **overrides)


def _load_question_objects(path: Path) -> list[Question]:
    return [ex.question for ex in load_examples(path)]


def _examples_to_pairs(examples, corpus):
    """(question text, gold table) pairs; examples without a resolvable gold
    are dropped with a warning."""
    pairs = []
    kept = []
    for ex in examples:
        if ex.gold_table_id is None or ex.gold_table_id not in corpus:
            log.warning("question %s: gold table missing from corpus; dropped", ex.question_id)
            continue
        pairs.append((ex.question.text, corpus[ex.gold_table_id]))
        kept.append(ex)
    return pairs, kept


def cmd_dedup(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    threshold = args.threshold if args.threshold is not None else cfg.dedup_threshold
    corpus = load_corpus(args.in_path)
    reduced, mapping = dedup_mod.dedup_corpus(corpus, threshold)
    save_corpus(reduced, args.out)
    dedup_mod.save_idmap(mapping, args.map)
    log.info("dedup: %d -> %d tables", len(corpus), len(reduced))
    return 0


def cmd_index_bm25(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    boost = args.boost if args.boost is not None else cfg.bm25_boost
    corpus = load_corpus(args.in_path)
    idx = bm25_mod.build_index(corpus, boost=boost)
    bm25_mod.save_index(idx, args.out)
    log.info("indexed %d tables (boost=%d)", idx.n_docs, boost)
    return 0


def _sniff_index(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == _BM25_MAGIC:
        return "bm25"
    if head == _EMB_MAGIC:
        return "dense"
    raise DataFormatError(f"{path}: unrecognized index file (bad magic at offset 0)")


def cmd_retrieve(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    k = args.k if args.k is not None else cfg.top_k
    questions = _load_question_objects(args.questions)
    kind = _sniff_index(args.index)
    if kind == "bm25":
        idx = bm25_mod.load_index(args.index)
        run = metrics_mod.RetrievalRun(tag="bm25")
        for q in questions:
            run.add(q.question_id, bm25_mod.bm25_topk(idx, q, k))
    else:
        if args.checkpoint is None:
            raise ConfigError("dense retrieval needs --checkpoint for the question encoder")
        emb = index_mod.load_embeddings(args.index)
        params = load_checkpoint(args.checkpoint)
        run = index_mod.run_retrieval(emb, params, questions, k)
    metrics_mod.save_run(run, args.out)
    log.info("retrieved top-%d for %d questions (%s)", k, len(questions), run.tag)
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    k = args.k if args.k is not None else cfg.top_k
    emb = index_mod.load_embeddings(args.embeddings)
    params = load_checkpoint(args.checkpoint)
    from .encoder import encode_question

    for rank, (tid, score) in enumerate(index_mod.search(emb, encode_question(params, args.query), k), 1):
        sys.stdout.write(f"{rank}\t{tid}\t{score:.17g}\n")
    return 0


def cmd_pretrain_pairs(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    per_table = args.per_table if args.per_table is not None else cfg.ict_per_table
    corpus = load_corpus(args.tables)
    pairs = training_mod.generate_ict_pairs(corpus, per_table=per_table, seed=cfg.seed)
    save_pairs(pairs, args.out)
    log.info("generated %d metadata-span pairs", len(pairs))
    return 0


def _init_or_load_params(args: argparse.Namespace, cfg: Config):
    if getattr(args, "init", None) is not None:
        return load_checkpoint(args.init)
    return init_params(
        cfg.embed_dim, cfg.feature_dims, seed=cfg.seed,
        use_structure=cfg.use_structure, schema_only=cfg.schema_only,
    )


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    corpus = load_corpus(args.tables)
    pairs = load_pairs(args.pairs)
    dev = load_examples(args.dev) if args.dev else []
    data = []
    for p in pairs:
        if p.table_id not in corpus:
            log.warning("pair references unknown table %s; dropped", p.table_id)
            continue
        data.append((p.text, corpus[p.table_id]))
    state = training_mod.init_state(_init_or_load_params(args, cfg))
    state = training_mod.train(
        state, data, dev, corpus, cfg, max_steps=cfg.pretrain_steps, log_path=args.log
    )
    save_checkpoint(state.params, args.out)
    log.info("pre-trained for %d steps (best dev recall@10 %.3f)", state.step, state.best_dev_recall)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    corpus = load_corpus(args.tables)
    examples = load_examples(args.questions)
    dev = load_examples(args.dev) if args.dev else []
    pairs, kept = _examples_to_pairs(examples, corpus)
    negatives = None
    if args.negatives is not None:
        neg_map = mining_mod.load_negatives(args.negatives)
        negatives = []
        for ex in kept:
            tid = neg_map.get(ex.question_id)
            negatives.append(corpus[tid] if tid is not None and tid in corpus else None)
    state = training_mod.init_state(_init_or_load_params(args, cfg))
    state = training_mod.train(
        state, pairs, dev, corpus, cfg, negatives=negatives, log_path=args.log
    )
    save_checkpoint(state.params, args.out)
    log.info("trained for %d steps (best dev recall@10 %.3f)", state.step, state.best_dev_recall)
    return 0


def cmd_encode_corpus(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.tables)
    params = load_checkpoint(args.checkpoint)
    emb = index_mod.encode_corpus(params, corpus)
    index_mod.save_embeddings(emb, args.out)
    log.info("encoded %d tables (d=%d)", len(emb), emb.d)
    return 0


def cmd_mine(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    depth = args.depth if args.depth is not None else cfg.mining_depth
    run = metrics_mod.load_run(args.run)
    examples = load_examples(args.questions)
    corpus = load_corpus(args.tables)
    triples = mining_mod.mine_hard_negatives(run, examples, corpus, depth=depth)
    mining_mod.save_negatives(triples, args.out)
    log.info("mined %d hard negatives for %d questions", len(triples), len(examples))
    return 0


def cmd_train_reader(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    corpus = load_corpus(args.tables)
    examples = load_examples(args.questions)
    run = metrics_mod.load_run(args.run)
    rp = reader_mod.init_reader(
        cfg.feature_dims, r=cfg.reader_dim, hidden=cfg.reader_hidden, seed=cfg.seed
    )
    rp = reader_mod.train_reader(rp, run, examples, corpus, cfg)
    reader_mod.save_reader(rp, args.out)
    log.info("reader trained for %d steps", cfg.reader_steps)
    return 0


def cmd_answer(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    examples = load_examples(args.questions)
    run = metrics_mod.load_run(args.run)
    corpus = load_corpus(args.tables)
    rp = reader_mod.load_reader(args.reader)
    preds = []
    for ex in examples:
        cand_ids = [tid for tid, _ in run.rankings.get(ex.question_id, [])][: cfg.top_k]
        candidates = [corpus[tid] for tid in cand_ids if tid in corpus]
        if not candidates:
            log.warning("question %s has no candidates; empty answer", ex.question_id)
            preds.append(metrics_mod.Prediction(ex.question_id, None, "", 0.0, []))
            continue
        ans, per_candidate = reader_mod.predict(
            rp, ex.question, candidates, cfg.max_answer_len, cfg.spans_include_header
        )
        preds.append(
            metrics_mod.Prediction(
                question_id=ex.question_id,
                table_id=ans.table_id,
                answer=ans.text,
                score=ans.score,
                candidate_answers=[text for _, text in per_candidate],
            )
        )
    metrics_mod.save_predictions(preds, args.out)
    log.info("answered %d questions", len(preds))
    return 0


def _emit_report(report: metrics_mod.EvalReport, out: Path | None) -> None:
    text = report.to_json() + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def cmd_eval_retrieval(args: argparse.Namespace) -> int:
    run = metrics_mod.load_run(args.run)
    examples = load_examples(args.questions)
    ks = [int(x) for x in args.k.split(",")] if args.k else [1, 10, 50]
    idmap = dedup_mod.load_idmap(args.map) if args.map else None
    report = metrics_mod.retrieval_report(run, examples, ks, idmap)
    _emit_report(report, args.out)
    return 0


def cmd_eval_qa(args: argparse.Namespace) -> int:
    preds = metrics_mod.load_predictions(args.pred)
    examples = load_examples(args.questions)
    report = metrics_mod.qa_report(preds, examples)
    _emit_report(report, args.out)
    return 0


def cmd_significance(args: argparse.Namespace) -> int:
    examples = load_examples(args.questions)
    preds_a = {p.question_id: p for p in metrics_mod.load_predictions(args.pred_a)}
    preds_b = {p.question_id: p for p in metrics_mod.load_predictions(args.pred_b)}

    def correct(preds: dict, ex) -> int:
        p = preds.get(ex.question_id)
        if p is None:
            return 0
        em, f1 = metrics_mod.em_f1(p.answer, ex.answers)
        return em if args.metric == "em" else int(f1 == 1.0)

    a = [correct(preds_a, ex) for ex in examples]
    b = [correct(preds_b, ex) for ex in examples]
    stat, p_value = metrics_mod.mcnemar(a, b)
    obj = {
        "metric": args.metric,
        "n": len(examples),
        "accuracy_a": sum(a) / len(a) if a else 0.0,
        "accuracy_b": sum(b) / len(b) if b else 0.0,
        "statistic": stat,
        "p_value": p_value,
    }
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_recipe(args: argparse.Namespace) -> int:
    cfg = _cfg_from_args(args)
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    recipe = pipeline_mod.build_recipe(
        args.name,
        tables=Path(args.tables),
        train_q=Path(args.train) if args.train else None,
        dev_q=Path(args.dev) if args.dev else None,
        test_q=Path(args.test),
        workdir=workdir,
        cfg=cfg,
    )
    return pipeline_mod.run_recipe(recipe, workdir)


def cmd_selfcheck(args: argparse.Namespace) -> int:
    results = pipeline_mod.selfcheck()
    failed = 0
    for name, ok, detail in results:
        if ok:
            sys.stdout.write(f"PASS {name}\n")
        else:
            failed += 1
            sys.stdout.write(f"FAIL {name}: {detail}\n")
    sys.stdout.write(f"{len(results) - failed}/{len(results)} checks passed\n")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="tableqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dedup", parents=[parent], help="merge near-duplicate tables")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True, help="old_id -> representative_id TSV")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("index-bm25", parents=[parent], help="build the lexical index")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--boost", type=int, default=None)
    p.set_defaults(func=cmd_index_bm25)

    p = sub.add_parser("retrieve", parents=[parent],
                       help="rank tables for each question (lexical or dense index)")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("search", parents=[parent], help="ad-hoc dense query against an embedding index")
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--query", type=str, required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("pretrain-pairs", parents=[parent],
                       help="sample metadata-span pre-training pairs")
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--per-table", dest="per_table", type=int, default=None)
    p.set_defaults(func=cmd_pretrain_pairs)

    p = sub.add_parser("pretrain", parents=[parent], help="train the encoder on span-table pairs")
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--pairs", type=Path, required=True)
    p.add_argument("--dev", type=Path, default=None)
    p.add_argument("--init", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[parent], help="fine-tune the encoder on QA examples")
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--dev", type=Path, default=None)
    p.add_argument("--init", type=Path, default=None)
    p.add_argument("--negatives", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode-corpus", parents=[parent], help="embed every table offline")
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_encode_corpus)

    p = sub.add_parser("mine", parents=[parent], help="mine hard negatives from a run file")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train-reader", parents=[parent], help="train the span-extraction reader")
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_reader)

    p = sub.add_parser("answer", parents=[parent], help="extract answers from retrieved candidates")
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--reader", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("eval-retrieval", parents=[parent], help="recall@K report for a run file")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--k", type=str, default="1,10,50", help="comma-separated cutoffs")
    p.add_argument("--map", type=Path, default=None, help="dedup idmap for gold remapping")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-qa", parents=[parent], help="EM/F1 and oracle metrics")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval_qa)

    p = sub.add_parser("significance", parents=[parent], help="paired McNemar test between two prediction files")
    p.add_argument("--pred-a", dest="pred_a", type=Path, required=True)
    p.add_argument("--pred-b", dest="pred_b", type=Path, required=True)
    p.add_argument("--questions", type=Path, required=True)
    p.add_argument("--metric", choices=("em", "f1"), default="em")
    p.set_defaults(func=cmd_significance)

    p = sub.add_parser("recipe", parents=[parent], help="run a named multi-stage experiment")
    p.add_argument("--name", required=True, choices=pipeline_mod.RECIPE_NAMES)
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--train", type=Path, default=None)
    p.add_argument("--dev", type=Path, default=None)
    p.add_argument("--test", type=Path, required=True)
    p.set_defaults(func=cmd_recipe)

    p = sub.add_parser("selfcheck", parents=[parent], help="run the built-in invariant suite")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DataFormatError, ConfigError, CheckpointError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
