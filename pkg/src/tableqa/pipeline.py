"""Named multi-stage recipes with a content-hash manifest, plus selfcheck.

A recipe is an ordered list of CLI stages sharing one config snapshot.
Before anything runs, the recipe's external inputs are checked; before each
stage, that stage's inputs are checked.  After each stage a manifest row
(stage, input hashes, output hashes, wall time) is appended, so stage skew
between reruns is detectable by diffing hashes.

Recipe names mirror the retrieval experiment matrix: bm25_baseline, dtr,
dtr_text (no structural channels), dtr_schema (title/header tokens only),
dtr_minus_pt (no pre-training), dtr_plus_hn / dtr_plus_hnbm25 (retrained
with mined negatives), and dtr_qa (retriever plus reader, end to end).
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config

log = logging.getLogger(__name__)

RECIPE_NAMES = (
    "bm25_baseline",
    "dtr",
    "dtr_text",
    "dtr_schema",
    "dtr_minus_pt",
    "dtr_plus_hn",
    "dtr_plus_hnbm25",
    "dtr_qa",
)


@dataclass
class Stage:
    name: str
    argv: list[str]
    inputs: list[Path]
    outputs: list[Path]


@dataclass
class PipelineRecipe:
    name: str
    stages: list[Stage]
    external_inputs: list[Path]


def write_config_snapshot(cfg: Config, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(Config):
            value = getattr(cfg, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{f.name}={value}\n")


def build_recipe(
    name: str,
    tables: Path,
    train_q: Path | None,
    dev_q: Path | None,
    test_q: Path,
    workdir: Path,
    cfg: Config,
) -> PipelineRecipe:
    if name not in RECIPE_NAMES:
        raise ValueError(f"unknown recipe {name!r}; choose from {RECIPE_NAMES}")
    w = workdir
    snapshot = w / "config.snapshot"

    variant_cfg = cfg
    if name == "dtr_text":
        variant_cfg = cfg.replace(use_structure=False)
    elif name == "dtr_schema":
        variant_cfg = cfg.replace(schema_only=True)
    write_config_snapshot(variant_cfg, snapshot)
    base = ["--config", str(snapshot)]

    def stage(stage_name: str, argv: list[str], inputs: list[Path], outputs: list[Path]) -> Stage:
        return Stage(name=stage_name, argv=argv + base, inputs=inputs, outputs=outputs)

    needs_training = name != "bm25_baseline"
    external = [tables, test_q]
    if needs_training:
        if train_q is None or dev_q is None:
            raise ValueError(f"recipe {name!r} needs --train and --dev question files")
        external += [train_q, dev_q]

    stages: list[Stage] = []

    if name == "bm25_baseline":
        bm25_idx = w / "bm25.idx"
        run = w / "run.bm25.tsv"
        report = w / "report.bm25.json"
        stages.append(stage("index-bm25", ["index-bm25", "--in", str(tables), "--out", str(bm25_idx)],
                            [tables], [bm25_idx]))
        stages.append(stage("retrieve", ["retrieve", "--index", str(bm25_idx), "--questions",
                                         str(test_q), "--out", str(run)],
                            [bm25_idx, test_q], [run]))
        stages.append(stage("eval-retrieval", ["eval-retrieval", "--run", str(run), "--questions",
                                               str(test_q), "--out", str(report)],
                            [run, test_q], [report]))
        return PipelineRecipe(name=name, stages=stages, external_inputs=external)

    pairs = w / "pairs.jsonl"
    ckpt_pt = w / "checkpoint.pretrain.bin"
    ckpt = w / "checkpoint.bin"
    emb = w / "embeddings.bin"
    run_test = w / "run.dense.tsv"
    report = w / "report.dense.json"

    pretrained = name != "dtr_minus_pt"
    if pretrained:
        stages.append(stage("pretrain-pairs",
                            ["pretrain-pairs", "--tables", str(tables), "--out", str(pairs)],
                            [tables], [pairs]))
        stages.append(stage("pretrain",
                            ["pretrain", "--tables", str(tables), "--pairs", str(pairs),
                             "--dev", str(dev_q), "--out", str(ckpt_pt)],
                            [tables, pairs, dev_q], [ckpt_pt]))

    train_argv = ["train", "--tables", str(tables), "--questions", str(train_q),
                  "--dev", str(dev_q), "--out", str(ckpt)]
    train_inputs = [tables, train_q, dev_q]
    if pretrained:
        train_argv += ["--init", str(ckpt_pt)]
        train_inputs.append(ckpt_pt)
    stages.append(stage("train", train_argv, train_inputs, [ckpt]))
    stages.append(stage("encode-corpus",
                        ["encode-corpus", "--tables", str(tables), "--checkpoint", str(ckpt),
                         "--out", str(emb)],
                        [tables, ckpt], [emb]))

    if name in ("dtr_plus_hn", "dtr_plus_hnbm25"):
        run_mine = w / "run.mining.tsv"
        negatives = w / "negatives.tsv"
        ckpt_hn = w / "checkpoint.hn.bin"
        emb_hn = w / "embeddings.hn.bin"
        if name == "dtr_plus_hn":
            stages.append(stage("retrieve",
                                ["retrieve", "--index", str(emb), "--checkpoint", str(ckpt),
                                 "--questions", str(train_q), "--k", str(max(cfg.mining_depth, cfg.top_k)),
                                 "--out", str(run_mine)],
                                [emb, ckpt, train_q], [run_mine]))
        else:
            bm25_idx = w / "bm25.idx"
            stages.append(stage("index-bm25",
                                ["index-bm25", "--in", str(tables), "--out", str(bm25_idx)],
                                [tables], [bm25_idx]))
            stages.append(stage("retrieve",
                                ["retrieve", "--index", str(bm25_idx), "--questions", str(train_q),
                                 "--k", str(max(cfg.mining_depth, cfg.top_k)), "--out", str(run_mine)],
                                [bm25_idx, train_q], [run_mine]))
        stages.append(stage("mine",
                            ["mine", "--run", str(run_mine), "--questions", str(train_q),
                             "--tables", str(tables), "--out", str(negatives)],
                            [run_mine, train_q, tables], [negatives]))
        retrain_argv = ["train", "--tables", str(tables), "--questions", str(train_q),
                        "--dev", str(dev_q), "--negatives", str(negatives), "--out", str(ckpt_hn)]
        retrain_inputs = [tables, train_q, dev_q, negatives]
        if pretrained:
            retrain_argv += ["--init", str(ckpt_pt)]
            retrain_inputs.append(ckpt_pt)
        stages.append(stage("train+negatives", retrain_argv, retrain_inputs, [ckpt_hn]))
        stages.append(stage("encode-corpus",
                            ["encode-corpus", "--tables", str(tables), "--checkpoint", str(ckpt_hn),
                             "--out", str(emb_hn)],
                            [tables, ckpt_hn], [emb_hn]))
        emb, ckpt = emb_hn, ckpt_hn

    stages.append(stage("retrieve",
                        ["retrieve", "--index", str(emb), "--checkpoint", str(ckpt),
                         "--questions", str(test_q), "--out", str(run_test)],
                        [emb, ckpt, test_q], [run_test]))
    stages.append(stage("eval-retrieval",
                        ["eval-retrieval", "--run", str(run_test), "--questions", str(test_q),
                         "--out", str(report)],
                        [run_test, test_q], [report]))

    if name == "dtr_qa":
        run_train = w / "run.train.tsv"
        reader_file = w / "reader.bin"
        predictions = w / "predictions.jsonl"
        qa_report = w / "report.qa.json"
        stages.append(stage("retrieve",
                            ["retrieve", "--index", str(emb), "--checkpoint", str(ckpt),
                             "--questions", str(train_q), "--out", str(run_train)],
                            [emb, ckpt, train_q], [run_train]))
        stages.append(stage("train-reader",
                            ["train-reader", "--tables", str(tables), "--questions", str(train_q),
                             "--run", str(run_train), "--out", str(reader_file)],
                            [tables, train_q, run_train], [reader_file]))
        stages.append(stage("answer",
                            ["answer", "--questions", str(test_q), "--run", str(run_test),
                             "--tables", str(tables), "--reader", str(reader_file),
                             "--out", str(predictions)],
                            [test_q, run_test, tables, reader_file], [predictions]))
        stages.append(stage("eval-qa",
                            ["eval-qa", "--pred", str(predictions), "--questions", str(test_q),
                             "--out", str(qa_report)],
                            [predictions, test_q], [qa_report]))

    return PipelineRecipe(name=name, stages=stages, external_inputs=external)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def run_recipe(recipe: PipelineRecipe, workdir: Path) -> int:
    """Execute stages in order; stop on first failure, keeping partial outputs."""
    from .cli import main as cli_main  # deferred: cli imports this module

    missing = [str(p) for p in recipe.external_inputs if not p.exists()]
    if missing:
        log.error("recipe %s: missing inputs before execution: %s", recipe.name, ", ".join(missing))
        return 2
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = workdir / "manifest.tsv"
    for stage in recipe.stages:
        missing = [str(p) for p in stage.inputs if not p.exists()]
        if missing:
            log.error("stage %s: missing inputs: %s", stage.name, ", ".join(missing))
            return 2
        started = time.monotonic()
        rc = cli_main(stage.argv)
        elapsed = time.monotonic() - started
        if rc != 0:
            log.error("stage %s failed with exit code %d", stage.name, rc)
            return rc
        in_hashes = ",".join(f"{p.name}={_sha256(p)}" for p in stage.inputs)
        out_hashes = ",".join(f"{p.name}={_sha256(p)}" for p in stage.outputs)
        with open(manifest, "a", encoding="utf-8") as fh:
            fh.write(f"{recipe.name}\t{stage.name}\t{in_hashes}\t{out_hashes}\t{elapsed:.3f}\n")
    return 0


def selfcheck() -> list[tuple[str, bool, str]]:
    """Built-in invariant suite over generated fixtures; returns (name, ok, detail)."""
    import tempfile

    from . import dedup, synth
    from .data import Question, Table
    from .encoder import (
        CheckpointError,
        encode_question,
        init_params,
        load_checkpoint,
        question_features,
        save_checkpoint,
        table_features,
    )
    from .index import EmbeddingIndex, search
    from .training import (
        ScoreBatch,
        hard_negative_loss,
        in_batch_loss,
        loss_and_grads,
        row_softmax,
    )

    results: list[tuple[str, bool, str]] = []

    def check(name: str, fn) -> None:
        try:
            fn()
            results.append((name, True, ""))
        except AssertionError as exc:
            results.append((name, False, str(exc)))
        except Exception as exc:  # surface unexpected failures as failures
            results.append((name, False, f"{type(exc).__name__}: {exc}"))

    def loss_uniform() -> None:
        for batch in (2, 4, 8, 16):
            loss, _ = in_batch_loss(ScoreBatch(S=np.zeros((batch, batch))))
            assert abs(loss - np.log(batch)) < 1e-9, f"B={batch}: {loss}"
            hloss, _, _ = hard_negative_loss(
                ScoreBatch(S=np.zeros((batch, batch)), S_hard=np.zeros((batch, batch)))
            )
            assert abs(hloss - np.log(2 * batch)) < 1e-9, f"B={batch}: {hloss}"

    def softmax_properties() -> None:
        rng = np.random.default_rng(11)
        logits = rng.normal(0, 3, size=(8, 8))
        probs = row_softmax(logits)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        loss_a, grad = in_batch_loss(ScoreBatch(S=logits))
        loss_b, _ = in_batch_loss(ScoreBatch(S=logits + 7.5))
        assert abs(loss_a - loss_b) < 1e-9, "shift invariance"
        assert np.all(np.abs(grad.sum(axis=1)) < 1e-9), "gradient row sums"

    def gradient_check() -> None:
        dims, d = 1024, 6
        params = init_params(d, dims, seed=23)
        tables = [
            Table(f"t{i}", f"page{i} words", "v1", header=("c1", "c2"),
                  rows=((f"val{i}", "shared"),))
            for i in range(3)
        ]
        q_feats = [question_features(f"page{i} shared", dims) for i in range(3)]
        t_feats = [table_features(t, dims) for t in tables]
        _, grads = loss_and_grads(params, q_feats, t_feats)
        h = 1e-3
        for key in ("q_tower", "t_tower"):
            arr = getattr(params, key)
            grad = grads[key]
            entries = np.argwhere(grad != 0)[:50]
            for pos in map(tuple, entries):
                orig = arr[pos]
                arr[pos] = orig + h
                lp, _ = loss_and_grads(params, q_feats, t_feats)
                arr[pos] = orig - h
                lm, _ = loss_and_grads(params, q_feats, t_feats)
                arr[pos] = orig
                fd = (lp - lm) / (2 * h)
                rel = abs(fd - grad[pos]) / max(abs(fd), abs(grad[pos]), 1e-10)
                assert rel < 1e-4, f"{key}{pos}: rel err {rel}"

    def hard_negative_limit() -> None:
        rng = np.random.default_rng(29)
        for _ in range(20):
            S = rng.normal(0, 2, size=(4, 4))
            base, _ = in_batch_loss(ScoreBatch(S=S))
            masked, _, _ = hard_negative_loss(ScoreBatch(S=S, S_hard=np.full((4, 4), -1e9)))
            assert abs(base - masked) < 1e-6

    def mips_exactness() -> None:
        rng = np.random.default_rng(31)
        vectors = rng.normal(0, 1, size=(300, 16)).astype(np.float32)
        idx = EmbeddingIndex(table_ids=[f"t{i:04d}" for i in range(300)], vectors=vectors)
        for _ in range(10):
            q = rng.normal(0, 1, size=16)
            scores = vectors.astype(np.float64) @ q
            oracle = sorted(range(300), key=lambda i: (-scores[i], idx.table_ids[i]))
            for k in (1, 5, 20):
                got = [tid for tid, _ in search(idx, q, k)]
                want = [idx.table_ids[i] for i in oracle[:k]]
                assert got == want, f"k={k}"

    def dedup_determinism() -> None:
        corpus, expected = synth.dedup_fixture_corpus()
        reference = None
        for _ in range(10):
            _, mapping = dedup.dedup_corpus(corpus)
            clusters: dict[str, set[str]] = {}
            for old, rep in mapping.items():
                clusters.setdefault(rep, set()).add(old)
            merged = {frozenset(ms) for ms in clusters.values() if len(ms) > 1}
            assert merged == expected, f"merged {merged}"
            if reference is None:
                reference = mapping
            assert mapping == reference, "mapping changed between runs"

    def checkpoint_roundtrip() -> None:
        params = init_params(4, 1024, seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ck.bin"
            save_checkpoint(params, path)
            loaded = load_checkpoint(path)
            assert np.allclose(loaded.q_tower, params.q_tower, atol=1e-6)
            h_a = encode_question(loaded, Question("q", "hello world"))
            h_b = encode_question(loaded, Question("q", "hello world"))
            assert np.array_equal(h_a, h_b)
            truncated = Path(tmp) / "bad.bin"
            truncated.write_bytes(path.read_bytes()[:100])
            try:
                load_checkpoint(truncated)
                raise AssertionError("corrupt checkpoint accepted")
            except CheckpointError as exc:
                assert "offset" in str(exc), f"no offset in: {exc}"

    check("loss_uniform_logits", loss_uniform)
    check("softmax_properties", softmax_properties)
    check("gradient_check", gradient_check)
    check("hard_negative_masked_limit", hard_negative_limit)
    check("mips_exact_topk", mips_exactness)
    check("dedup_determinism", dedup_determinism)
    check("checkpoint_roundtrip", checkpoint_roundtrip)
    return results
