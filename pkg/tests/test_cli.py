"""End-to-end command-line workflow on a tiny synthetic setup.

Commands run in-process through ``dispatch`` so exit codes and outputs are
asserted directly.
"""

import json

import numpy as np
import pytest

from micerank import checkpoint, retrieval
from micerank.cli import dispatch
from micerank.evalbench import BenchReport
from micerank.masking import MaskStep

TINY_TRAIN = [
    "--steps", "12", "--batch-size", "4", "--warmup", "3", "--validate-every", "6",
    "--layers", "2", "--hidden", "16", "--heads", "2", "--ff", "24",
    "--max-query", "6", "--max-doc", "16", "--ell-star", "1",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> bm25 -> tiny CE train -> tiny mid-fusion train + doc cache."""
    root = tmp_path_factory.mktemp("ws")
    data = root / "data"
    assert dispatch([
        "synth", "--out-dir", str(data), "--docs", "24", "--queries", "12",
        "--vocab-size", "64", "--seed", "0",
    ]) == 0
    assert dispatch([
        "bm25", "--corpus", str(data / "corpus.jsonl"), "--queries", str(data / "queries.jsonl"),
        "--k", "10", "--out", str(root / "bm25.trec"),
    ]) == 0
    assert dispatch([
        "train", "--corpus", str(data / "corpus.jsonl"), "--queries", str(data / "queries.jsonl"),
        "--qrels", str(data / "qrels.tsv"), "--out-dir", str(root / "ce"),
        "--variant", "step1", *TINY_TRAIN,
    ]) == 0
    assert dispatch([
        "train", "--corpus", str(data / "corpus.jsonl"), "--queries", str(data / "queries.jsonl"),
        "--qrels", str(data / "qrels.tsv"), "--out-dir", str(root / "mice"),
        "--variant", "mice", "--k-inter", "1", *TINY_TRAIN,
    ]) == 0
    assert dispatch([
        "encode-docs", "--model", str(root / "mice" / "model.bin"),
        "--corpus", str(data / "corpus.jsonl"), "--out", str(root / "cache.bin"),
    ]) == 0
    return root


class TestPipeline:
    def test_artifacts_exist(self, workspace):
        for rel in ["data/corpus.jsonl", "data/queries.jsonl", "data/qrels.tsv",
                    "bm25.trec", "ce/model.bin", "ce/metrics.jsonl",
                    "mice/model.bin", "cache.bin"]:
            assert (workspace / rel).exists(), rel

    def test_rerank_ce_then_eval(self, workspace, capsys):
        data = workspace / "data"
        assert dispatch([
            "rerank", "--model", str(workspace / "ce" / "model.bin"), "--mode", "ce",
            "--queries", str(data / "queries.jsonl"), "--corpus", str(data / "corpus.jsonl"),
            "--candidates", str(workspace / "bm25.trec"), "--out", str(workspace / "ce.trec"),
        ]) == 0
        capsys.readouterr()
        assert dispatch([
            "eval", "--run", str(workspace / "ce.trec"), "--qrels", str(data / "qrels.tsv"),
            "--metric", "rr@10",
        ]) == 0
        out = capsys.readouterr().out.strip()
        assert 0.0 <= float(out) <= 1.0

    def test_rerank_precomp_matches_online_ordering(self, workspace):
        data = workspace / "data"
        assert dispatch([
            "rerank", "--model", str(workspace / "mice" / "model.bin"), "--mode", "mice",
            "--queries", str(data / "queries.jsonl"), "--corpus", str(data / "corpus.jsonl"),
            "--candidates", str(workspace / "bm25.trec"), "--out", str(workspace / "online.trec"),
        ]) == 0
        assert dispatch([
            "rerank", "--model", str(workspace / "mice" / "model.bin"), "--mode", "mice-precomp",
            "--queries", str(data / "queries.jsonl"), "--corpus", str(data / "corpus.jsonl"),
            "--candidates", str(workspace / "bm25.trec"), "--cache", str(workspace / "cache.bin"),
            "--out", str(workspace / "precomp.trec"),
        ]) == 0
        online = retrieval.read_trec_run(workspace / "online.trec")
        precomp = retrieval.read_trec_run(workspace / "precomp.trec")
        assert set(online) == set(precomp)
        for qid in online:
            assert [d for d, _ in online[qid]] == [d for d, _ in precomp[qid]]

    def test_ablate_equals_module_composition(self, workspace):
        data = workspace / "data"
        assert dispatch([
            "ablate", "--model", str(workspace / "ce" / "model.bin"), "--step", "2",
            "--queries", str(data / "queries.jsonl"), "--corpus", str(data / "corpus.jsonl"),
            "--candidates", str(workspace / "bm25.trec"), "--out", str(workspace / "ablate.trec"),
        ]) == 0

        weights, _ = checkpoint.load_weights(workspace / "ce" / "model.bin", dtype=np.float32)
        from micerank.transformer import spec_for

        spec = spec_for(MaskStep.STEP2, weights.config)
        corpus = retrieval.read_jsonl(data / "corpus.jsonl")
        vocab = retrieval.build_vocab(t for _, t in corpus)
        doc_tokens = {d: retrieval.ensure_nonempty(vocab.encode(t)) for d, t in corpus}
        scorer = retrieval.CrossEncoderScorer(weights, spec, vocab, doc_tokens)
        run = retrieval.read_trec_run(workspace / "bm25.trec")
        expected = {}
        for qid, text in retrieval.read_jsonl(data / "queries.jsonl"):
            cands = [d for d, _ in run.get(qid, [])]
            if cands:
                expected[qid] = retrieval.rerank(qid, text, cands, scorer).doc_ids()
        got = retrieval.read_trec_run(workspace / "ablate.trec")
        assert {q: [d for d, _ in rows] for q, rows in got.items()} == expected

    def test_eval_perfect_run_prints_one(self, tmp_path, capsys):
        run = tmp_path / "perfect.trec"
        qrels = tmp_path / "qrels.tsv"
        run.write_text("q1 Q0 d1 1 3.0 t\nq1 Q0 d2 2 2.0 t\n")
        qrels.write_text("q1 0 d1 1\nq1 0 d2 1\n")
        assert dispatch(["eval", "--run", str(run), "--qrels", str(qrels),
                         "--metric", "ndcg@10"]) == 0
        assert capsys.readouterr().out.strip() == "1.0000"

    def test_bench_writes_report(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert dispatch([
            "bench", "--mode", "mice-precomp", "--batch", "2", "--n", "3", "--m", "6",
            "--trials", "10", "--warmup", "3", "--layers", "2", "--hidden", "16",
            "--heads", "2", "--ff", "24", "--vocab-size", "64",
            "--ell-star", "1", "--k-inter", "1", "--out", str(out),
        ]) == 0
        report = BenchReport.from_json(out.read_text())
        assert report.mode == "mice-precomp"
        assert "docs/s" in capsys.readouterr().out

    def test_sweep_writes_csv(self, workspace, tmp_path):
        data = workspace / "data"
        out = tmp_path / "sweep.csv"
        assert dispatch([
            "sweep", "--model", str(workspace / "ce" / "model.bin"),
            "--corpus", str(data / "corpus.jsonl"), "--queries", str(data / "queries.jsonl"),
            "--qrels", str(data / "qrels.tsv"), "--k-min", "1", "--out", str(out),
        ]) == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "k_inter,rr10"
        assert len(rows) >= 2

    def test_rerank_in_float64(self, workspace, tmp_path):
        data = workspace / "data"
        assert dispatch([
            "rerank", "--model", str(workspace / "ce" / "model.bin"), "--mode", "ce",
            "--precision", "f64", "--threads", "2",
            "--queries", str(data / "queries.jsonl"), "--corpus", str(data / "corpus.jsonl"),
            "--candidates", str(workspace / "bm25.trec"), "--out", str(tmp_path / "f64.trec"),
        ]) == 0
        assert (tmp_path / "f64.trec").exists()

    def test_build_vocab(self, workspace, tmp_path):
        out = tmp_path / "vocab.json"
        assert dispatch([
            "build-vocab", "--corpus", str(workspace / "data" / "corpus.jsonl"),
            "--out", str(out),
        ]) == 0
        assert "tokens" in json.loads(out.read_text())


class TestExitCodes:
    def test_missing_required_flag_is_usage_error(self, capsys):
        assert dispatch(["synth"]) == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_flag_rejected(self):
        assert dispatch(["synth", "--out-dir", "/tmp/x", "--bogus", "1"]) == 1

    def test_unknown_command_rejected(self):
        assert dispatch(["frobnicate"]) == 1

    def test_no_command_rejected(self):
        assert dispatch([]) == 1

    def test_missing_file_is_data_error(self, tmp_path):
        assert dispatch([
            "eval", "--run", str(tmp_path / "absent.trec"),
            "--qrels", str(tmp_path / "absent.tsv"),
        ]) == 2

    def test_bad_checkpoint_is_data_error(self, tmp_path, capsys):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"NOTMAGIC" + bytes(64))
        code = dispatch([
            "encode-docs", "--model", str(junk), "--corpus", str(tmp_path / "c.jsonl"),
            "--out", str(tmp_path / "o.bin"),
        ])
        assert code == 2

    def test_wrong_cache_hash_is_data_error(self, workspace, tmp_path):
        data = workspace / "data"
        other = tmp_path / "othermodel"
        assert dispatch([
            "train", "--corpus", str(data / "corpus.jsonl"), "--queries", str(data / "queries.jsonl"),
            "--qrels", str(data / "qrels.tsv"), "--out-dir", str(other),
            "--variant", "mice", "--k-inter", "1", "--seed", "5", *TINY_TRAIN,
        ]) == 0
        code = dispatch([
            "rerank", "--model", str(other / "model.bin"), "--mode", "mice-precomp",
            "--queries", str(data / "queries.jsonl"), "--corpus", str(data / "corpus.jsonl"),
            "--candidates", str(workspace / "bm25.trec"), "--cache", str(workspace / "cache.bin"),
            "--out", str(tmp_path / "r.trec"),
        ])
        assert code == 2

    def test_nan_checkpoint_is_numeric_error(self, workspace, tmp_path, capsys):
        data = workspace / "data"
        weights, step = checkpoint.load_weights(workspace / "ce" / "model.bin")
        weights.score_w.data[:] = np.nan
        poisoned = tmp_path / "nan.bin"
        checkpoint.save_weights(poisoned, weights, step=step)
        code = dispatch([
            "rerank", "--model", str(poisoned), "--mode", "ce",
            "--queries", str(data / "queries.jsonl"), "--corpus", str(data / "corpus.jsonl"),
            "--candidates", str(workspace / "bm25.trec"), "--out", str(tmp_path / "r.trec"),
        ])
        assert code == 3
        assert "numeric" in capsys.readouterr().err
