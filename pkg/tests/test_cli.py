import json
import re
from pathlib import Path

from fastapi.testclient import TestClient

from tokenroute.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_USAGE,
    build_parser,
    build_serve_app,
    run,
)
from tokenroute.metrics import SWEEP_COLUMNS
from tokenroute.router import load_router

GOLDEN = Path(__file__).parent / "golden"

LLM_MARK = re.compile(r"\[\[.+?\]\]", re.DOTALL)


class TestUsage:
    def test_empty_argv_prints_usage_and_exits_2(self, capsys):
        assert run([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_flag_rejected(self):
        assert run(["generate", "--prompt", "x", "--unknown-flag", "1"]) == EXIT_USAGE

    def test_unknown_subcommand_rejected(self):
        assert run(["frobnicate"]) == EXIT_USAGE


class TestGenerate:
    def test_small_only_has_no_llm_markers(self, capsys):
        code = run(
            ["generate", "--mode", "small_only", "--prompt", "say something ", "--max-tokens", "12"]
        )
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert not LLM_MARK.search(out)

    def test_joint_marks_llm_tokens(self, capsys):
        code = run(
            ["generate", "--mode", "joint", "--prompt", "say something ", "--max-tokens", "20",
             "--threshold", "0.55", "--seed", "0", "--llm-seed", "42"]
        )
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert LLM_MARK.search(out)

    def test_json_output_carries_summary(self, capsys):
        code = run(
            ["generate", "--mode", "small_only", "--prompt", "say something ", "--max-tokens", "6",
             "--json"]
        )
        assert code == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["total_tokens"] == 6
        assert doc["llm_tokens"] == 0

    def test_events_out_writes_parseable_log(self, tmp_path, capsys):
        events = tmp_path / "run.events.jsonl"
        code = run(
            ["generate", "--mode", "small_only", "--prompt", "log it ", "--max-tokens", "5",
             "--events-out", str(events)]
        )
        assert code == EXIT_OK
        assert events.exists()
        code = run(["inspect", "events", str(events)])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "overall_s" in out

    def test_bad_threshold_is_config_error(self, capsys):
        code = run(["generate", "--prompt", "x", "--threshold", "1.5"])
        assert code == EXIT_CONFIG or code == 4  # validation error class


class TestServeApp:
    def test_config_endpoint_reports_flag_values(self):
        parser = build_parser()
        args = parser.parse_args(
            ["serve", "--llm-latency-ms", "900", "--comm-delay-ms", "170", "--burst", "2"]
        )
        app, _backend = build_serve_app(args)
        client = TestClient(app)
        doc = client.get("/v1/config").json()
        assert doc["llm_latency_s"] == 0.9
        assert doc["comm_delay_s"] == 0.17
        assert doc["llm_burst"] == 2

    def test_missing_console_dir_is_config_error(self, capsys):
        assert run(["serve", "--console", "does/not/exist"]) == EXIT_CONFIG


class TestBenchSweep:
    def test_oracle_task_sweep_writes_results(self, tmp_path, capsys):
        out_dir = tmp_path / "bench"
        code = run(
            ["bench", "sweep", "--oracle-task", "--items", "8", "--target-len", "10",
             "--thresholds", "0.4,0.7", "--out", str(out_dir), "--train-epochs", "60"]
        )
        assert code == EXIT_OK
        header = (out_dir / "results.csv").read_text().splitlines()[0].split(",")
        assert header == SWEEP_COLUMNS
        assert "small-only baseline" in capsys.readouterr().out

    def test_task_file_sweep(self, tmp_path, capsys):
        task_file = tmp_path / "task.jsonl"
        task_file.write_text('{"prompt": "ping ", "answer": "anything"}\n')
        out_dir = tmp_path / "bench2"
        code = run(
            ["bench", "sweep", "--task", str(task_file), "--thresholds", "0.5",
             "--max-tokens", "6", "--out", str(out_dir)]
        )
        assert code == EXIT_OK
        assert (out_dir / "results.csv").exists()

    def test_missing_task_source_is_config_error(self, tmp_path):
        assert run(["bench", "sweep", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def _predictable_corpus_lines(weights, n_lines=3, max_len=16):
    """Lines the small model itself continues, truncated so the text
    round-trips through UTF-8 exactly (plain-text corpus files cannot carry
    arbitrary bytes)."""
    from tokenroute.engine import BOS_ID, ByteTokenizer, decode_step, greedy_next, prefill

    tok = ByteTokenizer()
    lines = []
    idx = 0
    while len(lines) < n_lines and idx < 200:
        prompt = f"sample line {idx}: "
        idx += 1
        ids = [BOS_ID] + tok.encode(prompt)
        cache, out = prefill(weights, ids)
        cont = []
        for _ in range(max_len):
            token = greedy_next(out.logits)
            if token >= 128 or token in (10, 13):  # ascii only, no line breaks
                break
            cont.append(token)
            cache, out = decode_step(weights, cache, token)
        if len(cont) >= 1:
            lines.append(prompt + tok.decode(cont))
    assert len(lines) >= 2, "reference model produced too few ASCII continuations"
    return lines


class TestTrainRouter:
    def test_corpus_to_router_file(self, tmp_path, capsys, slm_weights):
        corpus = tmp_path / "corpus.txt"
        corpus.write_text("\n".join(_predictable_corpus_lines(slm_weights)) + "\n")
        out = tmp_path / "router.npz"
        dataset_out = tmp_path / "dataset.npz"
        code = run(
            ["train-router", "--corpus", str(corpus), "--out", str(out),
             "--dataset-out", str(dataset_out), "--epochs", "20"]
        )
        assert code == EXIT_OK
        model = load_router(out, expected_dim=64)
        assert model.input_dim == 64
        assert dataset_out.exists()
        assert "train accuracy" in capsys.readouterr().out

    def test_unpredictable_corpus_gives_helpful_error(self, tmp_path, capsys):
        corpus = tmp_path / "corpus.txt"
        corpus.write_text("the quick brown fox\njumps over the lazy dog\n")
        code = run(["train-router", "--corpus", str(corpus), "--out", str(tmp_path / "r.npz")])
        assert code == EXIT_CONFIG
        assert "hint" in capsys.readouterr().err


class TestInspect:
    def test_wire_inspection_of_golden_file(self, capsys):
        code = run(["inspect", "wire", str(GOLDEN / "api_format_request.json")])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "session123" in out and "req456" in out
        assert "token_index:     15" in out

    def test_wire_inspection_rejects_bad_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        assert run(["inspect", "wire", str(bad)]) == EXIT_CONFIG


class TestSettingsPrecedence:
    def test_config_file_overrides_defaults(self, tmp_path, monkeypatch):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"max_tokens": 4}))
        parser = build_parser()
        from tokenroute.cli import _overlay_defaults

        argv = ["--config", str(cfg_file), "generate", "--prompt", "x"]
        _overlay_defaults(parser, argv)
        args = parser.parse_args(argv)
        assert args.max_tokens == 4

    def test_env_overrides_file_and_flag_overrides_env(self, tmp_path, monkeypatch):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"max_tokens": 4, "threshold": 0.2}))
        monkeypatch.setenv("TOKENROUTE_MAX_TOKENS", "9")
        parser = build_parser()
        from tokenroute.cli import _overlay_defaults

        argv = ["--config", str(cfg_file), "generate", "--prompt", "x", "--threshold", "0.6"]
        _overlay_defaults(parser, argv)
        args = parser.parse_args(argv)
        assert args.max_tokens == 9  # env beats file
        assert args.threshold == 0.6  # flag beats file
