import json

import pytest

from deskflow.cli import _overrides, build_parser, main
from deskflow.config import RunConfig, resolve

SMALL = ["--model.n_layers", "1", "--model.n_heads", "2", "--model.d_model", "16", "--model.d_ff", "32", "--model.context", "32"]
TRAIN = ["--steps", "6", "--train.warmup_steps", "1", "--train.batch_size", "2", "--train.seq_len", "16"]


def write_ds(path, kind, instances):
    path.mkdir(parents=True, exist_ok=True)
    (path / f"{kind}.json").write_text(json.dumps({"type": kind, "instances": instances}))
    return path


@pytest.fixture
def corpus(tmp_path):
    texts = [{"text": "the cat sat on the mat and looked around the room. " * 2} for _ in range(4)]
    return write_ds(tmp_path / "corpus", "text_only", texts)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def pretrain(tmp_path, capsys, corpus, name="run", *extra):
    code, out, err = run(capsys, "pretrain", "--data", corpus, "--run-dir", tmp_path / name, *SMALL, *TRAIN, *extra)
    assert code == 0, err
    return tmp_path / name


class TestPrecedence:
    def test_flag_over_file_over_default(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"train": {"lr": 0.5, "batch_size": 3}}))
        ns = build_parser().parse_args(["pretrain", "--config", str(cfg_file), "--lr", "0.25"])
        cfg = resolve(ns.config, _overrides(ns))
        assert cfg.train.lr == 0.25
        assert cfg.train.batch_size == 3
        assert cfg.train.seq_len == RunConfig().train.seq_len

    def test_string_flags_stay_strings(self):
        ns = build_parser().parse_args(["infer", "--prompt", "123"])
        assert resolve(None, _overrides(ns)).generation.prompt == "123"


class TestUsage:
    def test_unknown_config_key(self, tmp_path, capsys):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"train": {"learning_rate": 1}}))
        code, _, err = run(capsys, "pretrain", "--config", cfg_file)
        assert code == 1 and err.startswith("error[usage]:") and "learning_rate" in err

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "pretrain", "--no-such-flag", "1")
        assert code == 1 and err.startswith("error[usage]:")

    def test_missing_subcommand(self, capsys):
        code, _, err = run(capsys)
        assert code == 1 and err.count("\n") == 1

    def test_wrong_value_type(self, capsys):
        code, _, err = run(capsys, "pretrain", "--train.batch_size", "two")
        assert code == 1 and "train.batch_size" in err

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "pretrain", "--run-dir", tmp_path / "r", *SMALL)
        assert code == 1 and "data.path" in err


class TestFormat:
    def test_mixed_dataset(self, tmp_path, capsys):
        d = write_ds(tmp_path / "mixed", "text_only", [{"text": "a"}])
        write_ds(d, "text2text", [{"input": "a", "output": "b"}])
        code, _, err = run(capsys, "pretrain", "--data", d, "--run-dir", tmp_path / "r", *SMALL)
        assert code == 2 and err.startswith("error[format]:")
        assert "text_only.json" in err and "text2text.json" in err


class TestRuns:
    def test_pretrain_layout(self, tmp_path, capsys, corpus):
        run_dir = pretrain(tmp_path, capsys, corpus)
        records = [json.loads(x) for x in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in records] == list(range(1, 7))
        assert (run_dir / "final").is_dir() and (run_dir / "loss.png").exists()
        saved = json.loads((run_dir / "run_config.json").read_text())
        assert saved["command"] == "pretrain" and saved["config"]["train"]["total_steps"] == 6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_exit(self, tmp_path, capsys, corpus):
        code, _, err = run(capsys, "pretrain", "--data", corpus, "--run-dir", tmp_path / "r", *SMALL, *TRAIN, "--lr", "1e30")
        assert code == 3 and err.startswith("error[numeric]:")

    def test_nan_in_config_file(self, tmp_path, capsys, corpus):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text('{"train": {"lr": NaN}}')
        code, _, err = run(capsys, "pretrain", "--config", cfg_file, "--data", corpus, "--run-dir", tmp_path / "r", *SMALL, *TRAIN)
        assert code == 3 and err.startswith("error[numeric]:")

    def test_resume_bitwise(self, tmp_path, capsys, corpus):
        ck = ["--train.checkpoint_every", "3"]
        straight = pretrain(tmp_path, capsys, corpus, "a", *ck)
        split = pretrain(tmp_path, capsys, corpus, "b", *ck)
        # pretend the run died after step 3
        for p in sorted((split / "checkpoints").glob("step_*"))[1:]:
            for f in p.iterdir():
                f.unlink()
            p.rmdir()
        code, _, err = run(capsys, "pretrain", "--resume", split)
        assert code == 0, err
        for name in ("weights.bin", "manifest.json"):
            assert (straight / "final" / name).read_bytes() == (split / "final" / name).read_bytes()
        assert (straight / "metrics.jsonl").read_text() == (split / "metrics.jsonl").read_text()

    def test_resume_wrong_command(self, tmp_path, capsys, corpus):
        run_dir = pretrain(tmp_path, capsys, corpus)
        code, _, err = run(capsys, "finetune", "--resume", run_dir)
        assert code == 1 and "pretrain" in err


class TestInfer:
    def test_speculative_greedy_matches_plain(self, tmp_path, capsys, corpus):
        target = pretrain(tmp_path, capsys, corpus, "t") / "final"
        code, _, _ = run(capsys, "init-model", "--out", tmp_path / "draft", *SMALL, "--model.init_seed", "7")
        assert code == 0
        common = ["--checkpoint", target, "--prompt", "the cat", "--max-new-tokens", "12", "--temperature", "0"]
        code, plain, _ = run(capsys, "infer", *common)
        assert code == 0
        code, drafted, err = run(capsys, "infer", *common, "--draft", tmp_path / "draft", "--gamma", "4")
        assert code == 0 and drafted == plain
        assert "acceptance_rate" in json.loads(err.strip().splitlines()[-1])

    def test_stream_matches_plain(self, tmp_path, capsys, corpus):
        target = pretrain(tmp_path, capsys, corpus, "t") / "final"
        common = ["--checkpoint", target, "--prompt", "the", "--max-new-tokens", "10", "--seed", "3"]
        _, plain, _ = run(capsys, "infer", *common)
        _, streamed, _ = run(capsys, "infer", *common, "--stream")
        assert streamed == plain

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0 and "deskflow" in capsys.readouterr().out


class TestOtherCommands:
    def test_eval_report(self, tmp_path, capsys, corpus):
        model = pretrain(tmp_path, capsys, corpus) / "final"
        prompts = write_ds(tmp_path / "prompts", "text2text", [{"input": "the", "output": "cat"}])
        code, out, err = run(
            capsys, "eval", "--checkpoint", model, "--data", prompts, "--eval-data", corpus, "--run-dir", tmp_path / "ev",
            "--max-new-tokens", "6", "--eval.seeds", "[0, 1]",
        )
        assert code == 0, err
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert report and (tmp_path / "ev" / "report.png").exists()
        assert "PPL" in (tmp_path / "ev" / "report.txt").read_text()

    def test_extend_vocab(self, tmp_path, capsys, corpus):
        model = pretrain(tmp_path, capsys, corpus) / "final"
        code, _, err = run(capsys, "extend-vocab", "--checkpoint", model, "--tokens", "<tool>", "</tool>", "--out", tmp_path / "ext")
        assert code == 0, err
        cfg = json.loads((tmp_path / "ext" / "config.json").read_text())
        assert cfg["model"]["vocab"] == 261
