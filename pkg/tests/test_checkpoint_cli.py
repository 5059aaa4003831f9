import json
import subprocess
import sys

import numpy as np
import pytest

from cpmtp import checkpoint, cli
from cpmtp import corpus as corp
from cpmtp import heads
from cpmtp import training as tr


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1]) if out else None


class TestCheckpoint:
    def test_round_trip_scratch(self, tmp_path):
        model = tr.init_model(tr.TrainConfig(rank=3, horizon=2, embed_dim=5), 7)
        checkpoint.save(tmp_path / "m.ckpt", model, {"a": 1})
        back, cfg = checkpoint.load(tmp_path / "m.ckpt")
        assert cfg == {"a": 1} and back.mode == heads.SCRATCH
        np.testing.assert_array_equal(back.head.factor_weights, model.head.factor_weights)
        np.testing.assert_array_equal(back.head.gate_weights, model.head.gate_weights)
        np.testing.assert_array_equal(back.encoder.token_table, model.encoder.token_table)
        assert back.encoder.decay == model.encoder.decay

    def test_round_trip_finetune(self):
        base = tr.init_model(tr.TrainConfig(rank=1, horizon=1, embed_dim=4), 6)
        model = tr.finetune_model(base, 2, 2)
        back, cfg = checkpoint.loads(checkpoint.dumps(model))
        assert cfg is None and back.mode == heads.FINETUNE
        assert not back.encoder.trainable
        np.testing.assert_array_equal(back.head.adapters, model.head.adapters)
        np.testing.assert_array_equal(back.head.shared_head, model.head.shared_head)

    def test_header(self):
        model = tr.init_model(tr.TrainConfig(rank=3, horizon=2, embed_dim=5), 7)
        data = checkpoint.dumps(model)
        assert data[:8] == b"CPMTPCKP"
        assert np.frombuffer(data[8:36], "<u4").tolist() == [1, 0, 2, 3, 7, 5, 4]

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            checkpoint.loads(b"NOTACKPT" + bytes(40))


@pytest.fixture
def data_file(tmp_path, capsys):
    path = tmp_path / "tokens.bin"
    code, res = run(["gen-data", "--vocab", "8", "--clusters", "2", "--length", "5000",
                     "--out", str(path), "--spec-out", str(tmp_path / "spec.json")], capsys)
    assert code == 0 and res["tokens"] == 5000
    return path


class TestCli:
    def test_train_zero_steps_is_initialization(self, tmp_path, data_file, capsys):
        ck, metrics = tmp_path / "m.ckpt", tmp_path / "m.jsonl"
        code, res = run(["train", "--data", str(data_file), "--steps", "0", "--ranks", "2",
                         "--embed-dim", "6", "--out", str(ck), "--metrics", str(metrics)], capsys)
        assert code == 0
        model, cfg = checkpoint.load(ck)
        init = tr.init_model(tr.TrainConfig(rank=2, horizon=2, embed_dim=6), 8)
        np.testing.assert_array_equal(model.head.factor_weights, init.head.factor_weights)
        np.testing.assert_array_equal(model.encoder.token_table, init.encoder.token_table)
        lines = metrics.read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["header"]
        assert cfg["steps"] == 0 and res["config"]["steps"] == 0

    def test_rank_sweep_and_bench(self, tmp_path, data_file, capsys):
        ck = tmp_path / "m.ckpt"
        code, res = run(["train", "--data", str(data_file), "--steps", "5", "--ranks", "1,2",
                         "--embed-dim", "6", "--batch-size", "32", "--out", str(ck),
                         "--metrics", str(tmp_path / "m.jsonl")], capsys)
        assert code == 0 and [r["rank"] for r in res["runs"]] == [1, 2]
        assert (tmp_path / "m_r1.ckpt").exists() and (tmp_path / "m_r2.jsonl").exists()
        code, res = run(["bench", "--checkpoints", str(tmp_path / "m_r1.ckpt"),
                         "--data", str(data_file), "--prompts", "5", "--max-tokens", "10",
                         "--out", str(tmp_path / "bench.json")], capsys)
        assert code == 0
        assert {r["mode"] for r in res["results"]} == {"greedy", "stochastic", "tree"}
        for row in res["results"]:
            assert row["avg_accepted"] >= 1
            assert row.get("lossless", True)
        by_mode = {r["mode"]: r for r in res["results"]}
        # a single branching value is a uniform tree, never worse than greedy
        assert by_mode["tree"]["branching"] == [5, 5]
        assert by_mode["tree"]["avg_accepted"] >= by_mode["greedy"]["avg_accepted"]
        assert json.loads((tmp_path / "bench.json").read_text())["results"]

    def test_config_file_and_overrides(self, tmp_path, data_file, capsys):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"steps": 2, "embed_dim": 4, "batch_size": 8}))
        code, res = run(["train", "--config", str(cfg_path), "--data", str(data_file),
                         "--steps", "3", "--out", str(tmp_path / "m.ckpt"),
                         "--metrics", str(tmp_path / "m.jsonl")], capsys)
        assert code == 0
        assert res["config"]["steps"] == 3 and res["config"]["embed_dim"] == 4
        assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 4

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"stepz": 2}))
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--config", str(cfg_path)])
        assert info.value.code == 2

    def test_bad_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--no-such-flag", "1"])
        assert info.value.code == 2

    def test_runtime_failure_report(self, tmp_path, capsys):
        code, res = run(["train", "--data", str(tmp_path / "missing.bin")], capsys)
        assert code == 1 and res["ok"] is False and res["error"] == "FileNotFoundError"

    def test_sample_and_finetune(self, tmp_path, data_file, capsys):
        ck = tmp_path / "f.ckpt"
        code, res = run(["finetune", "--data", str(data_file), "--base-steps", "5", "--steps", "5",
                         "--embed-dim", "6", "--batch-size", "16", "--out", str(ck),
                         "--metrics", str(tmp_path / "f.jsonl"), "--threads", "2"], capsys)
        assert code == 0 and np.isfinite(res["val_joint_nll"])
        assert checkpoint.load(ck)[0].mode == heads.FINETUNE
        code, res = run(["sample", "--checkpoint", str(ck), "--prompt", "1,2,3", "--count", "4",
                         "--seed", "3"], capsys)
        assert code == 0 and np.array(res["samples"]).shape == (4, 2)
        again = run(["sample", "--checkpoint", str(ck), "--prompt", "1,2,3", "--count", "4",
                     "--seed", "3"], capsys)[1]
        assert again["samples"] == res["samples"]

    def test_threads_from_environment(self, monkeypatch):
        monkeypatch.setenv("CP_SPEC_THREADS", "3")
        args = cli.build_parser().parse_args(["train"])
        assert cli.resolve("train", args)["threads"] == 3

    def test_verify_command(self, tmp_path):
        out = tmp_path / "verify.json"
        proc = subprocess.run([sys.executable, "-m", "cpmtp", "verify", "--out", str(out)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stdout + proc.stderr
        report = json.loads(out.read_text())
        assert report["ok"] and len(report["checks"]) == 6
        assert "PASS" in proc.stderr
