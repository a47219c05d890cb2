import json
import subprocess
import sys

import pytest

from ogfr import cli
from ogfr.config import Config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = Config(seed=0).replace(data={"n_ids": 2, "imgs_per_id": 4}, optim={"max_steps": 3})
    (root / "cfg.json").write_text(cfg.to_json())
    assert cli.main(["gen-data", "--config", str(root / "cfg.json"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestGenData:
    def test_same_seed_same_digest(self, workspace, capsys):
        cfg = str(workspace / "cfg.json")
        cli.main(["gen-data", "--config", cfg, "--out", str(workspace / "d1")])
        a = _last_json(capsys)
        cli.main(["gen-data", "--config", cfg, "--out", str(workspace / "d2")])
        b = _last_json(capsys)
        assert a["digest"] == b["digest"] and a["train"] == 8

    def test_seed_override_changes_digest(self, workspace, capsys):
        cfg = str(workspace / "cfg.json")
        cli.main(["gen-data", "--config", cfg, "--out", str(workspace / "d3")])
        a = _last_json(capsys)
        cli.main(["gen-data", "--config", cfg, "--seed", "5", "--out", str(workspace / "d4")])
        assert _last_json(capsys)["digest"] != a["digest"]


class TestTrainEval:
    def test_outputs(self, workspace):
        run = workspace / "run"
        lines = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
        assert len(lines) == 4 and lines[-1]["final"]
        assert (run / "checkpoint.bin").read_bytes()[:8] == b"OGFRCKP1"

    def test_eval_writes_results(self, workspace, capsys):
        assert cli.main(["eval", str(workspace / "run" / "checkpoint.bin"), "--data", str(workspace / "data")]) == 0
        res = json.loads((workspace / "run" / "results.json").read_text())
        assert {"rank1", "rank5", "rank10", "mAP", "n_query", "n_gallery", "config_hash"} <= set(res)
        assert _last_json(capsys)["rank1"] == res["rank1"]

    def test_eval_train_split(self, workspace, tmp_path):
        out = tmp_path / "r.json"
        assert cli.main(["eval", str(workspace / "run" / "checkpoint.bin"), "--data", str(workspace / "data"),
                         "--split", "train", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["n_query"] == 2

    def test_resume_matches_uninterrupted_run(self, workspace, tmp_path):
        from ogfr.synth import read_archive
        from ogfr.train import Trainer

        cfg = Config.from_json((workspace / "cfg.json").read_text())
        tr = Trainer(cfg, read_archive(workspace / "data").splits["train"])
        tr.run(steps=2)
        tr.save(tmp_path / "mid.bin")
        rc = cli.main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                       "--out", str(tmp_path / "run"), "--resume", str(tmp_path / "mid.bin")])
        assert rc == 0
        assert (tmp_path / "run" / "checkpoint.bin").read_bytes() == (workspace / "run" / "checkpoint.bin").read_bytes()

    def test_data_hash_mismatch(self, workspace, tmp_path):
        cfg = Config.from_json((workspace / "cfg.json").read_text()).replace(seed=3)
        (tmp_path / "c.json").write_text(cfg.to_json())
        args = ["train", "--config", str(tmp_path / "c.json"), "--data", str(workspace / "data"),
                "--out", str(tmp_path / "run")]
        assert cli.main(args) == 2
        assert cli.main(args + ["--force"]) == 0

    def test_eval_config_mismatch(self, workspace, tmp_path):
        cfg = Config.from_json((workspace / "cfg.json").read_text()).replace(optim={"lr": 0.01})
        (tmp_path / "c.json").write_text(cfg.to_json())
        args = ["eval", str(workspace / "run" / "checkpoint.bin"), "--data", str(workspace / "data"),
                "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r.json")]
        assert cli.main(args) == 2
        assert cli.main(args + ["--force"]) == 0


class TestExitCodes:
    def test_missing_checkpoint(self, workspace, tmp_path):
        assert cli.main(["eval", str(tmp_path / "none.bin"), "--data", str(workspace / "data")]) == 4

    def test_missing_data(self, workspace, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 4

    def test_bad_magic(self, workspace, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"garbage!" * 4)
        assert cli.main(["eval", str(bad), "--data", str(workspace / "data")]) == 2

    def test_invalid_config(self, tmp_path):
        (tmp_path / "c.json").write_text('{"model": {"dim": 30}}')
        assert cli.main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["frobnicate"])
        assert info.value.code == 2

    def test_verify_invariants(self, capsys):
        assert cli.main(["verify", "invariants"]) == 0
        assert "all checks passed" in capsys.readouterr().out

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "ogfr", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "gen-data" in out.stdout
