import json
import os

import pytest

from rlplace.cli import main

SCENE = ["--n-mounts", "6", "--n-frames", "6", "--n-vehicles", "8"]
FAST = ["--samples", "6", "--epochs", "30"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


def only_dir(root, prefix):
    dirs = [d for d in os.listdir(root) if d.startswith(prefix)]
    assert len(dirs) == 1, dirs
    return os.path.join(root, dirs[0])


def tree_bytes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as fh:
            out[name] = fh.read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-scene", "--out", str(root), "--seed", "5"] + SCENE) == 0
    scen = os.path.join(only_dir(root, "gen-scene"), "scenario.json")
    assert main(["train", "--out", str(root), "--scenario", scen] + FAST) == 0
    model = os.path.join(only_dir(root, "train"), "model.json")
    return root, scen, model


class TestSubcommands:
    def test_gen_scene_files(self, workspace):
        root, scen, _ = workspace
        assert json.load(open(scen))["version"] == "rlplace.scenario/1"
        cfg = json.load(open(os.path.join(os.path.dirname(scen), "config.json")))
        assert cfg["seed"] == 5 and cfg["params"]["n_mounts"] == 6

    def test_train_outputs(self, workspace):
        root, _, model = workspace
        d = os.path.dirname(model)
        for name in ("loss.csv", "sample0_ability.pgm", "sample0_confidence.csv",
                     "sample0_mask.pgm", "config.json"):
            assert os.path.exists(os.path.join(d, name))
        doc = json.load(open(model))
        assert len(doc["weights"]) == 4 and doc["version"] == "rlplace.model/1"
        cfg = json.load(open(os.path.join(d, "config.json")))
        assert cfg["gamma"] == 0.1 and cfg["threshold"] == 0.2

    def test_optimize_greedy(self, workspace, tmp_path, capsys):
        _, scen, model = workspace
        code, out, _ = run(["optimize", "--out", str(tmp_path), "--scenario", scen, "--model",
                            model, "--method", "greedy", "--m", "3", "--scorer", "noisyor"],
                           capsys)
        assert code == 0
        trace = open(os.path.join(out, "trace.csv")).read().splitlines()
        assert trace[0] == "step,chosen_id,k_before,k_after,gain" and len(trace) == 4
        result = json.load(open(os.path.join(out, "result.json")))
        assert len(set(result["placement"])) == 3 and result["method"] == "greedy"
        assert os.path.exists(os.path.join(out, "ability.pgm"))

    def test_simulate(self, workspace, tmp_path, capsys):
        _, scen, _ = workspace
        code, out, _ = run(["simulate", "--out", str(tmp_path), "--scenario", scen, "--frames",
                            "0,1", "--mounts", "2"], capsys)
        assert code == 0
        assert sorted(f for f in os.listdir(out) if f.endswith(".rlpc")) == [
            "frame0000_mount002.rlpc", "frame0001_mount002.rlpc"]

    def test_eval_and_report(self, workspace, tmp_path, capsys):
        _, scen, _ = workspace
        code, out, _ = run(["eval", "--out", str(tmp_path), "--scenario", scen, "--placement",
                            "1,4", "--frames", "0,2,4"], capsys)
        assert code == 0
        ev = json.load(open(os.path.join(out, "eval.json")))
        assert ev["ap_07"] <= ev["ap_05"] <= ev["ap_03"] and ev["placement"] == [1, 4]
        code, rep, _ = run(["report", "--out", str(tmp_path), os.path.join(out, "eval.json")],
                           capsys)
        assert code == 0 and os.path.exists(os.path.join(rep, "report.md"))

    def test_audit(self, workspace, tmp_path, capsys):
        _, scen, model = workspace
        code, out, _ = run(["audit", "--out", str(tmp_path), "--scenario", scen, "--model", model,
                            "--scorer", "noisyor", "--n-samples", "30", "--frames", "0"], capsys)
        audit = json.load(open(os.path.join(out, "audit.json")))
        assert code == 0 and audit["violations"] == 0 and audit["checks"] == 30


class TestErrors:
    def test_budget(self, tmp_path, capsys):
        main(["gen-scene", "--out", str(tmp_path), "--seed", "1", "--n-mounts", "50",
              "--n-frames", "1", "--n-vehicles", "2"])
        scen = os.path.join(only_dir(tmp_path, "gen-scene"), "scenario.json")
        capsys.readouterr()
        code, _, err = run(["optimize", "--out", str(tmp_path), "--scenario", scen, "--method",
                            "brute", "--m", "6"], capsys)
        assert code != 0
        assert json.loads(err)["error"] == "BudgetError" and len(err.splitlines()) == 1
        assert not [d for d in os.listdir(tmp_path) if d.startswith("optimize")]

    def test_bad_m(self, workspace, tmp_path, capsys):
        _, scen, model = workspace
        code, _, err = run(["optimize", "--out", str(tmp_path), "--scenario", scen, "--model",
                            model, "--m", "9"], capsys)
        assert code == 2 and json.loads(err)["error"] == "ParameterError"

    def test_missing_scenario(self, tmp_path, capsys):
        code, _, err = run(["simulate", "--out", str(tmp_path), "--scenario",
                            str(tmp_path / "nope.json")], capsys)
        assert code == 2 and json.loads(err)["error"] == "RLPlaceIOError"


class TestDeterminism:
    def test_optimize_twice(self, workspace, tmp_path, capsys):
        _, scen, model = workspace
        argv = ["optimize", "--scenario", scen, "--model", model, "--m", "2", "--scorer",
                "fused", "--frames", "0,3"]
        _, a, _ = run(argv + ["--out", str(tmp_path / "a")], capsys)
        _, b, _ = run(argv + ["--out", str(tmp_path / "b")], capsys)
        assert os.path.basename(a) == os.path.basename(b)
        assert tree_bytes(a) == tree_bytes(b)

    def test_threads_do_not_change_output(self, workspace, tmp_path, capsys, monkeypatch):
        _, scen, model = workspace
        argv = ["optimize", "--scenario", scen, "--model", model, "--m", "3", "--scorer",
                "noisyor"]
        monkeypatch.setenv("RLP_THREADS", "1")
        _, a, _ = run(argv + ["--out", str(tmp_path / "a")], capsys)
        monkeypatch.setenv("RLP_THREADS", "3")
        _, b, _ = run(argv + ["--out", str(tmp_path / "b")], capsys)
        assert tree_bytes(a) == tree_bytes(b)

    def test_config_hash_changes(self, workspace, tmp_path, capsys):
        _, scen, model = workspace
        base = ["optimize", "--out", str(tmp_path), "--scenario", scen, "--model", model,
                "--method", "random"]
        _, a, _ = run(base + ["--m", "2"], capsys)
        _, b, _ = run(base + ["--m", "3"], capsys)
        assert a != b
