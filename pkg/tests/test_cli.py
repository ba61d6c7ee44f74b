import csv
import json

import pytest

import boxhead
from boxhead import ABLATION_VARIANTS, EXIT_CONTRACT, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from diagnostics import GradcheckRow, run_bench
from tracking_data import dataset_checksum

TINY_RUN = """\
# four 4x4 feature maps per sequence, a handful of steps
scene.image_size = 32
scene.frames = 4
scene.n_train = 2
scene.n_eval = 2
head.map_h = 4
head.map_w = 4
head.embed_dim = 8
encoder.embed_dim = 8
train.steps = 5
train.batch = 4
train.log_every = 0
gradcheck.seeds = 1
bench.repeats = 1
acceptance.strict = false
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_RUN)
    data = root / "data"
    assert main(["gen", "--config", str(cfg), "--data", str(data), "--out", str(root / "gen")]) == EXIT_OK
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == EXIT_OK
    return {"cfg": str(cfg), "data": str(data), "out": out, "root": root}


def _run(ws, *argv, out=None):
    return main(list(argv) + ["--config", ws["cfg"], "--data", ws["data"], "--out", str(out or ws["out"])])


def test_gen_writes_dataset_and_run_records(workspace):
    gen = workspace["root"] / "gen"
    assert (gen / "run_config.txt").exists()
    assert (gen / "boxhead_run.log").exists()
    assert json.loads((gen / "run_meta.json").read_text())["command"] == "gen"
    manifest = json.loads((workspace["root"] / "data" / "dataset.json").read_text())
    assert manifest["splits"] == {"train": 2, "eval": 2}


def test_gen_is_reproducible(workspace, tmp_path, capsys):
    assert main(["gen", "--config", workspace["cfg"], "--data", str(tmp_path / "again"), "--out", str(tmp_path)]) == EXIT_OK
    first = capsys.readouterr().out
    assert "sequences: 4 (train 2, eval 2)" in first
    assert dataset_checksum(tmp_path / "again") == dataset_checksum(workspace["data"])


def test_train_outputs(workspace):
    out = workspace["out"]
    for name in ("head.ckpt", "loss_trace.csv", "metrics_train.json", "metrics_train.csv", "config_effective.json"):
        assert (out / name).exists(), name
    with open(out / "loss_trace.csv", newline="") as f:
        assert len(list(csv.DictReader(f))) == 5
    assert "train_fps" in json.loads((out / "run_meta.json").read_text())


def test_eval_on_train_split_reproduces_training_metrics(workspace):
    out = workspace["out"]
    trained = json.loads((out / "metrics_train.json").read_text())
    assert _run(workspace, "eval", "--split", "train") == EXIT_OK
    assert json.loads((out / "metrics_train.json").read_text()) == trained


def test_eval_writes_eval_metrics(workspace, tmp_path):
    ckpt = workspace["out"] / "head.ckpt"
    assert _run(workspace, "eval", "--checkpoint", str(ckpt), out=tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "metrics_eval.json").read_text())
    assert 0.0 <= report["ao"] <= 1.0
    assert len(report["thresholds"]) == 21


def test_oracle_eval_is_perfect(workspace, tmp_path):
    assert _run(workspace, "eval", "--oracle", out=tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "metrics_eval_oracle.json").read_text())
    assert report["ao"] == 1.0 and report["sr75"] == 1.0 and report["auc"] == 1.0


def test_eval_with_mismatched_variant(workspace, tmp_path):
    ckpt = str(workspace["out"] / "head.ckpt")
    assert _run(workspace, "eval", "--checkpoint", ckpt, "--variant", "plain", out=tmp_path) == EXIT_CONTRACT


def test_missing_dataset_is_an_io_error(tmp_path, capsys):
    code = main(["train", "--set", "scene.image_size=32", "--set", "head.map_h=4", "--set", "head.map_w=4",
                 "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)])
    assert code == EXIT_IO
    assert "[ERROR] I/O" in capsys.readouterr().err


def test_unknown_key_is_a_contract_violation(tmp_path, capsys):
    assert main(["gen", "--set", "head.widht=3", "--out", str(tmp_path)]) == EXIT_CONTRACT
    assert "unknown config key 'head.widht'" in capsys.readouterr().err


@pytest.mark.parametrize("parallel", [False, True])
def test_compare_heads(workspace, tmp_path, parallel):
    argv = ["compare-heads"] + (["--parallel"] if parallel else [])
    assert _run(workspace, *argv, out=tmp_path) == EXIT_OK
    with open(tmp_path / "ablation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["variant"] for r in rows] == list(ABLATION_VARIANTS)
    for r in rows:
        assert 0.0 <= float(r["AO"]) <= 1.0
        assert (tmp_path / r["variant"] / "head.ckpt").exists()
    assert (tmp_path / "ablation.txt").read_text().splitlines()[0].split() == ["variant", "AO", "SR_0.5", "SR_0.75", "AUC"]


def test_compare_heads_is_order_independent(workspace, tmp_path):
    assert _run(workspace, "compare-heads", out=tmp_path / "seq") == EXIT_OK
    assert _run(workspace, "compare-heads", "--parallel", out=tmp_path / "par") == EXIT_OK
    assert (tmp_path / "seq" / "ablation.csv").read_bytes() == (tmp_path / "par" / "ablation.csv").read_bytes()


def test_gradcheck_failure_exit_code(workspace, tmp_path, monkeypatch):
    bad = GradcheckRow("conv2d", 1, 0.5, "weight", 0, 1e-4, False)
    monkeypatch.setattr(boxhead, "run_gradcheck", lambda cfg: [bad])
    assert _run(workspace, "gradcheck", out=tmp_path) == EXIT_NUMERIC
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"] is False


def test_bench_command(workspace, tmp_path, monkeypatch):
    tiny = (("conv2d", (1, 2, 4, 4), 2),)
    monkeypatch.setattr(boxhead, "run_bench", lambda cfg, seed: run_bench(cfg, seed, cases=tiny))
    assert _run(workspace, "bench", out=tmp_path) == EXIT_OK
    assert (tmp_path / "bench.csv").exists()


ORDERED = {"plain": 0.61, "inception": 0.7234, "deform_only": 0.62, "deform_inception": 0.66}
REVERSED = {"plain": 0.6806, "inception": 0.6711, "deform_only": 0.6742, "deform_inception": 0.6662}


def _fake_training(monkeypatch, pick):
    def fake(cfg, variant, train_set, eval_records, eval_feats, out_dir):
        ao = pick(cfg)[variant]
        return {"variant": variant, "AO": ao, "SR_0.5": ao, "SR_0.75": 0.0, "AUC": ao}
    monkeypatch.setattr(boxhead, "_train_variant", fake)


def _checks(path):
    with open(path / "ablation_checks.csv", newline="") as f:
        return {r["check"]: r["result"] for r in csv.DictReader(f)}


def test_ablation_outputs_carry_the_checks(workspace, tmp_path, monkeypatch):
    _fake_training(monkeypatch, lambda cfg: ORDERED)
    assert _run(workspace, "compare-heads", "--set", "acceptance.strict=true", out=tmp_path) == EXIT_OK
    assert _checks(tmp_path) == {
        "AO(inception) >= AO(plain)": "PASS",
        "AO(deform_inception) >= AO(deform_only)": "PASS",
        "AO(inception) >= min_eval_ao": "PASS",
    }
    text = (tmp_path / "ablation.txt").read_text()
    assert "PASS  AO(deform_inception) >= AO(deform_only)" in text
    assert json.loads((tmp_path / "run_meta.json").read_text())["checks_passed"] is True


def test_reversed_ordering_fails_when_strict(workspace, tmp_path, monkeypatch, capsys):
    _fake_training(monkeypatch, lambda cfg: REVERSED)
    assert _run(workspace, "compare-heads", "--set", "acceptance.strict=true", out=tmp_path) == EXIT_NUMERIC
    assert "acceptance checks failed: AO(inception) >= AO(plain)" in capsys.readouterr().err
    text = (tmp_path / "ablation.txt").read_text()
    assert "FAIL  AO(inception) >= AO(plain)" in text
    assert _checks(tmp_path)["AO(inception) >= min_eval_ao"] == "PASS"


def test_reversed_ordering_is_reported_but_tolerated_when_lenient(workspace, tmp_path, monkeypatch):
    _fake_training(monkeypatch, lambda cfg: REVERSED)
    assert _run(workspace, "compare-heads", out=tmp_path) == EXIT_OK
    assert _checks(tmp_path)["AO(deform_inception) >= AO(deform_only)"] == "FAIL"


def test_eval_reports_min_eval_ao(workspace, tmp_path, capsys):
    ckpt = str(workspace["out"] / "head.ckpt")
    assert _run(workspace, "eval", "--checkpoint", ckpt, "--set", "acceptance.min_eval_ao=0", out=tmp_path) == EXIT_OK
    assert "PASS  AO >= min_eval_ao" in capsys.readouterr().out
    assert json.loads((tmp_path / "run_meta.json").read_text())["meets_min_eval_ao"] is True
    strict = ["--set", "acceptance.min_eval_ao=1.0", "--set", "acceptance.strict=true"]
    assert _run(workspace, "eval", "--checkpoint", ckpt, *strict, out=tmp_path / "strict") == EXIT_NUMERIC
    assert "FAIL  AO >= min_eval_ao" in capsys.readouterr().out


def test_pilot_freezes_the_first_passing_dataset_seed(workspace, tmp_path, monkeypatch):
    _fake_training(monkeypatch, lambda cfg: REVERSED if cfg.scene.seed == 0 else ORDERED)
    assert _run(workspace, "pilot", "--tries", "3", out=tmp_path) == EXIT_OK
    with open(tmp_path / "pilot.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(r["scene_seed"], r["result"]) for r in rows] == [("0", "FAIL"), ("1", "PASS")]
    frozen = (tmp_path / "pilot_frozen.cfg").read_text()
    assert "scene.seed = 1" in frozen
    assert "acceptance.min_eval_ao = 0.72" in frozen
    again = tmp_path / "regen"
    argv = ["gen", "--config", str(tmp_path / "pilot_frozen.cfg"), "--data", str(again), "--out", str(tmp_path / "regen_run")]
    assert main(argv) == EXIT_OK
    assert dataset_checksum(again) == dataset_checksum(tmp_path / "data_scene1")


def test_pilot_without_a_passing_seed(workspace, tmp_path, monkeypatch):
    _fake_training(monkeypatch, lambda cfg: REVERSED)
    assert _run(workspace, "pilot", "--tries", "2", out=tmp_path) == EXIT_NUMERIC
    with open(tmp_path / "pilot.csv", newline="") as f:
        assert [r["result"] for r in csv.DictReader(f)] == ["FAIL", "FAIL"]
    assert not (tmp_path / "pilot_frozen.cfg").exists()
