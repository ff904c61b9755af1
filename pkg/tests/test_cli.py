import json

import pytest

from calcheads.cli import main
from calcheads.corpus import TEMPLATES, load_dataset
from calcheads.model import load_checkpoint
from calcheads.patching import EffectMap, path_patch_sweep, select_key
from calcheads.trainer import correct_pairs


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.jsonl"
    assert main(["gen-data", "--ops", "add,sub", "--count", "600", "--seed", "1", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--layers", "2", "--heads", "4", "--d-model", "32",
                 "--d-mlp", "64", "--steps", "120", "--lr", "3e-3", "--out", str(root / "m")]) == 0
    assert main(["patch", "--model", str(root / "m/model.ckpt"), "--data", str(data), "--n-pairs", "20",
                 "--out", str(root / "p")]) == 0
    return root


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--count", "100", "--seed", "7", "--out", str(tmp_path / f"{name}.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_gen_data_needs_out(monkeypatch, capsys):
    monkeypatch.delenv("CALCHEADS_OUT", raising=False)
    assert main(["gen-data", "--count", "10"]) == 1


def test_gen_data_covers_every_template(tmp_path):
    out = tmp_path / "all.jsonl"
    assert main(["gen-data", "--ops", "add,sub,mul,div", "--families", "all", "--count", "1440",
                 "--out", str(out)]) == 0
    assert {p.template_id for p in load_dataset(out).pairs} == {t.id for t in TEMPLATES}


def test_usage_errors():
    assert main(["reproduce", "--suite", "nonsense"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["finetune", "--model", "x", "--data", "y"]) == 1


def test_train_report_and_manifest(workspace, capsys):
    report = json.loads((workspace / "m/report.json").read_text())
    assert report["tuned_params"] == report["total_params"] > 0
    assert "samples_per_sec" in (workspace / "m/timing.log").read_text()
    man = json.loads((workspace / "m/manifest.json").read_text())
    assert man["schema"] == 1 and "data" in man["inputs"]
    assert "model.ckpt" in man["outputs"]


def test_patch_wraps_library(workspace, vocab):
    state = load_checkpoint(workspace / "m/model.ckpt")
    pairs = correct_pairs(state, load_dataset(workspace / "d.jsonl").split("validation"), vocab)[:20]
    em = path_patch_sweep(state, pairs, vocab)
    assert (workspace / "p/effects.csv").read_text() == em.to_csv()
    assert (workspace / "p/effects.json").read_text() == em.to_json()


def test_heatmap_cell_count(workspace):
    svg = (workspace / "p/heatmap.svg").read_text()
    assert svg.count('<rect class="cell"') == 2 * (4 + 1)


def test_select_matches_library(workspace):
    out = workspace / "sel.json"
    assert main(["select", "--effects", str(workspace / "p/effects.json"), "--tau", "0.05", "--out", str(out)]) == 0
    em = EffectMap.from_json((workspace / "p/effects.json").read_text())
    assert out.read_text() == select_key(em, 0.05).to_json()


def test_precise_finetune_then_audit(workspace, tmp_path):
    sel = tmp_path / "sel.json"
    sel.write_text(json.dumps({"tau": 0.05, "heads": ["1.0", "0.2"], "mlps": ["mlp1"]}))
    model = str(workspace / "m/model.ckpt")
    data = str(workspace / "d.jsonl")
    assert main(["finetune", "--model", model, "--data", data, "--mode", "precise", "--mask", str(sel),
                 "--steps", "3", "--batch-size", "8", "--out", str(tmp_path / "f")]) == 0
    report = json.loads((tmp_path / "f/report.json").read_text())
    assert 0 < report["tuned_params"] < report["total_params"]
    audit = tmp_path / "audit.json"
    assert main(["audit", "--before", model, "--after", str(tmp_path / "f/model.ckpt"), "--mask", str(sel),
                 "--out", str(audit)]) == 0
    doc = json.loads(audit.read_text())
    assert doc["clean"] and not any(doc["outside_mask"].values())


def test_precise_finetune_errors(workspace, tmp_path):
    model = str(workspace / "m/model.ckpt")
    data = str(workspace / "d.jsonl")
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"tau": 0.05, "heads": [], "mlps": []}))
    args = ["finetune", "--model", model, "--data", data, "--mode", "precise", "--steps", "1", "--out", str(tmp_path)]
    assert main(args + ["--mask", str(empty)]) == 2
    assert main(args + ["--mask", str(empty), "--allow-empty"]) == 0
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"tau": 0.05, "heads": ["7.0"], "mlps": []}))
    assert main(args + ["--mask", str(wrong)]) == 2


def test_full_finetune_fails_masked_audit(workspace, tmp_path):
    model = str(workspace / "m/model.ckpt")
    assert main(["finetune", "--model", model, "--data", str(workspace / "d.jsonl"), "--mode", "full",
                 "--steps", "1", "--out", str(tmp_path / "f")]) == 0
    sel = tmp_path / "sel.json"
    sel.write_text(json.dumps({"tau": 0.05, "heads": ["0.0"], "mlps": []}))
    assert main(["audit", "--before", model, "--after", str(tmp_path / "f/model.ckpt"), "--mask", str(sel)]) == 2


def test_random_knockout_reproducible(workspace, tmp_path):
    args = ["knockout", "--model", str(workspace / "m/model.ckpt"), "--data", str(workspace / "d.jsonl"),
            "--effects", str(workspace / "p/effects.json"), "--ordering", "random", "--seed", "3", "--k-max", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in ("knockout.csv", "knockout.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a/knockout.svg").read_text().count('class="series"') == 1


def test_probe_commands(workspace, tmp_path):
    model = str(workspace / "m/model.ckpt")
    data = str(workspace / "d.jsonl")
    assert main(["probe", "--model", model, "--kind", "trajectory", "--prompt", "4 + 3 = ",
                 "--out", str(tmp_path / "t")]) == 0
    rows = (tmp_path / "t/trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 10
    assert main(["probe", "--model", model, "--kind", "attention", "--head", "5.0", "--data", data,
                 "--out", str(tmp_path / "a")]) == 2
    assert main(["probe", "--model", model, "--kind", "attention", "--head", "1.1", "--data", data,
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["probe", "--model", model, "--kind", "generation", "--data", data,
                 "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g/generation.svg").read_text().count('class="series"') == 4


def test_reception_on_untrained_checkpoint(workspace, tmp_path):
    data = str(workspace / "d.jsonl")
    assert main(["train", "--data", data, "--layers", "2", "--heads", "2", "--d-model", "16", "--d-mlp", "16",
                 "--steps", "0", "--out", str(tmp_path / "u")]) == 0
    assert main(["probe", "--model", str(tmp_path / "u/model.ckpt"), "--kind", "reception", "--data", data,
                 "--all-samples", "--out", str(tmp_path / "r")]) == 0
    series = json.loads((tmp_path / "r/reception.json").read_text())
    assert max(abs(v) for row in series["mean"] for v in row) < 0.3


def test_env_var_sets_output_root(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("CALCHEADS_OUT", str(tmp_path))
    assert main(["probe", "--model", str(workspace / "m/model.ckpt"), "--kind", "trajectory",
                 "--prompt", "2 + 2 ="]) == 0
    assert (tmp_path / "probe/trajectory.json").exists()


def test_missing_input_is_data_error(tmp_path):
    assert main(["patch", "--model", str(tmp_path / "none.ckpt"), "--data", "x", "--out", str(tmp_path)]) == 2
