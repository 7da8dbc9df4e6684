import json

import numpy as np
from click.testing import CliRunner

from cpdg.cli import main
from cpdg.domains import load_scenes
from cpdg.image_core import load_ppm, save_ppm
from cpdg.spectral import AmplitudeBank

TINY = {
    "data": {"n_train": 4, "n_test": 2, "dims": [8, 8], "n_cavs": 2, "bank_size": 2},
    "meta": {"epochs": 1, "batch_size": 2},
    "erm_epochs": 1,
}


def run(*args):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res.output


def test_gen_and_align(tmp_path):
    run("gen", tmp_path / "s", "--count", 2, "--size", 8)
    scenes = load_scenes(tmp_path / "s")
    assert len(scenes) == 2 and scenes[0].n_cavs == 3
    run("align", tmp_path / "s", tmp_path / "a", "--ego-index", 1)
    aligned = load_scenes(tmp_path / "a")
    assert np.array_equal(aligned[0].cav_images[1], scenes[0].cav_images[1])
    res = CliRunner().invoke(main, ["align", str(tmp_path / "s"), str(tmp_path / "b"), "--ego-index", "5"])
    assert res.exit_code != 0


def test_gen_domain(tmp_path):
    run("gen", tmp_path / "f", "--count", 1, "--size", 8, "--domain", "fog")
    assert load_scenes(tmp_path / "f")[0].domain_tag == "fog"


def test_ampaug_with_bank_file_and_dir(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "in").mkdir()
    (tmp_path / "style").mkdir()
    for k in range(2):
        save_ppm(rng.random((8, 8, 3)), tmp_path / "in" / f"{k}.ppm")
        save_ppm(rng.random((8, 8, 3)), tmp_path / "style" / f"{k}.ppm")
    AmplitudeBank.from_images([rng.random((8, 8, 3))]).save(tmp_path / "bank.bin")
    run("ampaug", tmp_path / "in", tmp_path / "out", "--bank", tmp_path / "bank.bin", "--ratio", 0.1)
    run("ampaug", tmp_path / "in", tmp_path / "out2", "--bank", tmp_path / "style")
    assert load_ppm(tmp_path / "out" / "0.ppm").shape == (8, 8, 3)
    assert len(list((tmp_path / "out2").glob("*.ppm"))) == 2


def test_train_then_eval(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    out = run("train", "--config", tmp_path / "c.json", "--output-dir", tmp_path / "runs", "--beta", 0.2)
    recs = [json.loads(line) for line in out.splitlines()]
    assert [r["domain_tag"] for r in recs] == ["sunny", "fog", "rain", "night"]
    run_dir = tmp_path / "runs" / recs[0]["run_id"]
    assert json.loads((run_dir / "config.json").read_text())["meta"]["beta"] == 0.2
    run("gen", tmp_path / "s", "--count", 2, "--size", 8, "--cavs", 2)
    out = run("eval", "--ckpt", run_dir / "checkpoint.bin", "--scenes", tmp_path / "s",
              "--domains", "fog,night", "--align")
    lines = [json.loads(line) for line in out.splitlines()]
    assert [r["domain_tag"] for r in lines] == ["fog", "night"] and all(r["align"] for r in lines)


def test_ablate_subset(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    out = run("ablate", "--config", tmp_path / "c.json", "--grid",
              "ampaug--meta_consistency--alignment-,ampaug+-meta_consistency+-alignment+")
    assert len(out.splitlines()) == 8
    res = CliRunner().invoke(main, ["ablate", "--config", str(tmp_path / "c.json"), "--grid", "nope"])
    assert res.exit_code != 0


def test_help_lists_config_defaults():
    out = run("train", "--help")
    for token in ("0.01", "0.1", "1e-3", "2e-4"):
        assert token in out
