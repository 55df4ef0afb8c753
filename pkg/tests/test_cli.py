import json

import numpy as np
import pytest

from partgen import cli, config
from partgen.dataset import load_dataset, read_records


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny dataset plus micro generator and blender shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert run("make-dataset", "--out", d / "ds", "--train", 6, "--val", 2, "--test", 2,
               "--categories", "table,lamp", "--n-clusters", 3, "--seed", 1) == 0
    assert run("train-generator", "--dataset", d / "ds", "--out", d / "gen", "--preset", "micro", "--steps", 20,
               "--batch-size", 4, "--condition") == 0
    assert run("train-blender", "--dataset", d / "ds", "--out", d / "bl", "--preset", "micro", "--steps", 3,
               "--batch-size", 1, "--n-points", 64) == 0
    return d


def test_config_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[global]\nseed = 7\n[generator]\npreset = micro\nlr = 0.5\nlayers = 3\n[dataset]\ntrain = 9\n")
    cfg = config.RunConfig.load(ini)
    assert cfg.seed == 7 and cfg.get("dataset")["train"] == 9 and cfg.get("dataset")["val"] == 200
    g = cfg.generator_config()
    assert g.layers == 3 and g.embed_dim == 8  # file beats preset, preset beats defaults
    cfg.update("generator", {"lr": 0.25, "steps": None})
    t = cfg.generator_train_config()
    assert t.lr == 0.25 and t.seed == 7 and t.steps == 5000
    assert "[generator]" in cfg.to_text()


def test_config_errors(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[generator]\nbogus = 1\n")
    with pytest.raises(config.ConfigError):
        config.RunConfig.load(ini)
    ini.write_text("[blender]\nsteps = many\n")
    with pytest.raises(config.ConfigError):
        config.RunConfig.load(ini)
    with pytest.raises(config.ConfigError):
        config.RunConfig.load(tmp_path / "missing.ini")


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(config.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert run("make-dataset", "--train", 1, "--val", 0, "--test", 0, "--categories", "table", "--n-clusters", 1) == 0
    assert (tmp_path / "root" / "dataset" / "manifest.json").exists()


def test_make_dataset_defaults_echo():
    cfg = config.RunConfig()
    assert cfg.categories() == ["chair", "table", "lamp"]
    assert [cfg.get("dataset")[s] for s in ("train", "val", "test")] == [2000, 200, 200]


def test_make_dataset_is_deterministic_and_refuses(tmp_path, capsys):
    args = ["--train", 3, "--val", 1, "--test", 1, "--categories", "chair", "--n-clusters", 2, "--seed", 4]
    assert run("make-dataset", "--out", tmp_path / "a", *args) == 0
    assert run("make-dataset", "--out", tmp_path / "b", *args) == 0
    for f in ("records.jsonl", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "train: 3 (chair=3)" in capsys.readouterr().out
    assert run("make-dataset", "--out", tmp_path / "a", *args) == 1
    assert run("make-dataset", "--out", tmp_path / "a", "--force", *args) == 0


def test_invalid_category_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("make-dataset", "--out", tmp_path / "x", "--categories", "sofa")
    assert e.value.code == 2


def test_training_outputs(pipeline):
    log = [json.loads(l) for l in (pipeline / "gen" / "train_log.jsonl").read_text().splitlines()]
    assert [e["step"] for e in log] == list(range(21))
    assert all(e["kind"] in ("tf", "ss") for e in log[1:]) and "val_nll" in log[0]
    for name in ("generator.pt", "generator-last.pt"):
        assert (pipeline / "gen" / name).exists()
    assert (pipeline / "bl" / "blender.pt").exists()


def test_resume_continues_step_counter(pipeline, tmp_path):
    import shutil
    shutil.copytree(pipeline / "gen", tmp_path / "gen")
    assert run("train-generator", "--dataset", pipeline / "ds", "--out", tmp_path / "gen", "--steps", 25,
               "--resume", tmp_path / "gen" / "generator-last.pt") == 0
    steps = [json.loads(l)["step"] for l in (tmp_path / "gen" / "train_log.jsonl").read_text().splitlines()]
    assert steps == list(range(26))


def test_resume_refuses_other_dataset(pipeline, tmp_path):
    assert run("make-dataset", "--out", tmp_path / "other", "--train", 6, "--val", 2, "--test", 2,
               "--categories", "table,lamp", "--n-clusters", 3, "--seed", 2) == 0
    assert run("train-generator", "--dataset", tmp_path / "other", "--out", tmp_path / "g", "--steps", 30,
               "--resume", pipeline / "gen" / "generator-last.pt") == 1


def test_generate_is_deterministic(pipeline, tmp_path):
    base = ["generate", "--checkpoint", pipeline / "gen" / "generator.pt", "--count", 5, "--seed", 3,
            "--bbox", "1.0,0.8,0.6", "--category", "table", "--max-parts", 8]
    assert run(*base, "--out", tmp_path / "a") == 0
    assert run(*base, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "records.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "records.jsonl").read_bytes()
    assert len(read_records(tmp_path / "a" / "records.jsonl")) == 5
    assert run(*base, "--out", tmp_path / "c", "--condition-text", "A table with four leg, and one top") == 0
    assert (tmp_path / "c" / "records.jsonl").read_bytes() != a


def test_generate_needs_a_box(pipeline, tmp_path):
    with pytest.raises(SystemExit) as e:
        run("generate", "--checkpoint", pipeline / "gen" / "generator.pt", "--out", tmp_path / "x")
    assert e.value.code == 2


def test_generate_from_split_with_meshes(pipeline, tmp_path):
    assert run("generate", "--checkpoint", pipeline / "gen" / "generator.pt", "--bbox-from", "test",
               "--dataset", pipeline / "ds", "--count", 2, "--max-parts", 4, "--out", tmp_path / "g",
               "--mesh", "--blender", pipeline / "bl" / "blender.pt", "--resolution", 12) == 0
    recs = read_records(tmp_path / "g" / "records.jsonl")
    test = load_dataset(pipeline / "ds").split("test")
    assert [r.bbox for r in recs] == [t.bbox for t in test[:2]]
    assert all(r.truncated == (len(r.parts) == 4) for r in recs)
    assert len(list((tmp_path / "g").glob("*.obj"))) == 2


def test_complete_retains_prefix(pipeline, tmp_path):
    src = load_dataset(pipeline / "ds").split("test")[0]
    assert run("complete", "--checkpoint", pipeline / "gen" / "generator.pt", "--partial",
               pipeline / "ds" / "records.jsonl", "--record-id", src.id, "--drop", 0, "--count", 3,
               "--max-parts", 12, "--out", tmp_path / "c") == 0
    for r in read_records(tmp_path / "c" / "records.jsonl"):
        assert r.parts[:len(src.parts) - 1] == src.parts[1:]


def test_extract_mesh(pipeline, tmp_path):
    assert run("extract-mesh", "--blender", pipeline / "bl" / "blender.pt", "--records",
               pipeline / "ds" / "records.jsonl", "--record-id", "lamp-test-00000", "--resolution", 10,
               "--grid", "--out", tmp_path / "m") == 0
    assert (tmp_path / "m" / "lamp-test-00000.obj").exists() and (tmp_path / "m" / "lamp-test-00000.grid").exists()


def test_evaluate_self_and_errors(pipeline, tmp_path, capsys):
    ds = load_dataset(pipeline / "ds")
    (tmp_path / "gen").mkdir()
    from partgen.dataset import write_records
    write_records(tmp_path / "gen" / "records.jsonl", ds.split("test"))
    assert run("evaluate", "--generated", tmp_path / "gen", "--dataset", pipeline / "ds", "--split", "test",
               "--n-points", 256, "--seed", 9) == 0
    report = dict(l.split("=") for l in (tmp_path / "gen" / "report.txt").read_text().splitlines())
    assert float(report["cov_cd"]) == 1.0 and float(report["mmd_cd_x1000"]) <= 0.1
    assert report["seed"] == "9" and report["n_points"] == "256"
    with pytest.raises(SystemExit):
        run("evaluate", "--generated", tmp_path / "gen", "--dataset", pipeline / "ds", "--split", "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(SystemExit):
        run("evaluate", "--generated", tmp_path / "empty", "--dataset", pipeline / "ds")
