import json

import pytest

from merlab import cli
from merlab.config import parse_config, parse_preset, tuned_values
from merlab.errors import ConfigError


def test_preset_resolves_tuned_values():
    spec = parse_config(preset="rot-5120-mer_a1")
    c = spec.learner
    assert (c.alpha, c.beta, c.gamma, c.s, c.k, c.buffer_capacity) == (0.03, 0.03, 1.0, 10, 101, 5120)
    assert spec.stream.kind == "rotations" and spec.stream.task_count == 20
    assert parse_preset("many-500-gem") == ("many_permutations", 500, "gem")


@pytest.mark.parametrize("bench,alg,buf,want", [
    ("rotations", "online", 0, {"alpha": 0.0003}),
    ("permutations", "er_reservoir", 200, {"alpha": 0.1, "k": 11}),
    ("many_permutations", "gem", 500, {"alpha": 0.003, "gem_memory_strength": 0.1}),
    ("rotations", "mer_obb", 200, {"alpha": 0.1, "gamma": 0.03, "k": 26, "s": 1}),
    ("permutations", "ewc", 0, {"alpha": 0.01, "ewc_lambda": 10.0}),
])
def test_tuned_values_table(bench, alg, buf, want):
    got = tuned_values(bench, alg, buf)
    for key, value in want.items():
        assert got[key] == value


def test_unlisted_buffer_borrows_nearest_tuned_size():
    assert tuned_values("rotations", "mer_a1", 1000) == tuned_values("rotations", "mer_a1", 500)


def test_layering_file_then_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"preset": "perm-200-mer_a1", "alpha": 0.5, "seeds": [3, 4]}))
    spec = parse_config(f, {"beta": 0.2})
    assert spec.learner.alpha == 0.5 and spec.learner.beta == 0.2
    assert spec.seeds == [3, 4]
    assert spec.learner.k == 11
    assert parse_config(f, {"alpha": 0.25}).learner.alpha == 0.25
    assert parse_config(f, {"memories": 4}).learner.k == 5


def test_unknown_key_is_named(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"aplha": 0.1}))
    with pytest.raises(ConfigError) as e:
        parse_config(f)
    assert e.value.key == "aplha"


@pytest.mark.parametrize("layer,key", [
    ({"alpha": "fast"}, "alpha"),
    ({"s": 2.5}, "s"),
    ({"seeds": [0, "1"]}, "seeds"),
    ({"clone_on_boundary": 1}, "clone_on_boundary"),
    ({"benchmark": "cifar"}, "benchmark"),
    ({"algorithm": "adam"}, "algorithm"),
])
def test_bad_values_raise_config_error(layer, key):
    with pytest.raises(ConfigError) as e:
        parse_config(overrides=layer)
    assert e.value.key == key


def test_invalid_json(tmp_path):
    f = tmp_path / "c.json"
    f.write_text("{alpha: 1")
    with pytest.raises(ConfigError):
        parse_config(f)


def test_data_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("MERLAB_DATA_DIR", str(tmp_path))
    assert parse_config().data_dir == tmp_path
    assert parse_config(overrides={"data_dir": "/x"}).data_dir.as_posix() == "/x"


def test_parse_seeds():
    assert cli.parse_seeds("0-4") == [0, 1, 2, 3, 4]
    assert cli.parse_seeds("2,7") == [2, 7]
    with pytest.raises(ConfigError):
        cli.parse_seeds("a-b")


SYN = ["--benchmark", "synthetic", "--algorithm", "er_reservoir", "--buffer", "40",
       "--k", "4", "--alpha", "0.05", "--train-per-task", "60", "--seeds", "0-2"]


def test_run_writes_csv_and_summary(tmp_path, capsys):
    assert cli.main(["run", *SYN, "--out", str(tmp_path)]) == 0
    rows = cli.read_results(tmp_path / "synthetic-40-er_reservoir.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "2"]
    assert list(rows[0]) == cli.COLUMNS
    summary = json.loads((tmp_path / "synthetic-40-er_reservoir.summary.json").read_text())
    ra = [float(r["RA"]) for r in rows]
    assert summary["metrics"]["RA"]["mean"] == pytest.approx(sum(ra) / 3, abs=1e-6)
    assert summary["failures"] == []
    assert "RA:" in capsys.readouterr().out


def test_results_identical_across_reruns_and_workers(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", *SYN, "--out", str(a)])
    cli.main(["run", *SYN, "--out", str(b), "--workers", "2"])

    def strip(path):
        # wall time is the only column allowed to differ
        return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in cli.read_results(path)]

    name = "synthetic-40-er_reservoir.csv"
    assert strip(a / name) == strip(b / name)
    sa = json.loads((a / name.replace(".csv", ".summary.json")).read_text())
    sb = json.loads((b / name.replace(".csv", ".summary.json")).read_text())
    sa.pop("timing"), sb.pop("timing")
    assert sa == sb


def test_failing_seed_is_recorded_and_others_continue(tmp_path, monkeypatch):
    real = cli.run_seed

    def flaky(spec, seed):
        if seed == 1:
            raise RuntimeError("boom")
        return real(spec, seed)

    monkeypatch.setattr(cli, "run_seed", flaky)
    spec = parse_config(overrides={"benchmark": "synthetic", "algorithm": "online",
                                   "seeds": [0, 1, 2], "out": str(tmp_path), "train_per_task": 30})
    res = cli.run_experiment(spec)
    assert [f["seed"] for f in res["summary"]["failures"]] == [1]
    assert "boom" in res["summary"]["failures"][0]["error"]
    assert [r["seed"] for r in cli.read_results(res["csv"])] == ["0", "2"]


def test_missing_data_fails_at_startup(tmp_path, capsys):
    code = cli.main(["run", "--benchmark", "rotations", "--data-dir", str(tmp_path / "none"),
                     "--seeds", "0", "--out", str(tmp_path)])
    assert code == 2
    assert "error" in capsys.readouterr().err
    assert not list(tmp_path.glob("*.csv"))


def test_missing_data_dir_unset(monkeypatch, tmp_path):
    monkeypatch.delenv("MERLAB_DATA_DIR", raising=False)
    assert cli.main(["run", "--benchmark", "permutations", "--out", str(tmp_path)]) == 2


def test_probe_and_grid_and_report(tmp_path, capsys):
    assert cli.main(["probe", "--benchmark", "synthetic", "--algorithm", "mer_a1", "--buffer", "30",
                     "--k", "3", "--train-per-task", "40", "--seeds", "0", "--out",
                     str(tmp_path / "p")]) == 0
    summary = json.loads(next((tmp_path / "p").glob("*.summary.json")).read_text())
    assert summary["alignment"]["n"] == 1
    assert cli.main(["grid", "--benchmark", "synthetic", "--algorithms", "online,er_reservoir",
                     "--buffers", "20", "--train-per-task", "30", "--seeds", "0",
                     "--out", str(tmp_path / "g")]) == 0
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "g")]) == 0
    out = capsys.readouterr().out
    assert "online" in out and "er_reservoir" in out


def test_rl_verb(tmp_path):
    assert cli.main(["rl", "--variants", "er", "--seeds", "0", "--frames-per-task", "300",
                     "--task-count", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "catcher-er-seed0.csv").exists()
    assert "er-0" in json.loads((tmp_path / "catcher-summary.json").read_text())


def test_mean_std_arithmetic():
    st = cli.mean_std([0.8, 0.9])
    assert st["mean"] == pytest.approx(0.85)
    assert st["std"] == pytest.approx(0.0707107, abs=1e-6)
    assert cli.mean_std([0.5])["std"] is None


def test_five_seed_online_synthetic_rows(tmp_path):
    spec = parse_config(overrides={"benchmark": "synthetic", "algorithm": "online",
                                   "out": str(tmp_path), "train_per_task": 20})
    res = cli.run_experiment(spec)
    assert len(cli.read_results(res["csv"])) == 5
    assert res["summary"]["metrics"]["RA"]["n"] == 5
