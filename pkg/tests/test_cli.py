from __future__ import annotations

import time

import pytest
import yaml

from fleetlab import cli
from fleetlab.experiments import PRESETS, ConfigError, PROFILER_COLUMNS
from fleetlab.orchestrator import TRAINING_COLUMNS
from fleetlab.report import read_csv

SMALL = {
    "profiler": ["profiler.requests_per_device=3"],
    "stream": ["dataset.num_chunks=48"],
}


def _small(name):
    kind = PRESETS[name][1].get("kind", "online")
    return SMALL.get(kind, ["max_updates=20", "eval_every=10"])


def _run(tmp_path, *argv):
    return cli.main(["run", "--out", str(tmp_path), *argv])


def test_run_writes_contract_files(tmp_path, capsys):
    code = _run(tmp_path, "--preset", "staleness-d2", "--seed", "1", "--override", "max_updates=15")
    assert code == 0
    run_dir = tmp_path / "staleness-d2_1"
    assert capsys.readouterr().out.strip() == str(run_dir)
    header = (run_dir / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",") == list(TRAINING_COLUMNS)
    assert (run_dir / "profiler.csv").read_text().strip() == ",".join(PROFILER_COLUMNS)
    rows = read_csv(run_dir / "metrics.csv")
    assert {r["run_id"] for r in rows} == {f"staleness-d2-{a}-1" for a in ("ssgd", "adasgd", "dynsgd", "fedavg")}
    assert (run_dir / "accuracy.png").stat().st_size > 0
    manifest = yaml.safe_load((run_dir / "manifest.yaml").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["max_updates"] == 15


def test_rerun_is_byte_identical(tmp_path):
    args = ["--preset", "longtail", "--seed", "2", "--no-plots", "--override", "max_updates=40"]
    assert _run(tmp_path / "a", *args) == 0
    assert _run(tmp_path / "b", *args) == 0
    for name in ("metrics.csv", "profiler.csv"):
        assert (tmp_path / "a" / "longtail_2" / name).read_bytes() == \
            (tmp_path / "b" / "longtail_2" / name).read_bytes()
    manifests = [yaml.safe_load((tmp_path / d / "longtail_2" / "manifest.yaml").read_text())
                 for d in ("a", "b")]
    for m in manifests:
        m["config"].pop("output_dir")
    assert manifests[0] == manifests[1]


def test_manifest_reproduces_run(tmp_path):
    assert _run(tmp_path / "a", "--preset", "threshold-pruning", "--seed", "3", "--no-plots",
                "--override", "max_updates=30") == 0
    manifest = tmp_path / "a" / "threshold-pruning_3" / "manifest.yaml"
    assert _run(tmp_path / "b", "--config", str(manifest), "--no-plots") == 0
    for name in ("metrics.csv", "profiler.csv"):
        assert (tmp_path / "a" / "threshold-pruning_3" / name).read_bytes() == \
            (tmp_path / "b" / "threshold-pruning_3" / name).read_bytes()


def test_unknown_key_is_named(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("preset: custom\npolcy: adasgd\n")
    assert _run(tmp_path, "--config", str(path)) == 2
    assert "polcy" in capsys.readouterr().err
    assert cli.main(["validate", "--preset", "cadence", "--override", "dataset.sped=1"]) == 2
    assert "dataset.sped" in capsys.readouterr().err


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="policy"):
        cli.resolve_config(preset="staleness-d1", overrides=["policy=fastsgd", "arms=[]"])
    with pytest.raises(ConfigError, match="override"):
        cli.resolve_config(preset="staleness-d1", overrides=["max_updates"])


def test_presets_listing(capsys):
    assert cli.main(["presets"]) == 0
    out = capsys.readouterr().out
    for name in ("staleness-d2", "cadence", "profiler-slo", "longtail"):
        assert name in out


def test_validate(capsys):
    assert cli.main(["validate", "--preset", "profiler-slo"]) == 0
    assert "ok: preset=profiler-slo kind=profiler" in capsys.readouterr().out


def test_env_var_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FLEETLAB_OUT", str(tmp_path / "env"))
    assert cli.main(["run", "--preset", "cadence", "--no-plots", "--override", "dataset.num_chunks=24"]) == 0
    assert (tmp_path / "env" / "cadence_1" / "metrics.csv").exists()


def test_report_rerenders(tmp_path, capsys):
    assert _run(tmp_path, "--preset", "profiler-slo", "--no-plots",
                "--override", "profiler.requests_per_device=2") == 0
    run_dir = tmp_path / "profiler-slo_1"
    assert not (run_dir / "profiler_deviation.png").exists()
    capsys.readouterr()
    assert cli.main(["report", str(run_dir)]) == 0
    assert (run_dir / "profiler_deviation.png").exists()


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["run", "--preset", "cadence", "--out", str(blocker), "--no-plots",
                     "--override", "dataset.num_chunks=24"]) == 1
    assert "cannot write" in capsys.readouterr().err


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_smoke_runs(tmp_path, name):
    start = time.perf_counter()
    overrides = [arg for o in _small(name) for arg in ("--override", o)]
    assert _run(tmp_path, "--preset", name, *overrides) == 0
    assert time.perf_counter() - start <= 60
    rows = read_csv(tmp_path / f"{name}_1" / "metrics.csv") + read_csv(tmp_path / f"{name}_1" / "profiler.csv")
    assert rows
