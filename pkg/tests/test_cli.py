import csv
import json
from pathlib import Path

import pytest

from ecpmpc.cli import main, read_summary
from ecpmpc.sim import MetricsReport, metrics_from_steps_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMALL = ["--set", "episode.t_max=30", "--set", "synthetic.n_frames=120", "--set", "synthetic.n_agents=6"]


def run(tmp_path, *extra):
    return main(["run", str(CONFIGS / "synthetic.ini"), "-o", str(tmp_path), *SMALL, *extra])


def test_run_writes_the_four_files(tmp_path, capsys):
    assert run(tmp_path, "--controller", "ecp", "--repeat", "1") == 0
    ep = tmp_path / "crowd" / "ecp" / "episode_000"
    assert {p.name for p in ep.iterdir()} == {"steps.csv", "radii.csv", "coverage.csv", "metrics.json"}
    rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert [r["controller"] for r in rows] == ["ecp"]
    assert list(rows[0]) == ["scenario", "controller", "episodes", "Collis.", "Cost", "Trav.", "Infeas."]
    assert "summary written" in capsys.readouterr().out


def test_repeat_uses_consecutive_seeds_and_summary_matches_logs(tmp_path):
    assert run(tmp_path, "--controller", "ecp,acp", "--repeat", "3", "--seed-base", "7") == 0
    for ctrl in ("ecp", "acp"):
        seeds = [MetricsReport.from_json(tmp_path / "crowd" / ctrl / f"episode_{k:03d}" / "metrics.json").seed
                 for k in range(3)]
        assert seeds == [7, 8, 9]
    summary = read_summary(tmp_path / "summary.csv")
    for ctrl in ("ecp", "acp"):
        ms = []
        for k in range(3):
            ep = tmp_path / "crowd" / ctrl / f"episode_{k:03d}"
            stored = MetricsReport.from_json(ep / "metrics.json")
            again = metrics_from_steps_csv(ep / "steps.csv", 0.3, stored.travel_time if stored.arrived else 30,
                                           stored.arrived)
            assert again.collision_rate == stored.collision_rate
            assert again.infeasibility_rate == stored.infeasibility_rate
            assert again.average_cost == pytest.approx(stored.average_cost, rel=1e-12)
            ms.append(stored)
        row = summary[("crowd", ctrl)]
        assert row["episodes"] == 3
        assert row["Cost"] == pytest.approx(sum(m.average_cost for m in ms) / 3, abs=1e-4)


def test_runs_are_byte_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "--controller", "ecp,acp") == 0
    assert run(b, "--controller", "ecp,acp", "--jobs", "2") == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_negative_gamma_names_the_field(tmp_path, capsys):
    assert run(tmp_path, "--set", "episode.gamma=-0.5") == 2
    assert "gamma" in capsys.readouterr().err


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    assert run(tmp_path, "--set", "episode.colour=red") == 2
    assert "colour" in capsys.readouterr().err


def test_missing_dataset_fails(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ECPMPC_DATA_DIR", str(tmp_path / "nowhere"))
    code = main(["run", str(CONFIGS / "zara1.ini"), "-o", str(tmp_path)])
    assert code == 1
    assert "zara1" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ECPMPC_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["run", str(CONFIGS / "synthetic.ini"), *SMALL, "--controller", "acp"]) == 0
    assert (tmp_path / "env" / "summary.csv").is_file()


def test_coverage_audit_series(tmp_path):
    assert run(tmp_path, "--controller", "ecp,acp") == 0
    assert main(["coverage-audit", "-o", str(tmp_path)]) == 0
    series = {}
    for ctrl in ("ecp", "acp"):
        with (tmp_path / "crowd" / ctrl / "episode_000" / "coverage_audit.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        series[ctrl] = {r["series"] for r in rows}
        assert all(0.0 <= float(r["running_coverage"]) <= 1.0 for r in rows)
    assert series["acp"] == {f"h{i}" for i in range(1, 13)}
    assert series["ecp"] == {f"u{k}" for k in range(9)}


def test_coverage_audit_errors(tmp_path, capsys):
    assert main(["coverage-audit", "-o", str(tmp_path)]) == 1
    ep = tmp_path / "s" / "ecp" / "episode_000"
    ep.mkdir(parents=True)
    (ep / "coverage.csv").write_text("frame,horizon,prefix,covered,alpha_before,alpha_after\n")
    assert main(["coverage-audit", "-o", str(tmp_path)]) == 1
    assert "empty" in capsys.readouterr().err


def test_ingest_writes_deterministic_cache(tmp_path, capsys):
    src = tmp_path / "scene.txt"
    src.write_text("".join(f"{f} {p} {f / 10 + p} {p * 0.5}\n" for f in range(0, 100, 10) for p in range(3)))
    assert main(["ingest", str(src), "demo", "-o", str(tmp_path / "o")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["frames"] == 10 and info["pedestrians"] == 3 and info["scene"] == "demo"
    first = Path(info["cache"]).read_bytes()
    assert main(["ingest", str(src), "demo", "-o", str(tmp_path / "o")]) == 0
    assert Path(info["cache"]).read_bytes() == first


def test_ingest_reports_malformed_line(tmp_path, capsys):
    src = tmp_path / "bad.txt"
    src.write_text("0 1 0 0\n10 1 zero 0\n")
    assert main(["ingest", str(src), "bad", "-o", str(tmp_path)]) == 1
    assert "bad.txt:2" in capsys.readouterr().err


def test_ingest_with_scene_config(tmp_path, capsys):
    src = tmp_path / "z.txt"
    src.write_text("".join(f"{f}\t1\t{f / 25}\t0\n" for f in range(0, 60, 10)))
    assert main(["ingest", str(src), "z", "--config", str(CONFIGS / "zara1.ini"), "-o", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["frames"] == 6


def test_selftest_quick_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6 and all(line.startswith("PASS") for line in out)


@pytest.mark.slow
def test_shipped_synthetic_config_orders_controllers(tmp_path):
    # stand-in for the recorded-scene comparison when those files are absent
    assert main(["run", str(CONFIGS / "synthetic.ini"), "-o", str(tmp_path), "--jobs", "4"]) == 0
    rows = read_summary(tmp_path / "summary.csv")
    ecp, acp = rows[("crowd", "ecp")], rows[("crowd", "acp")]
    assert ecp["Cost"] < acp["Cost"] and ecp["Infeas."] < acp["Infeas."]
    assert ecp["Collis."] <= 0.1 and acp["Collis."] <= 0.1
