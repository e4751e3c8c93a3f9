import json

import numpy as np
import pytest

from phasefield_rb import cli
from phasefield_rb.errors import NumericsError
from phasefield_rb.phasefield import rotating_channel_family
from phasefield_rb.pod import SnapshotSet
from phasefield_rb.rom import RomBundle


def _channel_config():
    return {"family": rotating_channel_family(delta=0.25).to_dict(),
            "mesh": {"kind": "rect", "width": 1.0, "height": 1.0, "nx": 12, "ny": 12, "tag_scheme": "left_right"},
            "material": {"mu": 0.5, "kappa": 5e-5, "pressures": {"left": 1000.0, "right": 0.0}},
            "space": {"slip_tags": ["slip"]},
            "solution_plan": {"kind": "uniform", "n": 5},
            "r_max": 5, "deim_max": 5,
            "modes": {"n_xi": 3, "n_zeta": 3, "n_t": 3},
            "study": {"r": [1, 3, 5], "deim": [[3, 3, 3]]},
            "beta": [30.0]}


def _write(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("chan")
    cfg = _write(d / "cfg.json", _channel_config())
    assert _run("snapshot", "--config", cfg, "--out-dir", str(d)) == 0
    assert _run("train", "--config", cfg, "--out-dir", str(d)) == 0
    return d, cfg


def test_snapshot_containers(trained):
    d, _ = trained
    for k in ("xi", "zeta", "t", "solution"):
        s = SnapshotSet.load(d / f"{k}.snap")
        assert s.n_samples == 5


def test_dry_run_writes_nothing(tmp_path, capsys):
    cfg = _write(tmp_path / "cfg.json", _channel_config())
    out = tmp_path / "out"
    for cmd in ("mesh", "snapshot", "train", "study", "site", "calibrate"):
        assert _run(cmd, "--config", cfg, "--out-dir", str(out), "--dry-run") == 0
    assert not out.exists()
    assert "5 parameter points" in capsys.readouterr().out


def test_usage_errors(tmp_path):
    cfg = _channel_config()
    cfg["mesh"] = {"kind": "file", "path": "missing_mesh.txt"}
    assert _run("snapshot", "--config", _write(tmp_path / "a.json", cfg), "--out-dir", str(tmp_path)) == 2
    assert _run("train", "--config", str(tmp_path / "nope.json")) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert _run("mesh", "--config", str(tmp_path / "bad.json")) == 2
    assert _run("frobnicate") == 2
    assert _run("mesh") == 2
    assert _run("mesh", "--config", _write(tmp_path / "p.json", {"preset": "benchmark9"})) == 2
    assert _run("solve", "--config", _write(tmp_path / "s.json", _channel_config()),
                "--out-dir", str(tmp_path / "empty")) == 2   # no bundle yet


def test_mesh_file_roundtrip(tmp_path):
    cfg = _write(tmp_path / "cfg.json", _channel_config())
    assert _run("mesh", "--config", cfg, "--out-dir", str(tmp_path)) == 0
    c2 = _channel_config()
    c2["mesh"] = {"kind": "file", "path": "mesh.txt"}   # relative to the config file
    assert _run("snapshot", "--config", _write(tmp_path / "c2.json", c2), "--out-dir", str(tmp_path / "o"),
                "--dry-run") == 0


def test_train_outputs_and_determinism(trained, tmp_path):
    d, cfg = trained
    b = RomBundle.load(d / "bundle.rom")
    assert b.counts == (3, 3, 3) and b.Kphi.shape[0] == 6
    lines = (d / "eps_solution.csv").read_text().splitlines()
    assert lines[0].startswith("# tool=phasefield-rb version=") and "config_sha256=" in lines[0]
    assert lines[1] == "n,epsilon" and float(lines[2].split(",")[1]) == 1.0
    first = (d / "bundle.rom").read_bytes()
    assert _run("train", "--config", cfg, "--out-dir", str(d)) == 0
    assert (d / "bundle.rom").read_bytes() == first


def test_train_counts_from_config(tmp_path):
    cfg = _channel_config()
    cfg["modes"] = {"n_xi": 4, "n_zeta": 4, "n_t": 4}   # beta = 0 and 180 coincide: rank 4
    assert _run("train", "--config", _write(tmp_path / "c.json", cfg), "--out-dir", str(tmp_path)) == 0
    assert RomBundle.load(tmp_path / "bundle.rom").Kphi.shape[0] == 10
    cfg["modes"] = {"n_xi": 5}
    assert _run("train", "--config", _write(tmp_path / "c.json", cfg), "--out-dir", str(tmp_path)) == 2
    cfg["modes"] = {"r": 4, "guided": True}
    assert _run("train", "--config", _write(tmp_path / "c.json", cfg), "--out-dir", str(tmp_path)) == 0
    assert RomBundle.load(tmp_path / "bundle.rom").r == 4


def test_study_csv(trained, tmp_path):
    d, _ = trained
    rows = (d / "study.csv")
    assert _run("study", "--config", str(d / "cfg.json"), "--out-dir", str(d)) == 0
    lines = rows.read_text().splitlines()
    assert lines[1] == "r,n_xi,n_zeta,n_t,max_rel_L2" and len(lines) == 5
    errs = [float(l.split(",")[-1]) for l in lines[2:]]
    assert errs[-1] <= errs[0]
    cfg = _channel_config()
    cfg["study"] = {"r": [2], "deim": [[2, 2, 2]]}
    cfg["bundle"] = str(d / "bundle.rom")
    assert _run("study", "--config", _write(tmp_path / "one.json", cfg), "--out-dir", str(d / "one")) == 0
    assert len((d / "one" / "study.csv").read_text().splitlines()) == 3
    cfg["study"] = {"r": [], "deim": []}
    assert _run("study", "--config", _write(tmp_path / "empty.json", cfg), "--out-dir", str(d)) == 2


def test_solve(trained):
    d, cfg = trained
    assert _run("solve", "--config", cfg, "--out-dir", str(d)) == 0
    rows = dict(l.split(",") for l in (d / "solve.csv").read_text().splitlines()[2:])
    assert float(rows["left"]) == pytest.approx(-float(rows["right"]), rel=1e-8)


@pytest.fixture(scope="module")
def hex_bundle_path(hex_small, tmp_path_factory):
    p = tmp_path_factory.mktemp("hex") / "hex.rom"
    hex_small[1].bundle.save(p)
    return p


def test_site_honeymoon(hex_bundle_path, tmp_path):
    cfg = {"preset": "hexagon", "bundle": str(hex_bundle_path), "site": {"layout": "honeymoon", "r": 25,
                                                                         "damage": 0.3, "inflows": 1.0}}
    assert _run("site", "--config", _write(tmp_path / "c.json", cfg), "--out-dir", str(tmp_path)) == 0
    hexes = (tmp_path / "hexagons.csv").read_text().splitlines()
    assert len(hexes) == 2 + 225 and hexes[1].startswith("hex_id,D1")
    assert len((tmp_path / "wells.csv").read_text().splitlines()) == 2 + 452
    site = json.loads((tmp_path / "site.json").read_text())
    assert len(site["hexagons"]) == 225


def test_calibrate_exit_codes(hex_bundle_path, tmp_path):
    base = {"preset": "hexagon", "bundle": str(hex_bundle_path),
            "site": {"layout": {"grid": [2, 2]}, "r": 25, "damage": 0.4, "inflows": 1.0}}
    cfg = {**base, "calibration": {"synthetic": {"truth": {"damage": 0.4}, "noise": 0.0}}}
    out = tmp_path / "a"
    assert _run("calibrate", "--config", _write(tmp_path / "a.json", cfg), "--out-dir", str(out)) == 0
    log = (out / "calibration_log.csv").read_text().splitlines()
    assert log[1] == "k,error,step" and float(log[-1].split(",")[1]) <= 1e-6
    assert (out / "damage.csv").is_file() and (out / "measurements.csv").is_file()
    cfg = {**base, "calibration": {"synthetic": {"truth": {"seed": 3}, "noise": 0.01}, "max_iter": 1}}
    out = tmp_path / "b"
    assert _run("calibrate", "--config", _write(tmp_path / "b.json", cfg), "--out-dir", str(out)) == 3
    first = (out / "measurements.csv").read_bytes()
    assert _run("calibrate", "--config", str(tmp_path / "b.json"), "--out-dir", str(out)) == 3
    assert (out / "measurements.csv").read_bytes() == first


def test_numerics_exit_code(monkeypatch, tmp_path):
    def boom(args, cfg):
        raise NumericsError("singular")
    monkeypatch.setitem(cli.COMMANDS, "solve", boom)
    assert _run("solve", "--config", _write(tmp_path / "c.json", _channel_config())) == 4
