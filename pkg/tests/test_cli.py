import json
import numpy as np
import pytest

from odnmr import cli, fitkit
from odnmr.tables import read_csv, read_table


def run(args, capsys=None):
    code = cli.main([str(a) for a in args])
    if capsys is None:
        return code, None
    return code, capsys.readouterr()


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


MAP2D = {"kind": "map2d", "name": "coarse", "params": {
    "a0": "40 kHz", "conditions": {"b0": "10 mT", "rabi": "100 kHz"},
    "axis": "b0", "grid": {"values": ["3 mT", "12 mT"]},
    "theta_grid": {"start": "0 deg", "stop": "90 deg", "num": 7}}}


def test_schema_verb(capsys):
    code, io = run(["schema"], capsys)
    assert code == 0
    doc = json.loads(io.out)
    assert "kind" in doc["properties"]


def test_map2d_coarse(tmp_path, capsys):
    code, io = run(["run", write_cfg(tmp_path, MAP2D), "--out", tmp_path / "o"], capsys)
    assert code == 0, io.err
    assert "coarse.csv" in io.out
    cols, units = read_csv(tmp_path / "o" / "coarse.csv")
    assert units["b0"] == "T"
    names = [n for n in cols if n.startswith("theta=")]
    assert len(names) == 7
    assert np.all(cols[names[0]] < 1e-9) and np.all(cols[names[-1]] < 1e-9)
    report = json.loads((tmp_path / "o" / "coarse.report.json").read_text())
    assert set(report["row_max"]) == {repr(3e-3), repr(12e-3)}
    assert (tmp_path / "o" / "coarse.svg").exists()


def test_same_seed_gives_identical_bytes(tmp_path):
    cfg = write_cfg(tmp_path, MAP2D)
    for d in ("a", "b"):
        assert run(["run", cfg, "--out", tmp_path / d])[0] == 0
    for name in ("coarse.csv", "coarse.report.json", "coarse.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_thread_count_does_not_change_output(tmp_path):
    cfg = write_cfg(tmp_path, MAP2D)
    run(["run", cfg, "--out", tmp_path / "a", "--no-plot"])
    run(["run", cfg, "--out", tmp_path / "b", "--no-plot", "--threads", "3"])
    assert (tmp_path / "a" / "coarse.csv").read_bytes() == (tmp_path / "b" / "coarse.csv").read_bytes()


def test_empty_grid_names_the_field(tmp_path, capsys):
    bad = json.loads(json.dumps(MAP2D))
    bad["params"]["grid"] = {"values": []}
    code, io = run(["run", write_cfg(tmp_path, bad)], capsys)
    assert code == 2
    err = json.loads(io.err)
    assert err["error"] == "validation" and err["exit_code"] == 2
    assert err["field"].startswith("params.grid")


@pytest.mark.parametrize("mutate,needle", [
    (lambda c: c["params"].update(colour="red"), "unknown key"),
    (lambda c: c["params"]["conditions"].update(b0="10"), "number followed by a unit"),
    (lambda c: c["params"]["conditions"].update(b0="10 kHz"), "field"),
    (lambda c: c.update(kind="teleport"), ""),
])
def test_validation_errors(tmp_path, capsys, mutate, needle):
    cfg = json.loads(json.dumps(MAP2D))
    mutate(cfg)
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", tmp_path], capsys)
    assert code == 2
    assert needle in json.loads(io.err)["message"]
    assert not (tmp_path / "coarse.csv").exists()


def test_io_errors(tmp_path, capsys):
    code, io = run(["run", tmp_path / "missing.json"], capsys)
    assert code == 4 and json.loads(io.err)["error"] == "io"
    cfg = {"kind": "spectrum", "params": {"input": "nowhere.csv"}}
    code, io = run(["run", write_cfg(tmp_path, cfg)], capsys)
    assert code == 4
    (tmp_path / "broken.json").write_text("{not json")
    assert run(["run", tmp_path / "broken.json"])[0] == 2


def test_bad_arguments(capsys):
    assert run(["reproduce", "fig99"], capsys)[0] == 2
    assert run(["frobnicate"], capsys)[0] == 2
    assert run(["budget", "--preset", "paper-discussion-2025", "--threads", "0"], capsys)[0] == 2
    assert run(["budget", "--preset", "nope"], capsys)[0] == 2


def test_unconverged_fit_exits_3_after_writing(tmp_path, capsys, monkeypatch):
    real = fitkit.fit_polarization_buildup

    def broken(*a, **k):
        res = real(*a, **k)
        res.converged = False
        res.message = "forced"
        return res

    monkeypatch.setattr(fitkit, "fit_polarization_buildup", broken)
    code, io = run(["reproduce", "fig3e-synth", "--out", tmp_path, "--no-plot"], capsys)
    assert code == 3
    assert json.loads(io.err)["error"] == "non-convergence"
    assert (tmp_path / "fig3e_fit.report.json").exists()


def test_ambiguous_labels_exit_3(tmp_path, capsys, monkeypatch):
    from odnmr import spinpair

    def boom(*a, **k):
        raise spinpair.LabelAmbiguityError("degenerate")

    monkeypatch.setattr(cli.sweepsim, "propagate_sweep", boom)
    cfg = {"kind": "sweep", "params": {"conditions": {"b0": "10 mT", "rabi": "100 kHz"},
                                       "coupling": {"a_zz": "30 kHz", "a_zx": "30 kHz"}}}
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", tmp_path], capsys)
    assert code == 3


def test_budget_preset(tmp_path, capsys):
    code, io = run(["budget", "--preset", "paper-discussion-2025", "--out", tmp_path], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "budget_paper-discussion-2025.report.json").read_text())
    assert rep["odnmr"]["outputs"]["delta_f"] == pytest.approx(2.01e-3, rel=0.01)
    assert rep["coil"]["outputs"]["fidelity"] == pytest.approx(2.47e-3, rel=0.01)


def test_budget_from_config(tmp_path, capsys):
    cfg = {"kind": "budget", "params": {"odnmr": {
        "visibility": "0.3 %", "eta": 7e-3, "n_nv": 1e14, "n_rep": 100, "t2_star": "2 ms",
        "t_pol": "200 ms", "t_read": "200 ms"}}}
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", tmp_path], capsys)
    assert code == 0, io.err
    assert "2.0052e-03" in io.out


def test_output_directory_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run(["budget", "--preset", "paper-discussion-2025"], capsys)[0] == 0
    assert (tmp_path / "env" / "budget_paper-discussion-2025.report.json").exists()


def test_reproduce_figA3(tmp_path, capsys):
    assert run(["reproduce", "figA3", "--out", tmp_path, "--no-plot"], capsys)[0] == 0
    cols, units = read_csv(tmp_path / "figA3_psi2.csv")
    assert abs(cols["psi3"][-1] - 0.31) <= 0.02
    assert units["time"] == "s"
    assert np.allclose(cols["psi1"] + cols["psi2"] + cols["psi3"] + cols["psi4"], 1.0, atol=1e-9)
    psi1, _ = read_csv(tmp_path / "figA3_psi1.csv")
    assert psi1["psi1"][-1] > 0.999


def test_reproduce_figA2(tmp_path, capsys, monkeypatch):
    # same configuration with fewer runs keeps the test quick
    original = cli.FIGURES["figA2"]
    quick = json.loads(json.dumps(original))
    quick[0][1]["params"]["runs"] = 500
    monkeypatch.setitem(cli.FIGURES, "figA2", [tuple(x) for x in quick])
    assert run(["reproduce", "figA2", "--out", tmp_path, "--no-plot"], capsys)[0] == 0
    rep = json.loads((tmp_path / "figA2.report.json").read_text())
    assert rep["spin_count"] == 215
    assert rep["loglog_slope"] == pytest.approx(-2.0, abs=0.1)


def test_reproduce_fig2d_and_roundtrip_json(tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["reproduce", "fig2d-synth", "--out", out, "--format", "json", "--no-plot"], capsys)[0] == 0
    fit = json.loads((out / "fig2d_fit.report.json").read_text())
    assert fit["params"]["t2_star"] == pytest.approx(1.74e-3, rel=0.01)
    cols, _ = read_table(out / "fig2d.json")
    assert cols["tau"].size == 40
    cfg = {"kind": "spectrum", "name": "again", "params": {"input": "o/fig2d.json", "reference": "128.477 kHz"}}
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", out, "--no-plot"], capsys)
    assert code == 0, io.err
    spec = json.loads((out / "again.report.json").read_text())
    assert spec["fit"]["params"]["center"] == pytest.approx(129.34e3, abs=40)


def test_csv_roundtrip_through_fit(tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["reproduce", "fig2d-synth", "--out", out, "--no-plot"], capsys)[0] == 0
    cfg = {"kind": "ramsey-fit", "name": "refit", "params": {"input": str(out / "fig2d.csv")}}
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", out, "--no-plot"], capsys)
    assert code == 0, io.err
    rep = json.loads((out / "refit.report.json").read_text())
    assert rep["params"]["delta"] == pytest.approx(863.0, rel=1e-3)


def test_missing_column_is_validation_error(tmp_path, capsys):
    from odnmr.tables import write_csv

    write_csv(tmp_path / "x.csv", {"when": [0.0, 1.0, 2.0, 3.0], "what": [1.0, 0.0, -1.0, 0.0]})
    cfg = {"kind": "ramsey-fit", "params": {"input": "x.csv"}}
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", tmp_path], capsys)
    assert code == 2
    assert json.loads(io.err)["field"] == "params.input"


def test_envelope_fit_synthesis(tmp_path, capsys):
    cfg = {"kind": "envelope-fit", "name": "env", "params": {"synth": {"a": 1.08, "t_e2": "51.4 ms"}}}
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", tmp_path, "--no-plot"], capsys)
    assert code == 0, io.err
    assert (tmp_path / "env_trace.csv").exists()
    rep = json.loads((tmp_path / "env.report.json").read_text())
    assert set(rep) == {"f1", "f2", "f3"}
    assert rep["f1"]["derived"]["t_e2"] == pytest.approx(51.4e-3, rel=0.01)
    assert rep["f1"]["params"]["a"] == pytest.approx(1.08, rel=0.01)


def test_dressed_and_map1d(tmp_path, capsys):
    assert run(["reproduce", "fig1d", "--out", tmp_path, "--no-plot"], capsys)[0] == 0
    cols, units = read_csv(tmp_path / "fig1d.csv")
    assert list(cols) == ["frequency", "nu1", "nu2", "nu3", "nu4"]
    assert np.all(cols["nu1"] >= cols["nu2"]) and np.all(cols["nu3"] >= cols["nu4"])
    cfg = {"kind": "map1d", "name": "m1", "params": {
        "conditions": {"b0": "10 mT", "rabi": "100 kHz"}, "coupling": {"a_zz": "30 kHz", "a_zx": "30 kHz"},
        "axis": "a_zx", "grid": {"values": ["30 kHz"]}}}
    code, io = run(["run", write_cfg(tmp_path, cfg), "--out", tmp_path, "--no-plot"], capsys)
    assert code == 0, io.err
    m1, _ = read_csv(tmp_path / "m1.csv")
    assert m1["simulated"][0] == pytest.approx(0.3138112588501773, abs=1e-9)
