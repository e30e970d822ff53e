import csv
import json

import numpy as np
import pytest
from scipy.special import erf

from pbe_moments.errors import OptimizationError, RealizabilityError, TimeStepError
from pbe_moments.experiments import cli, runner
from pbe_moments.experiments.config import (
    ConfigError,
    ExperimentConfig,
    from_ini,
    load_config,
    save_config,
    shipped_configs,
    to_ini,
)
from pbe_moments.experiments.runner import (
    RunFailure,
    initial_moments,
    relative_l2_error,
    richardson,
    run,
    sweep_orders,
)
from pbe_moments.sectional import VolumeGrid, zeroth_moment

SHORT = dict(final_time=0.1)


# --- configuration ----------------------------------------------------------

def test_ini_round_trip(tmp_path):
    cfg = ExperimentConfig(kind="cavity", closure="QMOM", order=4, n0=3.0, reference_n_v=700,
                           r_list=(0.0, 0.5, 1.0), output_dir=str(tmp_path))
    assert from_ini(to_ini(cfg)) == cfg
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_shipped_configs_and_profiles():
    assert shipped_configs() == ["aggregation", "breakage", "cavity"]
    for name in shipped_configs():
        desk, paper = load_config(name, "desk"), load_config(name, "paper")
        assert desk.kind == paper.kind == name
        assert desk == load_config(name)
        assert paper.n_q == 100 and paper.n_v > desk.n_v
    assert load_config("breakage", "paper").final_time == 4.0
    assert load_config("cavity", "paper").n_x == 50


def test_overrides_apply():
    cfg = load_config("aggregation", closure="PN", order=3, output_dir=None)
    assert (cfg.closure, cfg.order) == ("PN", 3)


@pytest.mark.parametrize("changes", [
    dict(kind="soup"), dict(closure="XY"), dict(n_q=0), dict(d_max=0.0005),
    dict(closure="MN", order=9, n_q=5), dict(closure="QMOM", order=0), dict(cfl_safety=1.5),
    dict(velocity_u="u.txt"), dict(reference_levels=0), dict(tau=-1.0),
])
def test_invalid_configs(changes):
    with pytest.raises(ConfigError):
        ExperimentConfig(**changes)


def test_bad_ini():
    with pytest.raises(ConfigError):
        from_ini("[experiment]\nunknown = 1\n")
    with pytest.raises(ConfigError):
        from_ini("[experiment]\norder = five\n")
    with pytest.raises(ConfigError):
        from_ini("[experiment]\norder = 3\n", profile="huge")
    with pytest.raises(ConfigError):
        load_config("no-such-experiment")


def test_profile_section_overrides():
    text = "[experiment]\norder = 3\n[profile:paper]\nexperiment.order = 7\n"
    assert from_ini(text).order == 3
    assert from_ini(text, "paper").order == 7
    assert from_ini(text, "desk").order == 3


# --- initial condition --------------------------------------------------------

def test_initial_number_density_and_width():
    cfg = ExperimentConfig()
    assert cfg.initial_number == pytest.approx(2 * cfg.alpha0 / (cfg.v_min + cfg.v_max))
    assert cfg.initial_center == pytest.approx(0.5 * (cfg.v_min / cfg.v_max + 1))
    assert cfg.initial_width == pytest.approx(0.1 * (1 - cfg.v_min / cfg.v_max))
    assert cfg.domain.v_min == pytest.approx(1 / 729)


def _truncated_mass(cfg):
    mu, s, dom = cfg.initial_center, cfg.initial_width, cfg.domain
    z = lambda v: erf((v - mu) / (np.sqrt(2) * s))
    return 0.5 * cfg.initial_number * (z(dom.v_max) - z(dom.v_min))


@pytest.mark.parametrize("closure", ["PN", "MN", "QMOM", "FVS"])
def test_initial_zeroth_moment(closure):
    cfg = ExperimentConfig(closure=closure, order=3)
    state = initial_moments(cfg)
    if closure == "FVS":
        g0 = zeroth_moment(state, VolumeGrid.on(cfg.domain, cfg.n_v))
    else:
        g0 = state[0]
    assert g0 == pytest.approx(_truncated_mass(cfg), rel=1e-12)


def test_initial_first_moment_symmetric():
    # the Gaussian sits at the domain midpoint: mean volume equals the centre
    cfg = ExperimentConfig(closure="MN", order=3)
    g = initial_moments(cfg)
    assert g[1] / g[0] == pytest.approx(cfg.initial_center, rel=1e-12)


def test_cavity_initial_is_product():
    cfg = ExperimentConfig(kind="cavity", closure="MN", order=2)
    state = initial_moments(cfg)
    grid = runner.grid_of(cfg)
    w = cfg.width
    px = lambda a, c: 0.5 * (erf((1 - c) / (np.sqrt(2) * w)) - erf((0 - c) / (np.sqrt(2) * w)))
    space = 2 * np.pi * w ** 2 * px(0, cfg.center_x) * px(0, cfg.center_y) / (4 * np.pi ** 2 * w ** 2)
    assert grid.integrate(state[..., 0]) == pytest.approx(space * _truncated_mass(cfg), rel=1e-12)


# --- runs -------------------------------------------------------------------

@pytest.mark.parametrize("closure", ["PN", "MN", "QMOM", "FVS"])
def test_without_breakage_count_is_constant(closure):
    cfg = ExperimentConfig(kind="breakage", closure=closure, order=3, n_v=100, frequency_scale=0.0, **SHORT)
    g0 = run(cfg).gamma0
    np.testing.assert_allclose(g0, g0[0], rtol=1e-14)


@pytest.mark.parametrize("closure", ["PN", "MN", "QMOM"])
def test_breakage_keeps_mass(closure):
    rep = run(ExperimentConfig(kind="breakage", closure=closure, order=5, **SHORT))
    np.testing.assert_allclose(rep.mass, rep.mass[0], rtol=1e-10)
    assert np.all(np.diff(rep.gamma0) > 0)


@pytest.mark.parametrize("closure", ["PN", "MN", "QMOM", "FVS"])
def test_aggregation_count_nonincreasing(closure):
    rep = run(ExperimentConfig(kind="aggregation", closure=closure, order=5, n_v=200, **SHORT))
    assert np.all(np.diff(rep.gamma0) <= 1e-14 * rep.gamma0[0])


def test_runs_are_deterministic(tmp_path):
    cfg = ExperimentConfig(kind="breakage", closure="MN", order=4, **SHORT)
    a = run(cfg.with_(output_dir=str(tmp_path / "a"))).write(tmp_path / "a")
    b = run(cfg.with_(output_dir=str(tmp_path / "b"))).write(tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    summary = json.loads(a.with_suffix(".json").read_text())
    assert summary["newton"]["solves"] > 0


def test_cavity_run_writes_snapshots(tmp_path):
    cfg = ExperimentConfig(kind="cavity", closure="QMOM", order=3, n_x=8, n_y=8, time_step=0.05,
                           final_time=0.1, snapshot_every=1, output_dir=str(tmp_path))
    rep = run(cfg)
    assert rep.final_state.shape == (8, 8, 4)
    assert len(list(tmp_path.glob("*_gamma0_t*.txt"))) == 3
    with open(tmp_path / "cavity_QMOM_N3.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3


# --- errors -----------------------------------------------------------------

def test_relative_error_cases():
    x = np.array([1.0, 2.0, 3.0])
    assert relative_l2_error(x, x) == 0.0
    assert relative_l2_error(np.ones(3), np.zeros(3)) == pytest.approx(1.0)
    for c in (0.5, 2.0, -1.0):
        assert relative_l2_error(x, c * x) == pytest.approx(abs(1 - c))


def test_relative_error_hand_series():
    t = np.array([0.0, 1.0, 2.0])
    ref, cand = np.array([1.0, 1.0, 1.0]), np.array([1.0, 2.0, 1.0])
    # trapezoid: |ref|^2 -> 2, |ref - cand|^2 -> 1
    assert relative_l2_error(ref, cand, t) == pytest.approx(np.sqrt(0.5))


def test_relative_error_interpolates_candidate():
    t = np.linspace(0, 1, 11)
    tc = np.linspace(0, 1, 3)
    ref = 1 + t
    assert relative_l2_error(ref, 1 + tc, t, tc) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        relative_l2_error(ref, np.ones(4))


def test_richardson_removes_leading_terms():
    h = np.array([1.0, 0.5, 0.25])
    exact = 3.0
    levels = [exact + 0.7 * hh + 0.2 * hh ** 2 for hh in h]
    assert richardson(levels) == pytest.approx(exact, rel=1e-14)
    assert richardson([5.0]) == 5.0


def test_sweep_single_order(tmp_path):
    cfg = ExperimentConfig(kind="breakage", closure="PN", n_v=200, **SHORT)
    rows = sweep_orders(cfg, [3], out=tmp_path)
    assert len(rows) == 1 and rows[0][0] == 3
    assert 0 < rows[0][2] < 0.1
    assert (tmp_path / "sweep_breakage_PN.csv").read_text().startswith("order,seconds,E2")
    with pytest.raises(ConfigError):
        sweep_orders(cfg.with_(closure="FVS"), [1])


def test_failure_flushes_partial_output(tmp_path, monkeypatch):
    cfg = ExperimentConfig(kind="breakage", closure="QMOM", order=3, output_dir=str(tmp_path), **SHORT)
    calls = {"n": 0}
    real = runner._MomentEngine.close

    def failing(self, gamma):
        calls["n"] += 1
        if calls["n"] > 3:
            raise RealizabilityError("forced")
        return real(self, gamma)

    monkeypatch.setattr(runner._MomentEngine, "close", failing)
    with pytest.raises(RunFailure) as err:
        run(cfg)
    assert isinstance(err.value.cause, RealizabilityError)
    rows = (tmp_path / "breakage_QMOM_N3.csv").read_text().splitlines()
    assert 1 < len(rows) - 1 < cfg.steps + 1


# --- command line -----------------------------------------------------------

def test_cli_run_prints_summary(tmp_path, capsys):
    code = cli.main(["run", "--config", "breakage", "--closure", "qmom", "--order", "3",
                     "--final-time", "0.05", "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["gamma0_final"] > summary["gamma0_initial"]
    assert (tmp_path / "breakage_QMOM_N3.csv").exists()


def test_cli_error_between_files(tmp_path, capsys):
    for name, scale in (("a", 1.0), ("b", 1.5)):
        with open(tmp_path / f"{name}.csv", "w") as fh:
            fh.write("time,gamma0,mass\n0,2,1\n1,2,1\n")
            fh.write(f"2,{2 * scale},1\n")
    assert cli.main(["error", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["E2"] > 0


def test_cli_sweep(tmp_path, capsys):
    code = cli.main(["sweep", "--config", "breakage", "--closure", "pn", "--order", "1,2",
                     "--final-time", "0.05", "--out", str(tmp_path)])
    assert code == 0
    lines = [json.loads(s) for s in capsys.readouterr().out.splitlines()]
    assert [r["order"] for r in lines] == [1, 2]


def test_parse_orders():
    assert cli.parse_orders(["1-3", "5"]) == [1, 2, 3, 5]
    assert cli.parse_orders(["2,4"]) == [2, 4]
    with pytest.raises(ConfigError):
        cli.parse_orders(["x"])


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\norder = -1\n")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["error", "--closure", "pn"]) == cli.EXIT_CONFIG


@pytest.mark.parametrize("exc, code", [
    (RealizabilityError("bad"), 3), (OptimizationError("no"), 3), (TimeStepError("dt"), 4),
])
def test_cli_failure_exit_codes(monkeypatch, exc, code, capsys):
    def boom(*args, **kwargs):
        raise RunFailure("failed", None, 0.0, exc)

    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["run", "--config", "breakage"]) == code
    assert "error" in capsys.readouterr().err


def test_cli_velocity_export_import(tmp_path, capsys):
    cfg = tmp_path / "small.ini"
    save_config(load_config("cavity").with_(n_x=10, n_y=10), cfg)
    assert cli.main(["cavity-velocity", "export", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    exported = json.loads(capsys.readouterr().out)
    assert exported["shape"] == [10, 10] and exported["max_divergence"] < 1e-10
    assert cli.main(["cavity-velocity", "import", str(tmp_path / "u.txt"), str(tmp_path / "z.txt")]) == 0
    imported = json.loads(capsys.readouterr().out)
    assert imported["max_speed"] == pytest.approx(exported["max_speed"], rel=1e-15)
    assert cli.main(["cavity-velocity", "import", str(tmp_path / "u.txt")]) == cli.EXIT_CONFIG


def test_run_with_velocity_files(tmp_path, capsys):
    cfg = load_config("cavity").with_(n_x=8, n_y=8, closure="PN", order=2, time_step=0.05, final_time=0.05)
    cli.main(["cavity-velocity", "export", "--config", _saved(cfg, tmp_path), "--out", str(tmp_path)])
    solved = run(cfg)
    loaded = run(cfg.with_(velocity_u=str(tmp_path / "u.txt"), velocity_z=str(tmp_path / "z.txt")))
    np.testing.assert_allclose(loaded.final_state, solved.final_state, rtol=1e-13)
    with pytest.raises(ConfigError):
        run(cfg.with_(velocity_u=str(tmp_path / "nope"), velocity_z=str(tmp_path / "z.txt")))


def _saved(cfg, tmp_path):
    path = tmp_path / "cfg.ini"
    save_config(cfg, path)
    return str(path)
