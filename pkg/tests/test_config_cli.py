import json

import numpy as np
import pytest

from mcnf.cli import EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, main
from mcnf.config import RunConfig, load_config, parse_methods, parse_seeds
from mcnf.errors import ConfigError
from mcnf.experiments import kde_curve

SMALL = """\
[dqr]
epochs = 4
[mcd]
n_samples = 10
baseline_resamples = 50
[mcnf]
epochs = 2
n_nf = 100
[dataset]
n = 300
[run]
seeds = 0-1
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL)
    return path


def test_defaults():
    cfg = RunConfig()
    assert cfg.seeds == tuple(range(20))
    assert cfg.mcnf.tau == 1e10 and cfg.mcd.n_samples == 50 and cfg.conformal.alpha == 0.1


def test_ini_sections_parsed(small_config):
    cfg = load_config(small_config)
    assert cfg.dqr.epochs == 4 and cfg.mcnf.n_nf == 100 and cfg.seeds == (0, 1)
    assert isinstance(cfg.dqr.lr, float) and cfg.dqr.lr == 5e-4


def test_unknown_key_and_section(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[mcnf]\ntemperature = 3\n")
    with pytest.raises(ConfigError, match="tau"):
        load_config(bad)
    bad.write_text("[nope]\na = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_bad_value_and_missing_file(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[dqr]\nepochs = many\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_seed_and_method_lists():
    assert parse_seeds("0-3,7") == (0, 1, 2, 3, 7)
    assert parse_methods("mcnf, cqr") == ("MCNF", "CQR")
    with pytest.raises(ConfigError):
        parse_methods("MCNF,GP")
    with pytest.raises(ConfigError):
        parse_seeds("a-b")


def test_flags_win(small_config, tmp_path, capsys):
    out = tmp_path / "gen"
    code = main(["synth-gen", "--config", str(small_config), "--seed", "5", "--dataset", "romano-original",
                 "--out", str(out), "-n", "12"])
    assert code == EXIT_OK
    files = sorted(p.name for p in out.iterdir())
    assert files == ["romano-original_seed5.csv"]
    assert len((out / files[0]).read_text().splitlines()) == 13


def test_usage_errors_are_machine_readable(capsys, tmp_path):
    code = main(["benchmark", "--dataset", "no-such-preset", "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and err["error"] == "ConfigError"


def test_missing_csv_fails(capsys, tmp_path):
    code = main(["benchmark", "--dataset", str(tmp_path / "none.csv"), "--target", "y",
                 "--out", str(tmp_path)])
    assert code != EXIT_OK
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["status"] == "error"


def test_benchmark_layout(small_config, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["benchmark", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    for seed in (0, 1):
        for method in ("DQR", "MCQR", "MCD", "CQR", "MCCP", "MCNF", "NF"):
            base = out / "romano-mod" / str(seed) / method
            assert (base / "report.csv").is_file() and (base / "report.json").is_file()
    header = (out / "summary.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["dataset", "method", "n_seeds", "coverage", "coverage_std"]
    stdout = capsys.readouterr().out
    assert stdout.splitlines()[0].startswith("method,coverage")


def test_seed_failures_reported(small_config, tmp_path, capsys):
    # 200 points leave 8 calibration points, one short of the alpha = 0.1 minimum
    code = main(["benchmark", "--config", str(small_config), "--out", str(tmp_path / "r"),
                 "--methods", "CQR"])
    assert code == EXIT_OK
    small_config.write_text(SMALL.replace("n = 300", "n = 200"))
    code = main(["benchmark", "--config", str(small_config), "--out", str(tmp_path / "r2"), "--methods", "CQR"])
    assert code == EXIT_PARTIAL
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err["failures"]) == {"0", "1"} and "CalibrationError" in err["failures"]["0"]
    assert (tmp_path / "r2" / "errors.json").is_file()


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_reruns_are_byte_identical(small_config, tmp_path):
    trees = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["benchmark", "--config", str(small_config), "--seed", "3", "--out", str(out)]) == EXIT_OK
        assert main(["plot-data", "--config", str(small_config), "--seed", "3", "--out", str(out),
                     "--grid-points", "2"]) == EXIT_OK
        trees.append(_tree_bytes(out))
    assert trees[0].keys() == trees[1].keys()
    assert any(k.endswith(".png") for k in trees[0])
    assert trees[0] == trees[1]


def test_dqr_only_without_dropout_is_deterministic(tmp_path):
    cfg = tmp_path / "det.ini"
    cfg.write_text(SMALL.replace("[dqr]\n", "[dqr]\ndropout = 0\n") + "methods = DQR\n")
    outs = []
    for run in ("a", "b"):
        assert main(["benchmark", "--config", str(cfg), "--seed", "0", "--out", str(tmp_path / run)]) == EXIT_OK
        outs.append((tmp_path / run / "summary.csv").read_bytes())
    assert outs[0] == outs[1]
    assert b"MCNF" not in outs[0]


def test_plot_data_files(small_config, tmp_path, capsys):
    out = tmp_path / "p"
    code = main(["plot-data", "--config", str(small_config), "--seed", "0", "--out", str(out),
                 "--grid", "2.5"])
    assert code == EXIT_OK
    base = out / "romano-mod" / "0" / "plot-data"
    names = sorted(p.name for p in base.iterdir())
    assert names == ["band.csv", "band.png", "density_000.csv", "ridges.png"]
    rows = (base / "band.csv").read_text().splitlines()
    assert rows[0] == "x,lo,hi,median,covered"
    vals = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    assert np.all(np.diff(vals[:, 0]) >= 0) and np.all(vals[:, 1] <= vals[:, 2])
    assert set(vals[:, 4]) <= {0.0, 1.0}
    dens = (base / "density_000.csv").read_text().splitlines()
    assert dens[0] == "x,source,kind,value,density"
    mcnf_samples = [r for r in dens[1:] if ",MCNF,sample," in r]
    assert len(mcnf_samples) == 100


def test_plot_data_rejects_multivariate(tmp_path, capsys):
    path = tmp_path / "d.csv"
    rng = np.random.default_rng(0)
    rows = ["a,b,y"] + [f"{a},{b},{a + b}" for a, b in rng.normal(size=(40, 2))]
    path.write_text("\n".join(rows) + "\n")
    code = main(["plot-data", "--dataset", str(path), "--target", "y", "--seed", "0", "--out", str(tmp_path)])
    assert code != EXIT_OK
    assert "single predictor" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]


@pytest.mark.parametrize("seed", range(5))
def test_kde_normalizes(seed):
    samples = np.random.default_rng(seed).gamma(2.0, size=100)
    grid, dens, _ = kde_curve(samples, n_points=2048)
    assert abs(np.trapezoid(dens, grid) - 1.0) <= 1e-2
