"""Multi-seed benchmark, sweeps, the fit-quality study and plot-data export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from .config import RunConfig
from .conformal import calibration_split, run_cqr, run_mccp
from .datasets import PRESETS, Dataset, SyntheticParams, generate_romano, load_csv, split_standardize
from .engine import McnfModel, infer, infer_nf_ablation, interval_from_samples, train_mcnf
from .errors import ConfigError, DimensionError
from .mc_dropout import mc_passes, mcd_predictive_intervals, mcd_sample, mcqr_intervals
from .metrics import IntervalReport
from .quantile_net import QuantileNet, TrainConfig, train

log = logging.getLogger(__name__)

METRICS = ("coverage", "width", "width_q0.05", "width_q0.25", "width_q0.5", "width_q0.75",
           "width_q0.95", "mae", "mae_q")
SWEEP_AXES = {"epochs": ("mcnf", "epochs"), "n_nf": ("mcnf", "n_nf"),
              "n_mcd": ("mcd", "n_samples"), "tau": ("mcnf", "tau")}
# tail mass per side of the reported predictive intervals (q05/q95)
TAIL = 0.05


def _streams(seed: int) -> dict:
    """Independent generators for every random stage of one seed."""
    names = ("data", "split", "dqr", "calibration", "mc", "mcnf_fit", "mcnf_infer", "flow_init")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _int_seed(rng) -> int:
    return int(rng.integers(0, 2**31 - 1))


def index_hash(*index_sets) -> str:
    h = hashlib.sha256()
    for idx in index_sets:
        h.update(np.asarray(idx, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def synthetic_params(cfg: RunConfig) -> SyntheticParams:
    d = cfg.dataset
    preset = PRESETS.get(d.name)
    if preset is None and (d.slope is None or d.outlier_threshold is None):
        raise ConfigError(f"dataset {d.name!r} is not a preset; set dataset.slope and "
                          f"dataset.outlier_threshold or dataset.csv")
    slope = d.slope if d.slope is not None else preset.slope
    thr = d.outlier_threshold if d.outlier_threshold is not None else preset.outlier_threshold
    return SyntheticParams(d.offset, d.slope_noise, slope, thr, d.outlier_scale,
                           d.x_low, d.x_high, d.sin_squared)


def make_dataset(cfg: RunConfig, seed: int, cache=None) -> Dataset:
    """Raw + split dataset for one seed (CSV data is read once and re-split)."""
    streams = _streams(seed)
    d = cfg.dataset
    if d.csv:
        key = ("csv", d.csv, d.target)
        if cache is not None and key in cache:
            raw = cache[key]
        else:
            if not d.target:
                raise ConfigError("dataset.csv needs dataset.target")
            raw = load_csv(d.csv, d.target, name=d.name)
            if cache is not None:
                cache[key] = raw
    else:
        raw = generate_romano(synthetic_params(cfg), d.n, streams["data"], name=d.name)
    return split_standardize(raw, d.split_ratio, streams["split"])


def train_base(cfg: RunConfig, data: Dataset, seed: int, epochs=None, init_seed=None) -> QuantileNet:
    q = cfg.dqr
    streams = _streams(seed)
    init = _int_seed(streams["dqr"]) if init_seed is None else init_seed
    net = QuantileNet(data.n_features, q.hidden_width, q.n_hidden, q.dropout,
                      proxy_tap=q.proxy_tap or None, seed=init)
    x, y = data.part("train")
    train(net, x, y, TrainConfig(epochs if epochs is not None else q.epochs, q.batch_size,
                                 q.lr, q.weight_decay, seed=init + 1))
    return net


def fit_mcnf(cfg: RunConfig, net: QuantileNet, data: Dataset, seed: int) -> McnfModel:
    streams = _streams(seed)
    f, m = cfg.flow, cfg.mcnf
    model = McnfModel.build(net, m.tau, cfg.mcd.n_samples, m.n_nf, f.layers, f.knots,
                            f.tail_bound, f.conditioner_hidden, seed=_int_seed(streams["flow_init"]))
    x, y = data.part("train")
    train_mcnf(model, x, y, m.epochs, m.lr, m.batch_size, streams["mcnf_fit"])
    return model


@dataclass
class SeedResult:
    seed: int
    dataset: Dataset
    net: QuantileNet
    reports: dict
    split_hash: str
    method_hashes: dict = field(default_factory=dict)
    model: McnfModel | None = None
    evaluation: np.ndarray | None = None


def evaluate_methods(cfg: RunConfig, data: Dataset, net: QuantileNet, seed: int,
                     methods=None, model=None) -> SeedResult:
    """Evaluate every requested method on one seed's shared split.

    All methods report on the same evaluation indices: the test partition
    minus the conformal calibration subset.
    """
    methods = tuple(methods or cfg.methods)
    streams = _streams(seed)
    x_te, y_te = data.part("test")
    split = calibration_split(len(y_te), cfg.conformal.cal_fraction, cfg.conformal.alpha,
                              streams["calibration"])
    ev = split.evaluation
    split_hash = index_hash(data.train_idx, data.test_idx, split.calibration, ev)
    reports, hashes = {}, {}
    needs_passes = {"MCQR", "MCD", "MCCP"} & set(methods)
    passes = mc_passes(net, x_te, cfg.mcd.baseline_resamples, streams["mc"]) if needs_passes else None

    def add(name, lo, hi, med, extra=None):
        reports[name] = IntervalReport(name, seed, y_te[ev], lo, hi, med, extra or {})
        hashes[name] = split_hash

    if "DQR" in methods:
        q = net.predict_quantiles(x_te[ev])
        add("DQR", q[:, 0], q[:, 2], q[:, 1])
    if "MCQR" in methods:
        lo, hi, med = mcqr_intervals(net, x_te, passes=passes)
        add("MCQR", lo[ev], hi[ev], med[ev])
    if "MCD" in methods:
        lo, hi, med = mcd_predictive_intervals(net, x_te, alpha=TAIL, passes=passes)
        add("MCD", lo[ev], hi[ev], med[ev])
    if "CQR" in methods:
        reports["CQR"] = run_cqr(net, x_te, y_te, split, seed)
        hashes["CQR"] = split_hash
    if "MCCP" in methods:
        reports["MCCP"] = run_mccp(net, x_te, y_te, split, seed=seed, passes=passes)
        hashes["MCCP"] = split_hash
    if {"MCNF", "NF"} & set(methods):
        if model is None:
            model = fit_mcnf(cfg, net, data, seed)
        rng = streams["mcnf_infer"]
        summary = mcd_sample(net, x_te[ev], model.n_mcd, rng)
        infer_seed = _int_seed(rng)
        if "MCNF" in methods:
            out = infer(model, x_te[ev], seed=infer_seed, summary=summary)
            add("MCNF", *interval_from_samples(out.samples, TAIL))
        if "NF" in methods:
            out = infer_nf_ablation(model, x_te[ev], seed=infer_seed, summary=summary)
            add("NF", *interval_from_samples(out.samples, TAIL))
    if len(set(hashes.values())) > 1:
        raise RuntimeError("methods were evaluated on different splits")
    ordered = {m: reports[m] for m in methods}
    return SeedResult(seed, data, net, ordered, split_hash, hashes, model, ev)


def run_seed(cfg: RunConfig, seed: int, methods=None, base_cache=None, data_cache=None) -> SeedResult:
    """Split, train the base network (or reuse a cached one) and evaluate."""
    data = make_dataset(cfg, seed, data_cache)
    key = (seed, cfg.dqr, cfg.dataset)
    if base_cache is not None and key in base_cache:
        net = base_cache[key]
    else:
        net = train_base(cfg, data, seed)
        if base_cache is not None:
            base_cache[key] = net
    return evaluate_methods(cfg, data, net, seed, methods)


def aggregate(reports: list) -> dict:
    """Mean and sample std (n - 1) of every metric, keyed by method."""
    by_method = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r.summary())
    table = {}
    for method, rows in by_method.items():
        cell = {"n_seeds": len(rows)}
        for m in METRICS:
            vals = np.array([row[m] for row in rows], dtype=float)
            cell[m] = float(vals.mean())
            cell[m + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        table[method] = cell
    return table


@dataclass
class BenchmarkResult:
    table: dict
    seeds: list
    errors: dict = field(default_factory=dict)

    def reports(self, method) -> list:
        return [s.reports[method] for s in self.seeds if method in s.reports]

    def mean(self, method, metric="coverage") -> float:
        return self.table[method][metric]


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _table_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h, "")) for h in header])
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_summary(path, dataset_name, table) -> None:
    header = ["dataset", "method", "n_seeds"] + [c for m in METRICS for c in (m, m + "_std")]
    rows = [dict(cell, dataset=dataset_name, method=method) for method, cell in table.items()]
    _atomic_write(Path(path), _table_csv(rows, header))


def run_benchmark(cfg: RunConfig, out=None, base_cache=None, data_cache=None) -> BenchmarkResult:
    """Run every seed, write per-method reports and the aggregated summary.

    A failing seed is recorded and skipped; aggregation uses the rest.
    """
    base_cache = {} if base_cache is None else base_cache
    data_cache = {} if data_cache is None else data_cache
    out = Path(out) if out is not None else None
    results, errors = [], {}
    for seed in cfg.seeds:
        try:
            res = run_seed(cfg, seed, base_cache=base_cache, data_cache=data_cache)
        except Exception as exc:  # recorded per seed, see docstring
            log.warning("seed %s failed: %s", seed, exc)
            errors[seed] = f"{type(exc).__name__}: {exc}"
            continue
        results.append(res)
        if out is not None:
            for method, report in res.reports.items():
                report.write(out / cfg.dataset.name / str(seed) / method)
    if errors:
        log.warning("%d of %d seeds failed; aggregating the rest", len(errors), len(cfg.seeds))
    table = aggregate([r for s in results for r in s.reports.values()]) if results else {}
    if out is not None:
        write_summary(out / "summary.csv", cfg.dataset.name, table)
        if errors:
            _atomic_write(out / "errors.json", json.dumps({str(k): v for k, v in errors.items()}, indent=2))
    return BenchmarkResult(table, results, errors)


def run_sweep(cfg: RunConfig, axis: str, values, out=None) -> dict:
    """One benchmark per value of ``axis``; returns ``{value: BenchmarkResult}``.

    The base network does not depend on the swept flow settings, so it is
    trained once per seed and shared across values.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    section, key = SWEEP_AXES[axis]
    base_cache, data_cache, results, rows = {}, {}, {}, []
    for value in values:
        vcfg = cfg.with_overrides(**{section: {key: value}})
        sub = Path(out) / f"{axis}={value:g}" if out is not None else None
        res = run_benchmark(vcfg, sub, base_cache, data_cache)
        results[value] = res
        for method, cell in res.table.items():
            for metric in METRICS:
                rows.append({"axis": axis, "value": value, "method": method, "metric": metric,
                             "mean": cell[metric], "std": cell[metric + "_std"],
                             "n_seeds": cell["n_seeds"]})
    if out is not None:
        header = ["axis", "value", "method", "metric", "mean", "std", "n_seeds"]
        _atomic_write(Path(out) / "sweep.csv", _table_csv(rows, header))
    return results


def _rmse(net, data) -> float:
    x, y = data.part("train")
    return float(np.sqrt(np.mean((net.predict_quantiles(x)[:, 1] - y) ** 2)))


@dataclass
class FitQualityResult:
    well: BenchmarkResult
    under: BenchmarkResult
    rmse: list  # (seed, well-trained rmse, underfitted rmse)


def run_fit_quality_study(cfg: RunConfig, n_candidates=15, long_epochs=100, short_epochs=6,
                          out=None) -> FitQualityResult:
    """Compare methods on a well-trained base against an underfitted one.

    Per seed, ``n_candidates`` bases are trained for ``long_epochs`` and the
    lowest training RMSE (median head) is kept; another ``n_candidates``
    trained for ``short_epochs`` contribute the highest-RMSE one.
    """
    well_seeds, under_seeds, rmse, errors = [], [], [], {}
    for seed in cfg.seeds:
        try:
            data = make_dataset(cfg, seed)
            inits = np.random.SeedSequence([seed, 15]).generate_state(2 * n_candidates)
            good = [train_base(cfg, data, seed, long_epochs, int(s) >> 1) for s in inits[:n_candidates]]
            bad = [train_base(cfg, data, seed, short_epochs, int(s) >> 1) for s in inits[n_candidates:]]
            g_err, b_err = [_rmse(n, data) for n in good], [_rmse(n, data) for n in bad]
            well_net, under_net = good[int(np.argmin(g_err))], bad[int(np.argmax(b_err))]
            well_seeds.append(evaluate_methods(cfg, data, well_net, seed))
            under_seeds.append(evaluate_methods(cfg, data, under_net, seed))
            rmse.append((seed, min(g_err), max(b_err)))
        except Exception as exc:  # recorded per seed
            log.warning("seed %s failed: %s", seed, exc)
            errors[seed] = f"{type(exc).__name__}: {exc}"
    results = {}
    for tag, seeds in (("well-trained", well_seeds), ("underfitted", under_seeds)):
        table = aggregate([r for s in seeds for r in s.reports.values()]) if seeds else {}
        results[tag] = BenchmarkResult(table, seeds, dict(errors))
        if out is not None:
            base = Path(out) / tag
            for s in seeds:
                for method, report in s.reports.items():
                    report.write(base / cfg.dataset.name / str(s.seed) / method)
            write_summary(base / "summary.csv", cfg.dataset.name, table)
    if out is not None:
        rows = [{"seed": s, "rmse_well_trained": a, "rmse_underfitted": b} for s, a, b in rmse]
        _atomic_write(Path(out) / "rmse.csv",
                      _table_csv(rows, ["seed", "rmse_well_trained", "rmse_underfitted"]))
    return FitQualityResult(results["well-trained"], results["underfitted"], rmse)


def kde_curve(samples, n_points=256, pad=3.0):
    """Gaussian KDE (Silverman bandwidth) evaluated on a padded regular grid."""
    samples = np.asarray(samples, dtype=float).ravel()
    kde = gaussian_kde(samples, bw_method="silverman")
    bw = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(samples.min() - pad * bw, samples.max() + pad * bw, n_points)
    return grid, kde(grid), kde


def emit_plot_data(result: SeedResult, x_grid, out, n_nf=None, seed=0, render=True) -> list:
    """Write per-grid-point sample/KDE files and the test-set interval band.

    Values are on the original (unstandardized) scale. Returns the written paths.
    """
    data = result.dataset
    if data.n_features != 1:
        raise DimensionError(f"plot data needs a single predictor, got {data.n_features}")
    if result.model is None:
        raise ValueError("the seed result carries no trained MCNF model")
    model, out = result.model, Path(out)
    x_grid = np.atleast_1d(np.asarray(x_grid, dtype=float))
    rng = np.random.default_rng(seed)
    xs = data.standardize_x(x_grid[:, None])
    draws = infer(model, xs, n_nf=n_nf, seed=_int_seed(rng))
    written, curves = [], []
    for i, x in enumerate(x_grid):
        sources = {"MCNF": data.unstandardize_y(draws.samples[i]),
                   "MCD": data.unstandardize_y(draws.summary.samples[i])}
        rows, curve = [], {}
        for source, values in sources.items():
            grid, dens, kde = kde_curve(values)
            rows += [{"x": x, "source": source, "kind": "sample", "value": v, "density": d}
                     for v, d in zip(values, kde(values))]
            rows += [{"x": x, "source": source, "kind": "kde", "value": v, "density": d}
                     for v, d in zip(grid, dens)]
            curve[source] = (grid, dens)
        path = out / f"density_{i:03d}.csv"
        _atomic_write(path, _table_csv(rows, ["x", "source", "kind", "value", "density"]))
        written.append(path)
        curves.append((x, curve))

    x_te, y_te = data.part("test")
    ev = result.evaluation
    rep = result.reports.get("MCNF")
    if rep is None:
        lo, hi, med = interval_from_samples(infer(model, x_te[ev], seed=_int_seed(rng)).samples, TAIL)
        rep = IntervalReport("MCNF", result.seed, y_te[ev], lo, hi, med)
    xb = data.x[data.test_idx][ev, 0]
    order = np.argsort(xb, kind="stable")
    lo, hi, med, y = (data.unstandardize_y(a)[order] for a in (rep.lo, rep.hi, rep.median, rep.y))
    band = [{"x": a, "lo": b, "hi": c, "median": d, "covered": int(b <= t <= c)}
            for a, b, c, d, t in zip(xb[order], lo, hi, med, y)]
    path = out / "band.csv"
    _atomic_write(path, _table_csv(band, ["x", "lo", "hi", "median", "covered"]))
    written.append(path)
    if render:
        from .plotting import render_band, render_ridges

        written.append(render_ridges(curves, out / "ridges.png"))
        written.append(render_band(xb[order], lo, hi, med, y, out / "band.png"))
    return written


def config_record(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True, default=str)

