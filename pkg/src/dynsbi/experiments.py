"""Seeded end-to-end experiment drivers.

Each run writes CSV tables, ``summary.json`` and ``manifest.json`` into an
output directory. All of these are byte-reproducible from the manifest;
wall-clock timings go to ``timing.json``, which is not.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import platform
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_voles_csv
from .diagnostics import (comparison_csv, compare_estimators, krzanowski_report, lyapunov_posterior,
                          posterior_summary)
from .models import (DEFAULT_DT, DEFAULT_WARMUP, VOLE_TRUTH, LgSsmParams, LinearGaussianModel, VoleModel,
                     VoleParams, _step_grid, default_obs_times, exponential_simulate, kalman_loglik,
                     lg_ssm_simulate, vole_simulate)
from .pfilter import sir_loglik
from .priors import PriorSpec, vole_prior
from .rng import as_rng, seed_record, spawn
from .samplers import Chain, ProposalSpec, pmmh, scaling_matrix_experiment, slmh
from .summaries import SummaryVector, VOLE_NAMES, vole_stats
from .synlik import sl_estimate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PRESETS: dict[str, dict[str, dict]] = {
    "ricker-scaling": {
        "desk": {"grid_start": 2.8, "grid_stop": 3.8, "grid_points": 10, "reps": 2, "n_pop": 200,
                 "stop_accept_ratio": 0.01, "n_cov": 10_000, "T": 50},
        "full": {"grid_points": 50, "reps": 7},
    },
    "exp-sl-demo": {
        "desk": {"alpha_true": 1.0, "N": 10, "alpha_start": 0.5, "alpha_stop": 2.0, "alpha_step": 0.05,
                 "m": 10_000},
        "full": {},
    },
    "vole-sim-compare": {
        "desk": {"datasets": 3, "iterations": 3000, "burn_in": 1000, "budget": 500, "replicates": 1,
                 "methods": ["slmh", "pmmh"], "step": 0.05, "truth": VOLE_TRUTH.as_dict()},
        "full": {"datasets": 24, "iterations": 25_000, "burn_in": 5000, "budget": 1000},
    },
    "kilpisjarvi-fit": {
        "desk": {"data_path": None, "iterations": 3000, "burn_in": 1000, "budget": 500, "replicates": 1,
                 "methods": ["slmh", "pmmh"], "step": 0.05, "normality_sims": 2000, "lyapunov_draws": 0,
                 "transient_months": 12_000, "horizon_months": 2400},
        "full": {"iterations": 150_000, "burn_in": 10_000, "budget": 1000, "normality_sims": 10_000,
                  "lyapunov_draws": 1000, "transient_months": 100_000, "horizon_months": 10_000},
    },
    "lyapunov-posterior": {
        "desk": {"chain_path": None, "n_draws": 50, "transient_months": 12_000, "horizon_months": 2400},
        "full": {"n_draws": 1000, "transient_months": 100_000, "horizon_months": 10_000},
    },
    "lgssm-oracle": {
        "desk": {"a_coef": 0.9, "c_coef": 1.0, "q_var": 0.5, "r_var": 0.8, "m0": 0.0, "p0": 1.0, "T": 50,
                 "particles": 2000, "reps": 100},
        "full": {},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    preset: str = "desk"
    settings: dict = field(default_factory=dict)
    threads: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.experiment not in PRESETS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {sorted(PRESETS)}")
        if self.preset not in ("desk", "full"):
            raise ConfigError("preset must be 'desk' or 'full'")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        unknown = set(self.settings) - set(PRESETS[self.experiment]["desk"])
        if unknown:
            raise ConfigError(f"unknown settings for {self.experiment}: {sorted(unknown)}")
        for key, value in self.resolved().items():
            if key in ("iterations", "budget", "datasets", "reps", "n_pop", "particles", "m", "N", "n_draws",
                       "grid_points", "horizon_months", "T") and not (isinstance(value, int) and value > 0):
                raise ConfigError(f"{key} must be a positive integer")

    def resolved(self) -> dict:
        out = copy.deepcopy(PRESETS[self.experiment]["desk"])
        if self.preset == "full":
            out.update(copy.deepcopy(PRESETS[self.experiment]["full"]))
        out.update(copy.deepcopy(self.settings))
        return out

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "experiment": self.experiment, "seed": self.seed,
                "preset": self.preset, "threads": self.threads, "settings": self.settings}

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None, threads: int | None = None) -> "ExperimentConfig":
        d = dict(d.get("config", d))  # a manifest carries its config under "config"
        if seed is not None:
            d["seed"] = seed
        if threads is not None:
            d["threads"] = threads
        if "seed" not in d:
            raise ConfigError("a seed is required")
        allowed = {"schema_version", "experiment", "seed", "preset", "threads", "settings"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "experiment" not in d:
            raise ConfigError("config needs an 'experiment' tag")
        return cls(**d)

    @classmethod
    def load(cls, path, **kw) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), **kw)


# ---------------------------------------------------------------------------
# output helpers


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)):
        return float(o) if math.isfinite(o) else None
    return o


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8", newline="\n")


def write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


class Run:
    """Bookkeeping for one experiment: output files and consumed seeds."""

    def __init__(self, out: Path, seed: int):
        self.out = out
        self.root_seed = seed
        self.files: list[str] = []
        self.seeds: dict[str, object] = {}

    def child_seeds(self, labels):
        children = spawn(self.root_seed, len(labels))
        for label, ss in zip(labels, children):
            self.seeds[label] = seed_record(ss)
        return dict(zip(labels, children))

    def write(self, name: str, text: str) -> None:
        write_text(self.out / name, text)
        self.files.append(name)

    def write_json(self, name: str, obj) -> None:
        write_json(self.out / name, obj)
        self.files.append(name)


def _table_csv(header, rows) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)
    lines = [",".join(header)]
    lines += [",".join(fmt(r[h]) for h in header) for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# vole fitting helpers


def vole_init(prior: PriorSpec, y, obs_times=None) -> np.ndarray:
    """Chain start: prior means where proper, with phi matched to the data.

    phi has an improper prior, so it is set to mean(y) / mean(n) along the
    noise-free path at the other starting values. Everything else is the
    prior mean (or 1.0 where the prior has none).
    """
    theta = prior.default_init()
    names = list(prior.names)
    theta[names.index("phi")] = 1.0
    params = VoleParams.from_array(theta)
    obs_times = default_obs_times() if obs_times is None else np.asarray(obs_times, float)
    nsteps = int(_step_grid(obs_times[0] - DEFAULT_WARMUP, obs_times[-1:], DEFAULT_DT)[0])
    prey = vole_simulate(params, obs_times, noise=np.zeros(nsteps)).latent[:, 0]
    ybar = float(np.mean(y))
    if np.mean(prey) > 0 and ybar > 0:
        theta[names.index("phi")] = ybar / float(np.mean(prey))
    return theta


def fit_vole(method: str, y, model: VoleModel, settings: dict, seed, threads: int = 1) -> Chain:
    prior = vole_prior()
    proposal = ProposalSpec.for_prior(prior, settings["step"])
    init = vole_init(prior, y, model.obs_times)
    if method == "slmh":
        s_obs = vole_stats(np.asarray(y, float)[None, :])[0]
        return slmh(model.simulate, vole_stats, s_obs, prior, proposal, init, settings["iterations"],
                    settings["burn_in"], settings["budget"], seed)
    if method == "pmmh":
        return pmmh(model, np.asarray(y), prior, proposal, init, settings["iterations"], settings["burn_in"],
                    settings["budget"], seed, replicates=settings.get("replicates", 1), threads=threads,
                    refresh_current="burn-in")
    raise ConfigError(f"unknown method {method!r}")


def _posterior_rows(chain: Chain, truth: dict | None = None):
    rows = []
    for name, (mean, sd) in posterior_summary(chain).items():
        row = {"parameter": name, "mean": mean, "sd": sd}
        if truth is not None:
            row["truth"] = truth[name]
            row["within_2sd"] = bool(abs(mean - truth[name]) <= 2 * sd)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# experiments


def _ricker_scaling(cfg: dict, run: Run, threads: int) -> dict:
    grid = np.linspace(cfg["grid_start"], cfg["grid_stop"], cfg["grid_points"])
    seeds = run.child_seeds(["scaling"])
    rows = scaling_matrix_experiment(grid, cfg["reps"], seeds["scaling"], n_pop=cfg["n_pop"],
                                     stop_accept_ratio=cfg["stop_accept_ratio"], n_cov=cfg["n_cov"], T=cfg["T"])
    run.write("scaling.csv", _table_csv(["rep", "v", "tolerance", "rounds", "sims", "truncated"], rows))
    return summarize_scaling(rows, grid)


def summarize_scaling(rows: list[dict], grid) -> dict:
    v = np.array([r["v"] for r in rows])
    tol = np.array([r["tolerance"] for r in rows])
    coef = np.polyfit(v, tol, 2)
    fine = np.linspace(grid.min(), grid.max(), 1001)
    fitted = np.polyval(coef, fine)
    means = {float(g): float(tol[v == g].mean()) for g in grid}
    return {"quadratic_coef": coef.tolist(), "fit_argmin": float(fine[np.argmin(fitted)]),
            "mean_tolerance": [{"v": k, "tolerance": m} for k, m in means.items()],
            "mean_tol_low": means[float(grid.min())], "mean_tol_high": means[float(grid.max())]}


def exponential_sl_curve(alpha_true, N, alphas, m, seed) -> dict:
    """Synthetic and exact log-likelihood of alpha for the statistic 1/mean(x)."""
    data_seed, sl_seed = spawn(seed, 2)
    x = exponential_simulate(alpha_true, N, data_seed)
    s_obs = np.array([1.0 / x.mean()])

    def simulator(thetas, rng):
        return rng.exponential(1.0, (thetas.shape[0], N)) / thetas[:, :1]

    def summarizer(data):
        return 1.0 / data.mean(axis=1, keepdims=True)

    seeds = spawn(sl_seed, len(alphas))
    sl = np.array([sl_estimate(simulator, summarizer, [a], s_obs, m, ss).log_sl for a, ss in zip(alphas, seeds)])
    exact = N * np.log(alphas) - alphas * x.sum()
    return {"alpha": np.asarray(alphas), "synthetic": sl, "exact": exact, "s_obs": float(s_obs[0])}


def _exp_sl_demo(cfg: dict, run: Run, threads: int) -> dict:
    alphas = np.round(np.arange(cfg["alpha_start"], cfg["alpha_stop"] + cfg["alpha_step"] / 2, cfg["alpha_step"]), 10)
    seeds = run.child_seeds(["curve"])
    res = exponential_sl_curve(cfg["alpha_true"], cfg["N"], alphas, cfg["m"], seeds["curve"])
    rows = [{"alpha": a, "synthetic_loglik": s, "true_loglik": e}
            for a, s, e in zip(res["alpha"], res["synthetic"], res["exact"])]
    run.write("sl_curve.csv", _table_csv(["alpha", "synthetic_loglik", "true_loglik"], rows))
    return {"s_obs": res["s_obs"], "argmax_synthetic": float(alphas[np.argmax(res["synthetic"])]),
            "argmax_true": float(alphas[np.argmax(res["exact"])]),
            "correlation": float(np.corrcoef(res["synthetic"], res["exact"])[0, 1])}


def _run_tasks(tasks, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda f: f(), tasks))
    return [f() for f in tasks]


def _vole_sim_compare(cfg: dict, run: Run, threads: int) -> dict:
    truth = dict(cfg["truth"])
    theta = VoleParams(**truth).to_array()
    model = VoleModel()
    labels = [f"data_{i:02d}" for i in range(cfg["datasets"])]
    labels += [f"{m}_{i:02d}" for i in range(cfg["datasets"]) for m in cfg["methods"]]
    seeds = run.child_seeds(labels)
    data = []
    for i in range(cfg["datasets"]):
        y = model.simulate(theta[None, :], as_rng(seeds[f"data_{i:02d}"]))[0].astype(np.int64)
        data.append(y)
        run.write(f"data_{i:02d}.csv", _table_csv(["time", "obs"], [{"time": t, "obs": int(v)} for t, v in zip(model.obs_times, y)]))
    jobs = [(m, i) for i in range(cfg["datasets"]) for m in cfg["methods"]]
    tasks = [(lambda m=m, i=i: fit_vole(m, data[i], model, cfg, seeds[f"{m}_{i:02d}"])) for m, i in jobs]
    chains = dict(zip(jobs, _run_tasks(tasks, threads)))
    summary = {"datasets": []}
    for i in range(cfg["datasets"]):
        entry = {"dataset": i}
        for m in cfg["methods"]:
            ch = chains[(m, i)]
            run.write(f"chain_{m}_{i:02d}.csv", ch.to_csv())
            entry[m] = {"acceptance_rate": ch.acceptance_rate, "posterior": _posterior_rows(ch, truth)}
        summary["datasets"].append(entry)
    if len(cfg["methods"]) == 2 and cfg["datasets"] >= 2:
        a, b = cfg["methods"]
        rows = compare_estimators(truth, [chains[(a, i)] for i in range(cfg["datasets"])],
                                  [chains[(b, i)] for i in range(cfg["datasets"])])
        run.write("comparison.csv", comparison_csv(rows, a, b))
        summary["comparison"] = [{"parameter": r.name, f"rmse_{a}": r.rmse_a, f"ratio_{a}": r.ratio_a,
                                  f"rmse_{b}": r.rmse_b, f"ratio_{b}": r.ratio_b, "p_value": r.p_value}
                                 for r in rows]
    return summary


def _kilpisjarvi_fit(cfg: dict, run: Run, threads: int) -> dict:
    if not cfg.get("data_path"):
        raise ConfigError("kilpisjarvi-fit needs settings.data_path pointing at a year,season,index CSV")
    series = load_voles_csv(cfg["data_path"])
    model = VoleModel(obs_times=series.times())
    y = series.counts
    labels = [*cfg["methods"], "normality", "lyapunov"]
    seeds = run.child_seeds(labels)
    tasks = [(lambda m=m: fit_vole(m, y, model, cfg, seeds[m])) for m in cfg["methods"]]
    chains = dict(zip(cfg["methods"], _run_tasks(tasks, threads)))
    summary = {"n_obs": len(y), "methods": {}}
    for m, ch in chains.items():
        run.write(f"chain_{m}.csv", ch.to_csv())
        summary["methods"][m] = {"acceptance_rate": ch.acceptance_rate, "posterior": _posterior_rows(ch)}
    ref = chains.get("slmh") or next(iter(chains.values()))
    if cfg["normality_sims"] > 0:
        theta = ref.posterior.mean(axis=0)
        rng = as_rng(seeds["normality"])
        stats = vole_stats(model.simulate(np.tile(theta, (cfg["normality_sims"], 1)), rng))
        s_obs = SummaryVector(vole_stats(y[None, :].astype(float))[0], VOLE_NAMES)
        rep = krzanowski_report(stats, s_obs)
        run.write("qq.csv", rep.qq_csv(log_scale=True))
        run.write("qq_marginal.csv", rep.marginal_csv())
        summary["normality"] = {"obs_mahalanobis": rep.obs_mahalanobis, "qq_slope": rep.qq_slope,
                                "chi2_q95": float(np.quantile(rep.chi2_values, 0.95))}
    if cfg["lyapunov_draws"] > 0:
        rows, med = [], {}
        for m, ch in chains.items():
            lam = lyapunov_posterior(ch, cfg["lyapunov_draws"], cfg["transient_months"], cfg["horizon_months"],
                                     seeds["lyapunov"], threads)
            rows += [{"method": m, "draw": i, "lyapunov": v} for i, v in enumerate(lam)]
            med[m] = {"median": float(np.nanmedian(lam)), "missing": int(np.isnan(lam).sum())}
        run.write("lyapunov.csv", _table_csv(["method", "draw", "lyapunov"], rows))
        summary["lyapunov"] = med
    return summary


def _lyapunov_posterior(cfg: dict, run: Run, threads: int) -> dict:
    if not cfg.get("chain_path"):
        raise ConfigError("lyapunov-posterior needs settings.chain_path pointing at a chain CSV")
    chain = Chain.from_csv(Path(cfg["chain_path"]).read_text(encoding="utf-8"))
    seeds = run.child_seeds(["lyapunov"])
    lam = lyapunov_posterior(chain, cfg["n_draws"], cfg["transient_months"], cfg["horizon_months"],
                             seeds["lyapunov"], threads)
    run.write("lyapunov.csv", _table_csv(["draw", "lyapunov"], [{"draw": i, "lyapunov": v} for i, v in enumerate(lam)]))
    return {"median": float(np.nanmedian(lam)), "missing": int(np.isnan(lam).sum()), "n_draws": len(lam)}


def lgssm_check(params: LgSsmParams, T: int, particles: int, reps: int, seed) -> dict:
    data_seed, pf_seed = spawn(seed, 2)
    y = lg_ssm_simulate(params, T, data_seed).obs
    model = LinearGaussianModel(params, free=())
    exact = kalman_loglik(params, y)
    est = np.array([sir_loglik(model, [], y, particles, ss).value for ss in spawn(pf_seed, reps)])
    se = float(est.std(ddof=1) / math.sqrt(reps))
    return {"kalman": exact, "estimates": est, "mean": float(est.mean()), "sd": float(est.std(ddof=1)),
            "se": se, "z": (float(est.mean()) - exact) / se}


def _lgssm_oracle(cfg: dict, run: Run, threads: int) -> dict:
    params = LgSsmParams(cfg["a_coef"], cfg["c_coef"], cfg["q_var"], cfg["r_var"], cfg["m0"], cfg["p0"])
    seeds = run.child_seeds(["oracle"])
    res = lgssm_check(params, cfg["T"], cfg["particles"], cfg["reps"], seeds["oracle"])
    run.write("lgssm.csv", _table_csv(["rep", "sir_loglik"], [{"rep": i, "sir_loglik": v} for i, v in enumerate(res["estimates"])]))
    return {k: v for k, v in res.items() if k != "estimates"} | {"within_3se": abs(res["z"]) < 3}


RUNNERS = {
    "ricker-scaling": _ricker_scaling,
    "exp-sl-demo": _exp_sl_demo,
    "vole-sim-compare": _vole_sim_compare,
    "kilpisjarvi-fit": _kilpisjarvi_fit,
    "lyapunov-posterior": _lyapunov_posterior,
    "lgssm-oracle": _lgssm_oracle,
}


def run_experiment(config: ExperimentConfig, out) -> dict:
    """Run one tagged experiment into ``out``; returns the manifest.

    Errors are recorded in the manifest and re-raised.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(out, config.seed)
    manifest = {"schema_version": SCHEMA_VERSION, "experiment": config.experiment, "config": config.to_dict(),
                "resolved_settings": config.resolved(), "package_version": __version__,
                "numpy_version": np.__version__, "python_version": platform.python_version()}
    start = time.perf_counter()
    try:
        summary = RUNNERS[config.experiment](config.resolved(), run, config.threads)
        run.write_json("summary.json", summary)
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        log.debug("experiment failed\n%s", traceback.format_exc())
        raise
    finally:
        manifest["seeds"] = run.seeds
        manifest["outputs"] = run.files
        write_json(out / "manifest.json", manifest)
        write_json(out / "timing.json", {"wall_seconds": time.perf_counter() - start})
    return manifest
