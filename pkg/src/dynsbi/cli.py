"""Command-line interface.

Every stochastic subcommand needs ``--seed``; outputs go to ``--out`` as CSV
and JSON, and the same seed always gives byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_voles_csv
from .diagnostics import krzanowski_report, lyapunov_posterior, posterior_summary, vole_lyapunov
from .experiments import (PRESETS, ConfigError, ExperimentConfig, fit_vole, run_experiment, write_json,
                          write_text)
from .models import (RICKER_TRUTH, VOLE_TRUTH, LgSsmParams, LinearGaussianModel, RickerModel, RickerParams,
                     Trajectory, VoleModel, VoleParams, lg_ssm_simulate, ricker_simulate, vole_simulate)
from .pfilter import averaged_loglik
from .priors import ricker_prior
from .rng import as_rng, seed_record
from .samplers import Chain, smc_abc
from .summaries import RICKER_NAMES, VOLE_NAMES, SummaryVector, ricker_stats, vole_stats
from .synlik import cholesky_jittered, sample_mean_cov, sl_estimate

log = logging.getLogger("dynsbi")

LG_DEFAULT = LgSsmParams(0.9, 1.0, 0.5, 0.8)
MODELS = ("vole", "ricker", "lgssm")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _need_seed(args):
    if args.seed is None:
        raise CliError(f"{args.command} is stochastic: --seed is required")
    return args.seed


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> dict:
    if not args.config:
        return {}
    with open(args.config, encoding="utf-8") as fh:
        return json.load(fh)


def _parse_params(model: str, text: str | None):
    """``name=value,...`` overrides applied to the model's default parameters."""
    base = {"vole": VOLE_TRUTH, "ricker": RICKER_TRUTH, "lgssm": LG_DEFAULT}[model].as_dict()
    if text:
        for item in text.split(","):
            key, sep, val = item.partition("=")
            key = key.strip()
            if not sep or key not in base:
                raise CliError(f"bad parameter {item!r}; known names: {', '.join(base)}")
            try:
                base[key] = float(val)
            except ValueError:
                raise CliError(f"parameter {key} needs a number, got {val.strip()!r}") from None
    cls = {"vole": VoleParams, "ricker": RickerParams, "lgssm": LgSsmParams}[model]
    try:
        return cls(**base)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def read_observations(path) -> tuple[np.ndarray, np.ndarray]:
    """Times and observations from a trajectory CSV or a year,season,index file."""
    text = Path(path).read_text(encoding="utf-8")
    first = text.split("\n", 1)[0].strip().lower()
    if first.startswith("year"):
        series = load_voles_csv(path)
        return series.times(), series.counts
    traj = Trajectory.from_csv(text)
    return traj.times, traj.obs


def _model(name: str, times, T: int | None = None):
    if name == "vole":
        return VoleModel(obs_times=times)
    if name == "ricker":
        return RickerModel(T=T or len(times))
    raise CliError(f"model {name!r} is not supported here")


def _summarizer(name: str):
    if name == "vole":
        return vole_stats, VOLE_NAMES
    if name == "ricker":
        return ricker_stats, RICKER_NAMES
    raise CliError(f"no summary statistics defined for model {name!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    seed = _need_seed(args)
    params = _parse_params(args.model, args.params)
    if args.model == "vole":
        traj = vole_simulate(params, seed=seed)
    elif args.model == "ricker":
        traj = ricker_simulate(params, args.T, seed=seed)
    else:
        traj = lg_ssm_simulate(params, args.T, seed=seed)
    write_text(_out_dir(args) / "trajectory.csv", traj.to_csv())
    return 0


def cmd_summarize(args) -> int:
    _, y = read_observations(args.input)
    fn, names = _summarizer(args.model)
    values = fn(np.asarray(y, float)[None, :])[0]
    sv = SummaryVector(values, names, bool(np.any(~np.isfinite(values))))
    text = sv.to_csv()
    if args.out:
        write_text(_out_dir(args) / "summary.csv", text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sl_eval(args) -> int:
    seed = _need_seed(args)
    times, y = read_observations(args.input)
    model = _model(args.model, times)
    fn, _ = _summarizer(args.model)
    theta = _parse_params(args.model, args.params).to_array()
    s_obs = fn(np.asarray(y, float)[None, :])[0]
    fit = sl_estimate(model.simulate, fn, theta, s_obs, args.m, seed, shrinkage=args.shrinkage)
    write_text(_out_dir(args) / "synlik.json", fit.to_json() + "\n")
    return 0


def cmd_pf_eval(args) -> int:
    seed = _need_seed(args)
    times, y = read_observations(args.input)
    if args.model == "lgssm":
        params = _parse_params("lgssm", args.params)
        model, theta = LinearGaussianModel(params, free=()), np.empty(0)
    else:
        model = _model(args.model, times)
        theta = _parse_params(args.model, args.params).to_array()
    est = averaged_loglik(model, theta, np.asarray(y), args.m, args.replicates, seed, threads=args.threads)
    out = _out_dir(args)
    write_json(out / "loglik.json", {"loglik": est.value, "method": est.method, "budget": est.budget,
                                     "replicates": args.replicates, "failed_at": est.failed_at,
                                     "seed": seed_record(seed)})
    return 0


def cmd_mcmc(args) -> int:
    cfg = _load_config(args)
    if "experiment" in cfg or "config" in cfg:
        return _run_config(cfg, args)
    seed = _need_seed(args)
    if args.input is None:
        raise CliError("mcmc needs --input (or --config with an experiment tag)")
    times, y = read_observations(args.input)
    settings = {"iterations": args.iterations, "burn_in": args.burn_in, "budget": args.budget,
                "replicates": args.replicates, "step": args.step}
    chain = fit_vole(args.method, np.asarray(y), VoleModel(obs_times=times), settings, seed, args.threads)
    out = _out_dir(args)
    write_text(out / "chain.csv", chain.to_csv())
    summary = {"method": args.method, "acceptance_rate": chain.acceptance_rate,
               "posterior": {k: {"mean": m, "sd": s} for k, (m, s) in posterior_summary(chain).items()}}
    write_json(out / "summary.json", summary)
    for name, (m, s) in posterior_summary(chain).items():
        print(f"{name:>6} {m:12.4g} {s:12.4g}")
    return 0


def cmd_abc(args) -> int:
    seed = _need_seed(args)
    times, y = read_observations(args.input)
    model = RickerModel(T=len(y))
    s_obs = ricker_stats(np.asarray(y, float)[None, :])[0]
    rng = as_rng(seed)
    if args.scaling == "identity":
        a = np.eye(len(s_obs))
    else:
        theta = _parse_params("ricker", args.params).to_array()
        stats = ricker_stats(model.simulate(np.tile(theta, (args.n_cov, 1)), rng))
        _, sigma = sample_mean_cov(stats[np.all(np.isfinite(stats), axis=1)])
        from scipy.linalg import cho_solve
        factor, _ = cholesky_jittered(sigma)
        a = cho_solve(factor, np.eye(len(s_obs)))
        a = 0.5 * (a + a.T)
    prior = ricker_prior()
    res = smc_abc(prior, model.simulate, ricker_stats, s_obs, args.n_pop, a, args.stop, rng)
    res.names = prior.names
    out = _out_dir(args)
    write_text(out / "populations.csv", res.to_csv())
    write_json(out / "summary.json", {"tolerances": res.tolerances, "truncated": res.truncated,
                                      "sims": [p.n_sims for p in res.populations]})
    return 0


def _run_config(cfg: dict, args) -> int:
    config = ExperimentConfig.from_dict(cfg, seed=args.seed, threads=args.threads if args.threads > 1 else None)
    manifest = run_experiment(config, _out_dir(args))
    print(f"{config.experiment}: {manifest['status']}; outputs in {args.out or '.'}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    if args.tag:
        cfg = {**cfg, "experiment": args.tag}
    if args.preset:
        cfg = {**cfg, "preset": args.preset}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        settings = dict(cfg.get("settings", {}))
        settings[key] = json.loads(val)
        cfg = {**cfg, "settings": settings}
    if "experiment" not in cfg and "config" not in cfg:
        raise CliError(f"choose an experiment with --config or --tag ({', '.join(PRESETS)})")
    if args.seed is None and "seed" not in cfg.get("config", cfg):
        raise CliError("experiment is stochastic: --seed is required")
    return _run_config(cfg, args)


def cmd_diagnose(args) -> int:
    seed = _need_seed(args)
    out = _out_dir(args)
    if args.what == "normality":
        times, y = read_observations(args.input)
        model = _model(args.model, times)
        fn, names = _summarizer(args.model)
        theta = _parse_params(args.model, args.params).to_array()
        stats = fn(model.simulate(np.tile(theta, (args.sims, 1)), as_rng(seed)))
        rep = krzanowski_report(stats, SummaryVector(fn(np.asarray(y, float)[None, :])[0], names))
        write_text(out / "qq.csv", rep.qq_csv(log_scale=args.log))
        write_text(out / "qq_marginal.csv", rep.marginal_csv())
        write_json(out / "summary.json", {"obs_mahalanobis": rep.obs_mahalanobis, "qq_slope": rep.qq_slope})
        return 0
    if args.chain:
        chain = Chain.from_csv(Path(args.chain).read_text(encoding="utf-8"))
        lam = lyapunov_posterior(chain, args.draws, args.transient, args.horizon, seed, args.threads)
    else:
        lam = np.array([vole_lyapunov(_parse_params("vole", args.params), args.transient, args.horizon,
                                      seed).lambda_max])
    lines = ["draw,lyapunov"] + [f"{i},{float(v)!r}" for i, v in enumerate(lam)]
    write_text(out / "lyapunov.csv", "\n".join(lines) + "\n")
    print(f"median lyapunov exponent (per year): {float(np.nanmedian(lam)):.6g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, help="root seed (required for stochastic commands)")
    common.add_argument("--config", help="JSON config or run manifest")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=_positive, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dynsbi", description="Simulation-based inference for dynamic models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="simulate a trajectory")
    s.add_argument("--model", choices=MODELS, default="vole")
    s.add_argument("--params", help="name=value overrides, comma separated")
    s.add_argument("--T", type=_positive, default=50, help="length for ricker and lgssm")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("summarize", parents=[common], help="summary statistics of an observed series")
    s.add_argument("--model", choices=("vole", "ricker"), default="vole")
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("sl-eval", parents=[common], help="synthetic log-likelihood at one parameter")
    s.add_argument("--model", choices=("vole", "ricker"), default="vole")
    s.add_argument("--input", required=True)
    s.add_argument("--params")
    s.add_argument("--m", type=_positive, default=500, help="simulations")
    s.add_argument("--shrinkage", type=float, default=0.0)
    s.set_defaults(func=cmd_sl_eval)

    s = sub.add_parser("pf-eval", parents=[common], help="particle-filter log-likelihood at one parameter")
    s.add_argument("--model", choices=MODELS, default="vole")
    s.add_argument("--input", required=True)
    s.add_argument("--params")
    s.add_argument("--m", type=_positive, default=500, help="total particles")
    s.add_argument("--replicates", type=_positive, default=1)
    s.set_defaults(func=cmd_pf_eval)

    s = sub.add_parser("mcmc", parents=[common], help="SLMH or PMMH for the vole model")
    s.add_argument("--method", choices=("slmh", "pmmh"), default="slmh")
    s.add_argument("--input")
    s.add_argument("--iterations", type=_positive, default=3000)
    s.add_argument("--burn-in", type=int, default=1000)
    s.add_argument("--budget", type=_positive, default=500)
    s.add_argument("--replicates", type=_positive, default=1)
    s.add_argument("--step", type=float, default=0.05)
    s.set_defaults(func=cmd_mcmc)

    s = sub.add_parser("abc", parents=[common], help="SMC-ABC for the Ricker model")
    s.add_argument("--input", required=True)
    s.add_argument("--n-pop", type=_positive, default=200)
    s.add_argument("--stop", type=float, default=0.01, help="stop when a round's acceptance ratio is below this")
    s.add_argument("--scaling", choices=("inverse-cov", "identity"), default="inverse-cov")
    s.add_argument("--params", help="parameters at which the scaling covariance is estimated")
    s.add_argument("--n-cov", type=_positive, default=10_000)
    s.set_defaults(func=cmd_abc)

    s = sub.add_parser("experiment", parents=[common], help="run a tagged end-to-end experiment")
    s.add_argument("--tag", choices=sorted(PRESETS))
    s.add_argument("--preset", choices=("desk", "full"))
    s.add_argument("--set", action="append", metavar="KEY=JSON", help="override one setting")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("diagnose", parents=[common], help="normality q-q data or Lyapunov exponents")
    s.add_argument("what", choices=("normality", "lyapunov"))
    s.add_argument("--model", choices=("vole", "ricker"), default="vole")
    s.add_argument("--input")
    s.add_argument("--params")
    s.add_argument("--sims", type=_positive, default=2000)
    s.add_argument("--log", action="store_true", help="log-scale q-q output")
    s.add_argument("--chain", help="chain CSV to draw parameters from")
    s.add_argument("--draws", type=_positive, default=50)
    s.add_argument("--transient", type=int, default=12_000, help="months")
    s.add_argument("--horizon", type=_positive, default=2400, help="months")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "diagnose" and args.what == "normality" and not args.input:
        parser.error("diagnose normality needs --input")
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        print(f"dynsbi {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, nonzero exit
        log.debug("failure", exc_info=True)
        print(f"dynsbi {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
