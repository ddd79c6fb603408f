#!/usr/bin/env python3
"""
Command-line front end for damping-lab.

Every subcommand writes into its own output directory: the CSV/JSON
artifacts, config.json and a manifest.json with seed, version and config
hash. Exit codes: 0 success, 1 configuration or input error, 2 model not
classifiable, 3 numerical failure during integration.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .analysis import (
    LogHistogram, fit_tail, hill_index, ldp_empirical, moment_scaling_exponent, sample_summary,
    weak_damping_probe,
)
from .errors import AnalysisError, ConfigError, DampingLabError, InsufficientTailError, IntegrationError
from .experiments import FIGURES, ExperimentConfig, figure_sim_config, run_figure
from .integrate import (
    MomentAccumulator, SampleBuffer, SampleSpill, SimConfig, ensemble_expectation, simulate_stream,
)
from .model import MatrixModel, ScalarModel, damping_profile, default_box, describe, surrogate_profiles
from .theory.certificates import check_Am
from .theory.classify import NOT_CLASSIFIABLE, classify, classify_matrix, intermediate_level
from .theory.feynman_kac import theta_feynman_kac, theta_residual
from .utils import (
    analysis_options_from_flat, default_workers, ensure_output_dir, load_environment, model_from_flat,
    parse_float_list, read_flat_config, setup_logging, sim_config_from_flat, write_frame, write_json,
    write_manifest,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NOT_CLASSIFIABLE = 2
EXIT_NUMERICAL = 3

MC_BUDGET = 20000
HILL_FRACTION = 0.001
SURROGATE_POINTS = 401


class CommandResult:
    """Artifacts written by one subcommand, plus the config that produced them."""

    def __init__(self, out_dir: Path, config: Dict, seed: int):
        self.out_dir = out_dir
        self.config = config
        self.seed = seed
        self.artifacts: List[str] = []
        self.exit_code = EXIT_OK

    def frame(self, name: str, frame: pd.DataFrame) -> None:
        write_frame(self.out_dir / name, frame)
        self.artifacts.append(name)

    def json(self, name: str, obj) -> None:
        write_json(self.out_dir / name, obj)
        self.artifacts.append(name)


def _out_dir(args, command: str) -> Path:
    return ensure_output_dir(args.out if args.out else Path("runs") / command)


def _start(args, command: str, config: Dict, seed: int) -> CommandResult:
    return CommandResult(_out_dir(args, command), config, seed)


def _finish(result: CommandResult, command: str) -> int:
    write_manifest(result.out_dir, command, result.seed, result.config, result.artifacts, __version__)
    print(f"✅ {command}: wrote {len(result.artifacts) + 2} files to {result.out_dir}")
    return result.exit_code


def _floats(raw: Optional[str], flag: str, default: List[float]) -> List[float]:
    return default if raw is None else parse_float_list(raw, flag)


def _load(args):
    if not args.config:
        raise ConfigError("a config file is required", field="--config")
    values = read_flat_config(args.config)
    return values, model_from_flat(values)


def _seed(args, values: Dict[str, str]) -> int:
    if args.seed is not None:
        return args.seed
    try:
        return int(values.get("sim.seed", 0))
    except ValueError:
        raise ConfigError("expected an integer", field="sim.seed")


def _scalar(model, command: str) -> ScalarModel:
    if not isinstance(model, ScalarModel):
        raise ConfigError(f"{command} needs a scalar damping model", field="--config")
    return model


def _experiment(args, values, model, seed: int, t_final: Optional[float] = None) -> ExperimentConfig:
    quantile, p_grid = analysis_options_from_flat(values)
    if getattr(args, "tail_quantile", None) is not None:
        quantile = args.tail_quantile
    if getattr(args, "p_grid", None) is not None:
        p_grid = parse_float_list(args.p_grid, "--p-grid")
    sim = sim_config_from_flat(values, t_final=t_final, seed=seed)
    return ExperimentConfig(model, sim, quantile, tuple(p_grid), str(_out_dir(args, args.command)), seed)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_reproduce(args) -> int:
    figure = FIGURES[args.figure]
    p_grid = _floats(args.p_grid, "--p-grid", [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    seed = args.seed if args.seed is not None else 0
    sim = figure_sim_config(args.scale, seed, args.t_final)
    config = {
        "figure": figure.number,
        "title": figure.title,
        "scale": args.scale,
        "sim": sim.to_dict(),
        "tail_quantile": args.tail_quantile,
        "p_grid": p_grid,
        "variants": {v.slug: v.damping.to_dict() for v in figure.variants},
    }
    result = _start(args, "reproduce", config, seed)
    results = run_figure(figure.number, result.out_dir, args.scale, seed, args.tail_quantile, p_grid,
                         args.t_final, args.workers)
    for r in results:
        result.artifacts.extend(r.artifacts)
        mark = "✅" if r.agrees else "❌"
        print(f"{mark} {r.variant.label}: predicted {r.prediction['class']}, "
              f"measured {r.tail_report['class']}")
    result.artifacts.append("figure_summary.csv")
    return _finish(result, "reproduce")


def cmd_classify(args) -> int:
    values, model = _load(args)
    seed = _seed(args, values)
    t_final = args.t_final
    if t_final is None and "sim.t_final" in values:
        t_final = float(values["sim.t_final"])
    experiment = _experiment(args, values, model, seed, t_final)
    result = _start(args, "classify", experiment.to_dict(), seed)

    if isinstance(model, MatrixModel):
        prediction = classify_matrix(model)
        payload = {"prediction": prediction.to_dict()}
    else:
        profile = damping_profile(model.damping, model.drift, mc_budget=MC_BUDGET, seed=seed)
        prediction = classify(profile, sigma_x=model.sigma_x)
        payload = {"prediction": prediction.to_dict(), "profile": profile.to_dict()}

    if t_final is not None and prediction.classifiable:
        buffer = SampleBuffer()
        simulate_stream(model, experiment.sim, sinks=(buffer,))
        payload["tail_report"] = fit_tail(buffer.values(), experiment.tail_quantile).to_dict()
    result.json("classification.json", payload)

    for line in describe(model):
        logger.info(line)
    if not prediction.classifiable:
        for note in prediction.notes:
            print(f"❌ {note}")
        print(f"❌ {NOT_CLASSIFIABLE}")
        result.exit_code = EXIT_NOT_CLASSIFIABLE
    else:
        print(f"✅ predicted class: {prediction.tail_class}")
        if "tail_report" in payload:
            print(f"✅ measured class: {payload['tail_report']['class']}")
    return _finish(result, "classify")


def cmd_ldp(args) -> int:
    values, model = _load(args)
    model = _scalar(model, "ldp")
    seed = _seed(args, values)
    t_grid = _floats(args.t_grid, "--t-grid", [5.0, 10.0, 20.0])
    c_grid = _floats(args.c_grid, "--c-grid", [0.5, 1.0])
    config = {"model": model.to_dict(), "t_grid": t_grid, "c_grid": c_grid, "n_traj": args.n_traj,
              "delta": args.delta, "dt": args.dt, "seed": seed}
    result = _start(args, "ldp", config, seed)
    report = ldp_empirical(model.drift, model.damping, t_grid, c_grid, args.n_traj, delta=args.delta,
                           dt=args.dt, seed=seed, workers=args.workers, mc_budget=MC_BUDGET)
    result.frame("ldp.csv", report.to_frame())
    result.json("ldp_report.json", report.to_dict())
    violations = report.violations()
    mark = "✅" if not violations else "❌"
    print(f"{mark} D_M = {report.D_M:.6g}, {len(violations)} cells above the bound")
    return _finish(result, "ldp")


def cmd_theta(args) -> int:
    values, model = _load(args)
    model = _scalar(model, "theta")
    seed = _seed(args, values)
    u_grid = _floats(args.u_grid, "--u-grid", [-1.0, -0.5, 0.0, 0.5, 1.0])
    config = {"model": model.to_dict(), "u_grid": u_grid, "n_samples": args.n_traj,
              "horizon": args.horizon, "dt": args.dt, "seed": seed}
    result = _start(args, "theta", config, seed)
    estimate = theta_feynman_kac(model.damping, model.drift, np.asarray(u_grid), horizon=args.horizon,
                                 n_samples=args.n_traj, seed=seed, dt=args.dt, workers=args.workers)
    result.frame("theta.csv", estimate.to_frame())
    result.json("theta.json", estimate.to_dict())
    if model.d_u == 1 and len(u_grid) >= 3:
        result.frame("theta_residual.csv", theta_residual(estimate, model.damping, model.drift))
    mark = "✅" if estimate.lipschitz_consistent else "❌"
    print(f"{mark} Lipschitz estimate {estimate.lipschitz_estimate:.4g} "
          f"(bound {estimate.lipschitz_bound:.4g})")
    return _finish(result, "theta")


def cmd_am_check(args) -> int:
    values, model = _load(args)
    model = _scalar(model, "am-check")
    seed = _seed(args, values)
    profile = damping_profile(model.damping, model.drift, mc_budget=MC_BUDGET, seed=seed)
    m = args.m if args.m is not None else intermediate_level(profile.growth_exponent)
    config = {"model": model.to_dict(), "m": m, "seed": seed, "probe": args.probe}
    if args.probe:
        config.update({"t_final": args.t_final or 10.0, "n_traj": args.n_traj,
                       "p_grid": _floats(args.p_grid, "--p-grid", [1.0, 2.0, 4.0, 8.0, 16.0])})
    result = _start(args, "am-check", config, seed)
    certificate = check_Am(model.damping, model.drift, m, mc_budget=MC_BUDGET, seed=seed)
    result.json("am_certificate.json", certificate.to_dict())
    if certificate.member:
        print(f"✅ member at level m = {m}")
    else:
        print(f"❌ non-member at level m = {m}: conditions {', '.join(certificate.failed)} fail")
    if args.probe:
        probe = weak_damping_probe(model.drift, model.damping, config["p_grid"], config["t_final"],
                                   args.n_traj, certificate if certificate.member else None,
                                   seed=seed, workers=args.workers)
        result.frame("weak_damping.csv", probe.to_frame())
        result.json("weak_damping.json", probe.to_dict())
    return _finish(result, "am-check")


def cmd_surrogate(args) -> int:
    values, model = _load(args)
    if not isinstance(model, MatrixModel):
        raise ConfigError("surrogate needs a matrix model with term.<i> blocks", field="--config")
    seed = _seed(args, values)
    result = _start(args, "surrogate", {"model": model.to_dict(), "points": SURROGATE_POINTS}, seed)
    lo, hi = default_box(model.drift).interval(0)
    grid = np.linspace(lo, hi, SURROGATE_POINTS)
    b_bar, b_under = surrogate_profiles(model, grid[:, None])
    result.frame("surrogate.csv", pd.DataFrame({"u": grid, "b_bar": b_bar, "b_under": b_under}))
    prediction = classify_matrix(model)
    result.json("surrogate_classification.json", prediction.to_dict())
    if prediction.classifiable:
        print(f"✅ surrogate class range {prediction.class_range}, reported {prediction.tail_class}")
    else:
        print(f"❌ {NOT_CLASSIFIABLE}")
        result.exit_code = EXIT_NOT_CLASSIFIABLE
    return _finish(result, "surrogate")


def cmd_simulate(args) -> int:
    values, model = _load(args)
    seed = _seed(args, values)
    experiment = _experiment(args, values, model, seed, args.t_final)
    result = _start(args, "simulate", experiment.to_dict(), seed)
    buffer = SampleBuffer()
    moments = MomentAccumulator(experiment.p_grid)
    sinks = [buffer, moments]
    spill = None
    if args.spill:
        spill = SampleSpill(result.out_dir / "samples.bin", experiment.sim.dt, experiment.sim.thinning, seed)
        sinks.append(spill)
    try:
        run = simulate_stream(model, experiment.sim, sinks=sinks)
    finally:
        if spill is not None:
            spill.close()
    if spill is not None:
        result.artifacts.append("samples.bin")

    samples = buffer.values()
    payload = {"run": run.to_dict(), "summary": sample_summary(samples), "moments": moments.to_dict()}
    result.frame("log_density.csv", LogHistogram.from_samples(samples, n_bins=200).to_frame())
    try:
        payload["tail_report"] = fit_tail(samples, experiment.tail_quantile).to_dict()
        print(f"✅ measured class: {payload['tail_report']['class']}")
    except InsufficientTailError as exc:
        payload["tail_report"] = None
        print(f"❌ no tail fit: {exc}")
    try:
        payload["hill"] = hill_index(samples, max(10, int(HILL_FRACTION * samples.size))).to_dict()
    except (InsufficientTailError, AnalysisError) as exc:
        payload["hill"] = None
        logger.warning("no Hill estimate: %s", exc)
    result.json("simulation.json", payload)
    return _finish(result, "simulate")


def cmd_moments(args) -> int:
    values, model = _load(args)
    seed = _seed(args, values)
    p_grid = _floats(args.p_grid, "--p-grid", [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    t_final = args.t_final if args.t_final is not None else 20.0
    sim = SimConfig.from_horizon(t_final, dt=args.dt, seed=seed)
    config = {"model": model.to_dict(), "sim": sim.to_dict(), "p_grid": p_grid, "n_traj": args.n_traj,
              "estimator": args.estimator}
    result = _start(args, "moments", config, seed)
    curve = ensemble_expectation(model, sim, p_grid, t_final, args.n_traj, workers=args.workers,
                                 estimator=args.estimator)
    result.frame("moments.csv", curve.to_frame())
    payload = {"curve": curve.to_dict()}
    try:
        fit = moment_scaling_exponent(curve)
        payload["scaling"] = fit.to_dict()
        print(f"✅ scaling exponent {fit.slope:.3f} [{fit.ci_low:.3f}, {fit.ci_high:.3f}]")
    except AnalysisError as exc:
        payload["scaling"] = None
        print(f"❌ no scaling fit: {exc}")
    result.json("moments.json", payload)
    return _finish(result, "moments")


COMMANDS = {
    "reproduce": cmd_reproduce,
    "classify": cmd_classify,
    "ldp": cmd_ldp,
    "theta": cmd_theta,
    "am-check": cmd_am_check,
    "surrogate": cmd_surrogate,
    "simulate": cmd_simulate,
    "moments": cmd_moments,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Flat key=value model config file')
    common.add_argument('--seed', type=int, help='Master seed (default: sim.seed or 0)')
    common.add_argument('--out', help='Output directory (default: runs/<command>)')
    common.add_argument('--workers', type=int, default=None,
                        help='Worker threads for ensembles (default: DAMPING_LAB_WORKERS or 1)')
    common.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')

    parser = argparse.ArgumentParser(prog='damping-lab',
                                     description='Simulate and classify stochastically damped SDEs')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('reproduce', parents=[common], help='Rerun one of the four damping figures')
    p.add_argument('--figure', type=int, required=True, choices=sorted(FIGURES))
    p.add_argument('--scale', choices=['desk', 'full'], default='desk')
    p.add_argument('--tail-quantile', type=float, default=0.99)
    p.add_argument('--p-grid')
    p.add_argument('--t-final', type=float, help='Override the horizon of the chosen scale')

    p = sub.add_parser('classify', parents=[common], help='Predict (and optionally measure) the tail class')
    p.add_argument('--t-final', type=float, help='Also simulate to this horizon and fit the tail')
    p.add_argument('--tail-quantile', type=float)
    p.add_argument('--p-grid')

    p = sub.add_parser('ldp', parents=[common], help='Large deviations of the time-averaged damping')
    p.add_argument('--t-grid')
    p.add_argument('--c-grid')
    p.add_argument('--n-traj', type=int, default=10000)
    p.add_argument('--delta', type=float, default=0.05)
    p.add_argument('--dt', type=float, default=0.01)

    p = sub.add_parser('theta', parents=[common], help='Feynman-Kac potential on a u-grid')
    p.add_argument('--u-grid')
    p.add_argument('--n-traj', type=int, default=4000, help='Coupled sample pairs')
    p.add_argument('--horizon', type=float)
    p.add_argument('--dt', type=float, default=0.01)

    p = sub.add_parser('am-check', parents=[common], help='Membership certificate for weak dampings')
    p.add_argument('--m', type=int)
    p.add_argument('--probe', action='store_true', help='Also run the weak-damping ensemble probe')
    p.add_argument('--t-final', type=float)
    p.add_argument('--n-traj', type=int, default=2000)
    p.add_argument('--p-grid')

    sub.add_parser('surrogate', parents=[common], help='Scalar surrogate dampings of a matrix model')

    p = sub.add_parser('simulate', parents=[common], help='One long trajectory with tail statistics')
    p.add_argument('--t-final', type=float)
    p.add_argument('--tail-quantile', type=float)
    p.add_argument('--p-grid')
    p.add_argument('--spill', action='store_true', help='Also write |x| samples to samples.bin')

    p = sub.add_parser('moments', parents=[common], help='Ensemble moment curve and scaling exponent')
    p.add_argument('--t-final', type=float)
    p.add_argument('--n-traj', type=int, default=10000)
    p.add_argument('--p-grid')
    p.add_argument('--dt', type=float, default=0.01)
    p.add_argument('--estimator', choices=['direct', 'conditional'], default='direct')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level)
        if args.workers is None:
            args.workers = default_workers()
        return COMMANDS[args.command](args)
    except IntegrationError as exc:
        print(f"❌ numerical failure: {exc}")
        return EXIT_NUMERICAL
    except DampingLabError as exc:
        print(f"❌ {exc}")
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
