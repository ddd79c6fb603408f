"""
Experiment Catalog and Runner

The four damping figures (three variants each, all under the same OU hidden
process with rate 2), the reproducible ExperimentConfig, and the routine that
runs a figure on a shared hidden-path replay and writes its artifacts.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .analysis import (
    EXPONENTIAL, GAUSSIAN, INTERMEDIATE, POLYNOMIAL, LogHistogram, fit_tail, gaussian_reference,
    sample_summary,
)
from .errors import ConfigError, IntegrationError
from .integrate import (
    MomentAccumulator, SampleBuffer, SimConfig, TrajectoryExcerpt, record_hidden_path, simulate_stream,
)
from .model import (
    OU, STATIONARY, Affine, Constant, DampingSpec, Hinge, Model, Power, ScalarModel, damping_profile,
    model_from_dict,
)
from .theory.classify import classify
from .utils import ensure_output_dir, write_frame, write_json

logger = logging.getLogger(__name__)

FIGURE_GAMMA = 2.0
FIGURE_DT = 0.01
SCALES = {"desk": 1e5, "full": 1e6}
# Samples kept at full scale; the hidden path itself is never thinned.
SCALE_THINNING = {"desk": 1, "full": 10}
EXCERPT_WINDOW = (9000.0, 10000.0)
DENSITY_BINS = 200
DEFAULT_P_GRID = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)


@dataclass(frozen=True)
class Variant:
    slug: str
    label: str
    damping: DampingSpec
    gaussian_reference: bool = True


@dataclass(frozen=True)
class Figure:
    number: int
    title: str
    expected_class: str
    variants: Tuple[Variant, ...]


FIGURES: Dict[int, Figure] = {
    1: Figure(1, "unstable dampings lead to polynomial tails", POLYNOMIAL, (
        # the matched Gaussian is meaningless when the variance is infinite
        Variant("b_1_3u", "b(u) = 1 + 3u", Affine(1.0, 3.0, 0.0), gaussian_reference=False),
        Variant("b_1_2u", "b(u) = 1 + 2u", Affine(1.0, 2.0, 0.0)),
        Variant("b_1_u", "b(u) = 1 + u", Affine(1.0, 1.0, 0.0)),
    )),
    2: Figure(2, "dampings vanishing on an interval lead to exponential tails", EXPONENTIAL, (
        Variant("hinge_1_1_2", "hinge s=1, k=1, A=2", Hinge(1.0, 1.0, 2.0)),
        Variant("hinge_1_1_1", "hinge s=1, k=1, A=1", Hinge(1.0, 1.0, 1.0)),
        Variant("hinge_1_05_1", "hinge s=1, k=0.5, A=1", Hinge(1.0, 0.5, 1.0)),
    )),
    3: Figure(3, "dampings vanishing at a point give intermediate tails", INTERMEDIATE, (
        Variant("power_4_0", "power c=4, d=0", Power(4.0, 0.0)),
        Variant("power_2_0", "power c=2, d=0", Power(2.0, 0.0)),
        Variant("power_1_0", "power c=1, d=0", Power(1.0, 0.0)),
    )),
    4: Figure(4, "dampings bounded away from zero give Gaussian tails", GAUSSIAN, (
        Variant("power_4_1", "power c=4, d=1", Power(4.0, 1.0)),
        Variant("power_2_1", "power c=2, d=1", Power(2.0, 1.0)),
        Variant("constant_1", "b(u) = 1", Constant(1.0)),
    )),
}


def figure_model(damping: DampingSpec) -> ScalarModel:
    return ScalarModel(damping, OU(FIGURE_GAMMA), sigma_x=1.0, x0=0.0, u0=STATIONARY)


def classes_agree(predicted: str, measured: str) -> bool:
    """Intermediate predictions accept any light-tailed report."""
    if predicted == INTERMEDIATE:
        return measured in (EXPONENTIAL, GAUSSIAN, INTERMEDIATE)
    return predicted == measured


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun one command bit-for-bit."""

    model: Model
    sim: SimConfig
    tail_quantile: float = 0.99
    p_grid: Tuple[float, ...] = DEFAULT_P_GRID
    out_dir: str = "runs"
    seed: int = 0
    extra: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.tail_quantile < 1.0:
            raise ConfigError("must lie in (0, 1)", field="tail_quantile")
        object.__setattr__(self, "p_grid", tuple(float(p) for p in self.p_grid))

    def to_dict(self) -> Dict:
        return {
            "model": self.model.to_dict(),
            "sim": self.sim.to_dict(),
            "tail_quantile": self.tail_quantile,
            "p_grid": list(self.p_grid),
            "out_dir": str(self.out_dir),
            "seed": self.seed,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentConfig":
        return cls(model_from_dict(data["model"]), SimConfig.from_dict(data["sim"]),
                   float(data.get("tail_quantile", 0.99)), tuple(data.get("p_grid", DEFAULT_P_GRID)),
                   data.get("out_dir", "runs"), int(data.get("seed", 0)), dict(data.get("extra", {})))


@dataclass
class VariantResult:
    variant: Variant
    prediction: Dict
    tail_report: Optional[Dict]
    summary: Dict
    artifacts: List[str]

    @property
    def agrees(self) -> bool:
        if self.tail_report is None:
            return False
        return classes_agree(self.prediction["class"], self.tail_report["class"])


def run_variant(variant: Variant, sim: SimConfig, replay, out_dir: Path, tail_quantile: float,
                p_grid: Sequence[float]) -> VariantResult:
    """Simulate one damping on the shared hidden path and write its artifacts."""
    model = figure_model(variant.damping)
    buffer = SampleBuffer(source="x")
    excerpt = TrajectoryExcerpt(*EXCERPT_WINDOW)
    moments = MomentAccumulator(p_grid)
    logger.info("variant %s: %d steps", variant.slug, sim.n_steps)
    try:
        run = simulate_stream(model, sim, sinks=(buffer, excerpt, moments), replay=replay)
    except IntegrationError as exc:
        logger.error("variant %s failed: %s", variant.slug, exc)
        raise

    samples = buffer.values()
    summary = sample_summary(samples)
    hist = LogHistogram.from_samples(samples, n_bins=DENSITY_BINS)
    artifacts = []
    write_frame(out_dir / f"{variant.slug}_excerpt.csv", excerpt.to_frame())
    artifacts.append(f"{variant.slug}_excerpt.csv")
    write_frame(out_dir / f"{variant.slug}_log_density.csv", hist.to_frame())
    artifacts.append(f"{variant.slug}_log_density.csv")
    if variant.gaussian_reference:
        reference = gaussian_reference(hist, summary["mean"], summary["variance"])
        write_frame(out_dir / f"{variant.slug}_gaussian_reference.csv", reference)
        artifacts.append(f"{variant.slug}_gaussian_reference.csv")

    prediction = classify(damping_profile(variant.damping, model.drift), sigma_x=model.sigma_x).to_dict()
    report = fit_tail(samples, tail_quantile).to_dict()
    result = VariantResult(variant, prediction, report, summary, artifacts)
    write_json(out_dir / f"{variant.slug}_report.json", {
        "variant": variant.slug,
        "label": variant.label,
        "damping": variant.damping.to_dict(),
        "prediction": prediction,
        "tail_report": report,
        "agrees": result.agrees,
        "summary": summary,
        "moments": moments.to_dict(),
        "run": run.to_dict(),
    })
    result.artifacts.append(f"{variant.slug}_report.json")
    return result


def figure_sim_config(scale: str, seed: int, t_final: Optional[float] = None) -> SimConfig:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}", field="--scale")
    horizon = SCALES[scale] if t_final is None else t_final
    return SimConfig.from_horizon(horizon, dt=FIGURE_DT, seed=seed, thinning=SCALE_THINNING[scale])


def run_figure(figure_id: int, out_dir, scale: str = "desk", seed: int = 0,
               tail_quantile: float = 0.99, p_grid: Sequence[float] = DEFAULT_P_GRID,
               t_final: Optional[float] = None, workers: int = 1) -> List[VariantResult]:
    """Run the three variants of a figure on one recorded hidden path."""
    if figure_id not in FIGURES:
        raise ConfigError(f"unknown figure {figure_id}; expected one of {sorted(FIGURES)}", field="--figure")
    figure = FIGURES[figure_id]
    out_dir = ensure_output_dir(out_dir)
    sim = figure_sim_config(scale, seed, t_final)
    drift = OU(FIGURE_GAMMA)
    replay = record_hidden_path(drift, sim, STATIONARY)
    logger.info("figure %d (%s): hidden path recorded, %d steps", figure_id, figure.title, sim.n_steps)

    def job(variant: Variant) -> VariantResult:
        return run_variant(variant, sim, replay, out_dir, tail_quantile, p_grid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(figure.variants))) as pool:
            results = list(pool.map(job, figure.variants))
    else:
        results = [job(v) for v in figure.variants]

    table = pd.DataFrame([{
        "variant": r.variant.slug,
        "predicted": r.prediction["class"],
        "measured": r.tail_report["class"] if r.tail_report else None,
        "agrees": r.agrees,
        "variance": r.summary["variance"],
        "excess_kurtosis": r.summary["excess_kurtosis"],
    } for r in results])
    write_frame(out_dir / "figure_summary.csv", table)
    return results


def compare_dampings(damping_a: DampingSpec, damping_b: DampingSpec, sim: SimConfig,
                     p_grid: Sequence[float] = (1.0, 2.0, 3.0)) -> pd.DataFrame:
    """log E|X|^{2p} for two dampings driven by the same hidden path and noise.

    With b_a >= b_b pointwise the first column should not exceed the second.
    """
    drift = OU(FIGURE_GAMMA)
    replay = record_hidden_path(drift, sim, STATIONARY)
    curves = []
    for damping in (damping_a, damping_b):
        acc = MomentAccumulator(p_grid)
        simulate_stream(figure_model(damping), sim, sinks=(acc,), replay=replay)
        curves.append(acc.log_moments())
    return pd.DataFrame({"p": np.asarray(sorted(p_grid), dtype=float),
                         "log_moment_a": curves[0], "log_moment_b": curves[1]})
