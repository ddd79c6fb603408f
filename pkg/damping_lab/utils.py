"""
Utility functions for damping-lab.

Logging setup, environment and flat key-value configuration loading, and the
helpers that make every output directory self-describing (canonical JSON,
config hashes, manifests, CSV writing).
"""

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError, ModelSpecError
from .integrate import SimConfig
from .model import (
    OU, STATIONARY, Affine, Constant, DampingSpec, DampingTerm, Dissipation,
    GradientForm, Hinge, MatrixModel, Model, Power, ScalarModel, Tabulated,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
ENV_LOG_LEVEL = "DAMPING_LAB_LOG_LEVEL"
ENV_WORKERS = "DAMPING_LAB_WORKERS"


def load_environment() -> None:
    """Pick up DAMPING_LAB_* overrides from a local .env file, if present."""
    load_dotenv()


def setup_logging(level: Optional[str] = None) -> None:
    level = (level or os.getenv(ENV_LOG_LEVEL) or "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"unknown log level {level!r}", field="--log-level")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def default_workers() -> int:
    raw = os.getenv(ENV_WORKERS)
    if not raw:
        return 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", field=ENV_WORKERS)
    if workers < 1:
        raise ConfigError("must be >= 1", field=ENV_WORKERS)
    return workers


# ---------------------------------------------------------------------------
# Flat key-value configuration
# ---------------------------------------------------------------------------

def read_flat_config(path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", field="--config")
    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError("key has no value", field=missing[0])
    return dict(values)


def _get(values: Dict[str, str], key: str, default=None, required: bool = False) -> Optional[str]:
    if key in values and values[key] != "":
        return values[key]
    if required:
        raise ConfigError("required key is missing", field=key)
    return default


def _float(values: Dict[str, str], key: str, default: Optional[float] = None,
           required: bool = False) -> Optional[float]:
    raw = _get(values, key, required=required)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}", field=key)


def _int(values: Dict[str, str], key: str, default: Optional[int] = None) -> Optional[int]:
    raw = _get(values, key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", field=key)


def _floats(values: Dict[str, str], key: str, default: Optional[List[float]] = None,
            required: bool = False) -> Optional[List[float]]:
    raw = _get(values, key, required=required)
    if raw is None:
        return default
    try:
        return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {raw!r}", field=key)


def parse_float_list(raw: str, field: str) -> List[float]:
    return _floats({field: raw}, field, required=True)


def _square(flat: List[float], key: str) -> Tuple[Tuple[float, ...], ...]:
    n = int(round(math.sqrt(len(flat))))
    if n * n != len(flat):
        raise ConfigError(f"expected n*n row-major entries, got {len(flat)}", field=key)
    return tuple(tuple(flat[i * n:(i + 1) * n]) for i in range(n))


def _damping_from_flat(values: Dict[str, str], prefix: str) -> DampingSpec:
    kind = _get(values, f"{prefix}.kind", required=True)
    coordinate = _int(values, f"{prefix}.coordinate", 0)
    try:
        if kind == "affine":
            return Affine(_float(values, f"{prefix}.a", 0.0), _float(values, f"{prefix}.c", required=True),
                          _float(values, f"{prefix}.m_u", 0.0), coordinate=coordinate)
        if kind == "hinge":
            return Hinge(_float(values, f"{prefix}.s", 0.0), _float(values, f"{prefix}.k", 0.0),
                         _float(values, f"{prefix}.A", 1.0), coordinate=coordinate)
        if kind == "power":
            return Power(_float(values, f"{prefix}.c", required=True), _float(values, f"{prefix}.d", 0.0),
                         coordinate=coordinate)
        if kind == "constant":
            return Constant(_float(values, f"{prefix}.value", required=True), coordinate=coordinate)
        if kind == "tabulated":
            return Tabulated(tuple(_floats(values, f"{prefix}.grid", required=True)),
                             tuple(_floats(values, f"{prefix}.values", required=True)),
                             coordinate=coordinate)
    except ModelSpecError as exc:
        raise ConfigError(str(exc), field=f"{prefix}.kind") from exc
    raise ConfigError(f"unknown damping kind {kind!r}", field=f"{prefix}.kind")


def _drift_from_flat(values: Dict[str, str]):
    kind = _get(values, "drift.kind", "ou")
    d_u = _int(values, "dims.u", 1)
    dissipation = None
    if _get(values, "drift.lambda") is not None:
        center = _floats(values, "drift.center", [0.0] * d_u)
        dissipation = Dissipation(_float(values, "drift.lambda"), _float(values, "drift.M_lambda", 0.0),
                                  tuple(center))
    try:
        if kind == "ou":
            matrix = _floats(values, "drift.matrix")
            rate = _square(matrix, "drift.matrix") if matrix else _float(values, "drift.gamma", 2.0)
            center = _floats(values, "drift.center")
            return OU(rate, tuple(center) if center else None, dissipation=dissipation)
        if kind == "gradient":
            return GradientForm(_get(values, "drift.potential", "quartic"), d_u, dissipation=dissipation)
    except ModelSpecError as exc:
        raise ConfigError(str(exc), field="drift.kind") from exc
    raise ConfigError(f"unknown drift kind {kind!r}", field="drift.kind")


def _initial(values: Dict[str, str], key: str, default):
    raw = _get(values, key)
    if raw is None:
        return default
    if raw.strip() == STATIONARY:
        return STATIONARY
    return tuple(_floats(values, key))


def _term_indices(values: Dict[str, str]) -> List[int]:
    indices = set()
    for key in values:
        if key.startswith("term."):
            try:
                indices.add(int(key.split(".")[1]))
            except (IndexError, ValueError):
                raise ConfigError("term keys look like term.<index>.<name>", field=key)
    return sorted(indices)


def model_from_flat(values: Dict[str, str]) -> Model:
    """Build a ScalarModel or MatrixModel from flat dotted keys."""
    drift = _drift_from_flat(values)
    x0 = _initial(values, "init.x0", 0.0)
    if x0 == STATIONARY:
        raise ConfigError("X cannot start from a stationary law", field="init.x0")
    u0 = _initial(values, "init.u0", STATIONARY)
    terms = _term_indices(values)
    try:
        if not terms:
            return ScalarModel(_damping_from_flat(values, "damping"), drift,
                               sigma_x=_float(values, "sigma_x", 1.0), d_x=_int(values, "dims.x", 1),
                               x0=x0, u0=u0)
        built = []
        for i in terms:
            prefix = f"term.{i}"
            matrix = _square(_floats(values, f"{prefix}.matrix", required=True), f"{prefix}.matrix")
            support = [int(v) for v in _floats(values, f"{prefix}.support", list(range(len(matrix))))]
            built.append(DampingTerm(_damping_from_flat(values, prefix), matrix, tuple(support)))
        d_x = len(built[0].matrix)
        sigma_flat = _floats(values, "sigma.matrix")
        sigma = _square(sigma_flat, "sigma.matrix") if sigma_flat else tuple(
            tuple(_float(values, "sigma_x", 1.0) * (i == j) for j in range(d_x)) for i in range(d_x))
        return MatrixModel(tuple(built), sigma, drift, x0=x0, u0=u0)
    except ModelSpecError as exc:
        raise ConfigError(str(exc), field="model") from exc


def sim_config_from_flat(values: Dict[str, str], t_final: Optional[float] = None,
                         seed: Optional[int] = None) -> SimConfig:
    """SimConfig from sim.* keys; t_final and seed override the file."""
    dt = _float(values, "sim.dt", 0.01)
    horizon = t_final if t_final is not None else _float(values, "sim.t_final", 1e5)
    try:
        return SimConfig.from_horizon(
            horizon, dt=dt, burn_in_time=_float(values, "sim.burn_in", 0.0),
            seed=seed if seed is not None else _int(values, "sim.seed", 0),
            scheme=_get(values, "sim.scheme", "implicit-euler-x"),
            thinning=_int(values, "sim.thinning", 1),
            evaluate_at=_get(values, "sim.evaluate_at", "start"))
    except ModelSpecError as exc:
        raise ConfigError(str(exc), field="sim") from exc


def analysis_options_from_flat(values: Dict[str, str]) -> Tuple[float, List[float]]:
    """(tail_quantile, p_grid) from analysis.* keys."""
    quantile = _float(values, "analysis.tail_quantile", 0.99)
    if not 0.0 < quantile < 1.0:
        raise ConfigError("must lie in (0, 1)", field="analysis.tail_quantile")
    p_grid = _floats(values, "analysis.p_grid", [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    if not p_grid or min(p_grid) <= 0:
        raise ConfigError("needs positive values", field="analysis.p_grid")
    return quantile, p_grid


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def config_hash(config: Dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(canonical_json(obj), encoding="utf-8")
    return path


def read_json(path) -> Dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_frame(path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return path


def ensure_output_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir, command: str, seed: int, config: Dict,
                   artifacts: Iterable[str], version: str) -> Path:
    """manifest.json: command, seed, package version, config hash, artifacts."""
    out_dir = Path(out_dir)
    write_json(out_dir / "config.json", config)
    manifest = {
        "command": command,
        "seed": seed,
        "version": version,
        "config_hash": config_hash(config),
        "artifacts": sorted(set(artifacts) | {"config.json"}),
    }
    return write_json(out_dir / "manifest.json", manifest)
