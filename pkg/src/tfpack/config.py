"""Experiment configurations: JSON scenarios, schema checks, derived plans.

A configuration file names a scenario, a kind, a seed, and a ``params``
block whose layout depends on the kind.  An optional ``full`` block holds
overrides that turn the reduced desk profile into the long-running one;
it is merged over ``params`` before validation so a config is checked in
exactly the shape it will run.  Every run is identified by a hash of the
resolved document, and that hash is stamped on every output row so a
result file can always be traced to the configuration that produced it.

Validation is two-staged: the document skeleton first, then the resolved
``params`` against the schema fragment for its kind.  Schema violations
are reported with the JSON path of the offending field; parse failures
with line and column.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import jsonschema

from .coded import ModCod
from .inforate import DetectorFamily, PredistorterPlan, SweepSpec, validate_sweep

SCHEMA_PATH = Path(__file__).resolve().parent / "schema" / "experiment.schema.json"
SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"

# Crude pre-flight budget guards: a run whose estimated work exceeds these
# is refused up front instead of grinding for days.  The symbol cap counts
# interior symbols simulated across a curve run; the bit cap counts coded
# bits pushed through the waterfall estimator.
SE_SYMBOL_CAP = 2_000_000_000
BER_BIT_CAP = 200_000_000

# Curve settings that may be given once in params and overridden per curve.
_CURVE_INHERITED = (
    "snr_db",
    "tau_grid",
    "nu_grid",
    "w_grid",
    "detector",
    "predistorter",
    "alpha",
    "span_symbols",
    "ibo_grid_db",
    "refine_obo",
    "k_symbols",
    "n_blocks",
    "nonlinear",
)


class ConfigError(ValueError):
    """A configuration that cannot be run; message carries the diagnostic."""


@lru_cache(maxsize=1)
def load_schema() -> dict:
    with open(SCHEMA_PATH) as fh:
        return json.load(fh)


def _field_path(error: jsonschema.ValidationError, prefix: str) -> str:
    parts = [prefix]
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def _validate_against(instance, schema: dict, prefix: str) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    error = jsonschema.exceptions.best_match(validator.iter_errors(instance))
    if error is not None:
        raise ConfigError(f"field {_field_path(error, prefix)}: {error.message}")


def _deep_merge(base: dict, overlay: dict) -> dict:
    """Recursive dict merge; lists and scalars in the overlay replace."""
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_digest(name: str, kind: str, seed: int, params: dict) -> str:
    """Stable 16-hex-digit hash of a resolved configuration."""
    payload = {"name": name, "kind": kind, "seed": seed, "params": params}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentConfig:
    """One fully resolved, validated scenario ready to run."""

    name: str
    kind: str
    seed: int
    params: dict
    profile: str
    config_hash: str
    source: str


def available_scenarios() -> list[str]:
    """Names of the scenario configs shipped inside the package."""
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


def resolve_config_path(arg: str) -> Path:
    """Turn a CLI config argument into a file path.

    An existing file wins; otherwise the argument is looked up among the
    shipped scenario names.
    """
    path = Path(arg)
    if path.is_file():
        return path
    shipped = SCENARIO_DIR / f"{arg}.json"
    if shipped.is_file():
        return shipped
    names = ", ".join(available_scenarios())
    raise ConfigError(
        f"no config file {arg!r} and no shipped scenario of that name "
        f"(shipped: {names})"
    )


def load_config(
    path,
    full: bool = False,
    seed: int | None = None,
) -> ExperimentConfig:
    """Parse, profile-merge, and validate one configuration file.

    ``full`` applies the config's long-profile overrides; ``seed``
    replaces the seed stored in the file.  All checks run here, before
    any output directory is touched, so an invalid config never leaves
    partial results behind.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc

    schema = load_schema()
    _validate_against(doc, schema, "$")
    params = doc["params"]
    if full:
        params = _deep_merge(params, doc.get("full", {}))
    kind = doc["kind"]
    kind_schema = {"$ref": f"#/$defs/{kind}_params", "$defs": schema["$defs"]}
    _validate_against(params, kind_schema, "params")

    cfg = ExperimentConfig(
        name=doc["name"],
        kind=kind,
        seed=doc["seed"] if seed is None else int(seed),
        params=params,
        profile="full" if full else "default",
        config_hash=config_digest(
            doc["name"], kind, doc["seed"] if seed is None else int(seed), params
        ),
        source=str(path),
    )
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# derived run plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePlan:
    """One labeled curve of a spectral-efficiency run."""

    label: str
    file: str
    sweep: SweepSpec


@dataclass(frozen=True)
class TableRow:
    """One MODCOD entry of a table run, tagged with its family."""

    family: str
    modcod: ModCod


@dataclass(frozen=True)
class BerPlan:
    """All knobs of a coded-waterfall run."""

    modcod: ModCod
    snr_db: tuple
    code_length: int
    n_codewords: int
    min_errors: int
    global_iterations: int
    local_iterations: int
    input_backoff_db: float
    num_users: int
    alpha: float
    span_symbols: int
    samples_per_symbol: int
    nonlinear: bool
    detector: DetectorFamily


def _pick(curve: dict, params: dict, key: str, default=None):
    if key in curve:
        return curve[key]
    return params.get(key, default)


def curve_plans(cfg: ExperimentConfig) -> list[CurvePlan]:
    """Resolve the per-curve sweeps of an ``se_curves`` configuration."""
    params = cfg.params
    plans = []
    budget = 0
    for i, curve in enumerate(params["curves"]):
        label = curve["label"]
        where = f"params.curves[{i}] ({label!r})"
        detector = _pick(curve, params, "detector")
        if detector is None:
            raise ConfigError(f"{where}: no detector given at curve or params level")
        pre = _pick(curve, params, "predistorter")
        try:
            family = DetectorFamily(**detector)
            plan = None if pre is None else PredistorterPlan(**pre)
            sweep = SweepSpec(
                constellation=curve["constellation"],
                snr_db=tuple(float(s) for s in _pick(curve, params, "snr_db")),
                tau_grid=tuple(float(v) for v in _pick(curve, params, "tau_grid", [1.0])),
                nu_grid=tuple(float(v) for v in _pick(curve, params, "nu_grid", [1.0])),
                w_grid=tuple(float(v) for v in _pick(curve, params, "w_grid", [1.0])),
                ibo_grid_db=tuple(
                    float(v) for v in _pick(curve, params, "ibo_grid_db", [2.5])
                ),
                detector=family,
                k_symbols=int(_pick(curve, params, "k_symbols", 4000)),
                n_blocks=int(_pick(curve, params, "n_blocks", 20)),
                num_users=int(params.get("num_users", 5)),
                alpha=float(_pick(curve, params, "alpha", 0.2)),
                span_symbols=int(_pick(curve, params, "span_symbols", 16)),
                samples_per_symbol=int(params.get("samples_per_symbol", 8)),
                nonlinear=bool(_pick(curve, params, "nonlinear", True)),
                refine_obo=bool(_pick(curve, params, "refine_obo", False)),
                kernel_span=int(params.get("kernel_span", 16)),
                predistorter=plan,
                seed=cfg.seed,
            )
            validate_sweep(sweep)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        drives = len(sweep.ibo_grid_db) + (1 if sweep.refine_obo else 0)
        if not sweep.nonlinear:
            drives = 1
        budget += (
            len(sweep.snr_db)
            * len(sweep.tau_grid)
            * len(sweep.nu_grid)
            * len(sweep.w_grid)
            * drives
            * sweep.k_symbols
        )
        plans.append(CurvePlan(label=label, file=curve.get("file", "curves.csv"), sweep=sweep))
    keys = [(p.file, p.label) for p in plans]
    if len(set(keys)) != len(keys):
        raise ConfigError("curve labels must be unique within each output file")
    if budget > SE_SYMBOL_CAP:
        raise ConfigError(
            f"resource cap exceeded: the run would simulate about {budget:.2e} "
            f"interior symbols (cap {SE_SYMBOL_CAP:.0e}); shrink grids, the SNR "
            "list, or k_symbols"
        )
    return plans


def table_rows(cfg: ExperimentConfig) -> list[TableRow]:
    """Resolve the MODCOD entries of a ``modcod_table`` configuration."""
    rows = []
    for i, row in enumerate(cfg.params["modcods"]):
        try:
            modcod = ModCod(
                constellation=row["constellation"],
                rate=Fraction(row["rate"]),
                tau=float(row.get("tau", 1.0)),
                nu=float(row.get("nu", 1.0)),
                w_scale=float(row.get("w_scale", 1.0)),
                snr_db=float(row.get("snr_db", 0.0)),
            )
        except ValueError as exc:
            raise ConfigError(f"params.modcods[{i}]: {exc}") from exc
        rows.append(TableRow(family=row["family"], modcod=modcod))
    return rows


def ber_plan(cfg: ExperimentConfig) -> BerPlan:
    """Resolve a ``ber_waterfall`` configuration."""
    params = cfg.params
    detector = params.get("detector", {"kind": "shortening", "memory": 1})
    row = params["modcod"]
    try:
        modcod = ModCod(
            constellation=row["constellation"],
            rate=Fraction(row["rate"]),
            tau=float(row["tau"]),
            nu=float(row["nu"]),
            w_scale=float(row.get("w_scale", 1.0)),
        )
        family = DetectorFamily(**detector)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params.modcod: {exc}") from exc
    plan = BerPlan(
        modcod=modcod,
        snr_db=tuple(float(s) for s in params["snr_db"]),
        code_length=int(params.get("code_length", 1008)),
        n_codewords=int(params.get("n_codewords", 12)),
        min_errors=int(params.get("min_errors", 10)),
        global_iterations=int(params.get("global_iterations", 5)),
        local_iterations=int(params.get("local_iterations", 20)),
        input_backoff_db=float(params.get("input_backoff_db", 2.5)),
        num_users=int(params.get("num_users", 5)),
        alpha=float(params.get("alpha", 0.2)),
        span_symbols=int(params.get("span_symbols", 16)),
        samples_per_symbol=int(params.get("samples_per_symbol", 8)),
        nonlinear=bool(params.get("nonlinear", True)),
        detector=family,
    )
    bits = len(plan.snr_db) * plan.n_codewords * plan.code_length
    if bits > BER_BIT_CAP:
        raise ConfigError(
            f"resource cap exceeded: the run would push about {bits:.2e} coded "
            f"bits (cap {BER_BIT_CAP:.0e}); shrink the SNR list or n_codewords"
        )
    return plan


def validate_config(cfg: ExperimentConfig) -> None:
    """Run the semantic checks behind the schema for every kind."""
    if cfg.kind == "se_curves":
        curve_plans(cfg)
    elif cfg.kind == "modcod_table":
        table_rows(cfg)
    else:
        ber_plan(cfg)
