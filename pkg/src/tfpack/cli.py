"""Command-line experiment runner and run-to-run comparison.

``tfpack run <config>`` executes one scenario: spectral-efficiency
curve sweeps, MODCOD table evaluation, or a coded BER waterfall.  All
results land in one output directory as delimited CSV files, quick-look
PNG figures, and a JSON manifest recording the config hash, the seed,
and library versions.  Sweep points are scheduled on a bounded thread
pool; every point derives its random stream from the config hash, so
results are independent of scheduling order and a rerun with the same
seed reproduces every CSV byte for byte.

``tfpack compare <baseline> <candidate>`` reads two curve CSVs and
reports the percentage spectral-efficiency gain at every matched SNR,
plus the gain between the curve peaks.  ``--envelope`` first collapses
each file to its per-SNR envelope (the largest eta over all rows), the
right mode for files holding one curve per modulation.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from importlib import metadata
from io import BytesIO
from pathlib import Path

import numpy as np

from .coded import IterationSchedule, estimate_ber, make_ldpc, modcod_link
from .config import (
    BerPlan,
    ConfigError,
    ExperimentConfig,
    ber_plan,
    curve_plans,
    load_config,
    resolve_config_path,
    table_rows,
)
from .inforate import (
    build_chain,
    noise_density,
    optimize_packing,
    point_seed,
    spectral_efficiency,
)
from .waveform import build_constellation

CURVE_COLUMNS = (
    "label",
    "snr_db",
    "eta",
    "ir_bits",
    "hw95",
    "tau",
    "nu",
    "w_scale",
    "obo_db",
    "n_i",
    "config_hash",
)
SURFACE_COLUMNS = (
    "label",
    "snr_db",
    "tau",
    "nu",
    "w_scale",
    "obo_db",
    "n_i",
    "ir_bits",
    "hw95",
    "eta",
    "config_hash",
)
MODCOD_COLUMNS = (
    "family",
    "constellation",
    "rate",
    "tau",
    "nu",
    "w_scale",
    "snr_db",
    "eta",
    "config_hash",
)
BER_COLUMNS = ("snr_db", "ber", "ci_low", "ci_high", "trials", "config_hash")


def _version() -> str:
    try:
        return metadata.version("tfpack")
    except metadata.PackageNotFoundError:
        return "unknown"


def _default_workers() -> int:
    return min(4, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# output collection
# ---------------------------------------------------------------------------


class OutputCollector:
    """Buffers every artifact in memory and writes them in one pass.

    All result emission is serialized through this collector: worker
    outputs are assembled in configuration order regardless of completion
    order, and nothing touches the output directory until the whole run
    has succeeded, so a failed run leaves no partial files behind.
    """

    def __init__(self):
        self._files: dict[str, bytes] = {}

    def add_text(self, name: str, text: str) -> None:
        self.add_bytes(name, text.encode())

    def add_bytes(self, name: str, data: bytes) -> None:
        if name in self._files:
            raise ValueError(f"duplicate output name {name!r}")
        self._files[name] = data

    @property
    def names(self) -> list[str]:
        return sorted(self._files)

    def flush(self, out_dir: Path) -> list[str]:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in self.names:
            (out_dir / name).write_bytes(self._files[name])
        return self.names


def _csv_text(columns, rows) -> str:
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for value in row:
            cells.append(value if isinstance(value, str) else repr(float(value)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# quick-look figures
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def _figure_bytes(fig) -> bytes:
    buf = BytesIO()
    fig.savefig(buf, format="png")
    return buf.getvalue()


def _curves_figure(curve_rows) -> bytes:
    """Eta versus SNR, one line per labeled curve."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.4), dpi=110)
    seen = []
    for label, *_ in curve_rows:
        if label not in seen:
            seen.append(label)
    for label in seen:
        pts = sorted((r[1], r[2]) for r in curve_rows if r[0] == label)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("spectral efficiency [b/s/Hz]")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    data = _figure_bytes(fig)
    plt.close(fig)
    return data


def _modcods_figure(rows) -> bytes:
    """Operating points in the (SNR, eta) plane, one marker set per family."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.4), dpi=110)
    families = []
    for row in rows:
        if row["family"] not in families:
            families.append(row["family"])
    markers = ["o", "s", "^", "d", "v", "*"]
    for i, family in enumerate(families):
        pts = [(r["snr_db"], r["eta"]) for r in rows if r["family"] == family]
        ax.scatter(
            [p[0] for p in pts],
            [p[1] for p in pts],
            marker=markers[i % len(markers)],
            label=family,
        )
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("spectral efficiency [b/s/Hz]")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    data = _figure_bytes(fig)
    plt.close(fig)
    return data


def _ber_figure(points) -> bytes:
    """BER versus SNR on a log scale; exact-zero estimates are left out."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.4), dpi=110)
    shown = [(p.snr_db, p.ber) for p in points if p.ber > 0]
    if shown:
        shown.sort()
        ax.semilogy([p[0] for p in shown], [p[1] for p in shown], marker="o")
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("bit error ratio")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    data = _figure_bytes(fig)
    plt.close(fig)
    return data


# ---------------------------------------------------------------------------
# scenario runners
# ---------------------------------------------------------------------------


def _run_se_curves(cfg: ExperimentConfig, collector: OutputCollector, progress: bool):
    plans = curve_plans(cfg)
    workers = int(cfg.params.get("max_workers", _default_workers()))
    emit_surface = bool(cfg.params.get("emit_surface", False))

    jobs = [(i, plan, snr) for i, plan in enumerate(plans) for snr in plan.sweep.snr_db]
    results = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(
                optimize_packing, replace(plan.sweep, snr_db=(snr,)), False
            ): (i, plan.label, snr)
            for i, plan, snr in jobs
        }
        for done, future in enumerate(as_completed(futures), start=1):
            i, label, snr = futures[future]
            results[(i, snr)] = future.result()
            if progress:
                print(f"[run] {label} at {snr:+.1f} dB done ({done}/{len(jobs)})")

    by_file: dict[str, list] = {}
    surface_rows = []
    maxima_entries = []
    for i, plan in enumerate(plans):
        for snr in plan.sweep.snr_db:
            surf = results[(i, snr)]
            mx = surf.maxima[0]
            by_file.setdefault(plan.file, []).append(
                (
                    plan.label,
                    mx.snr_db,
                    mx.eta_m,
                    mx.ir_bits,
                    mx.half_width_95,
                    mx.tau,
                    mx.nu,
                    mx.w_scale,
                    mx.obo_db,
                    mx.n_i,
                    cfg.config_hash,
                )
            )
            maxima_entries.append(
                {
                    "label": plan.label,
                    "file": plan.file,
                    "snr_db": mx.snr_db,
                    "eta_m": mx.eta_m,
                    "tau": mx.tau,
                    "nu": mx.nu,
                    "w_scale": mx.w_scale,
                    "obo_db": mx.obo_db,
                    "n_i": mx.n_i,
                    "ir_bits": mx.ir_bits,
                    "half_width_95": mx.half_width_95,
                    "refined": {
                        "tau": mx.refined_tau,
                        "nu": mx.refined_nu,
                        "w_scale": mx.refined_w,
                    },
                    "sweep_hash": surf.sweep_hash,
                }
            )
            if emit_surface:
                for p in surf.points:
                    surface_rows.append(
                        (
                            plan.label,
                            p.snr_db,
                            p.tau,
                            p.nu,
                            p.w_scale,
                            p.obo_db,
                            p.n_i,
                            p.ir_bits,
                            p.half_width_95,
                            p.eta,
                            cfg.config_hash,
                        )
                    )

    for name in sorted(by_file):
        rows = by_file[name]
        collector.add_text(name, _csv_text(CURVE_COLUMNS, rows))
        collector.add_bytes(Path(name).stem + ".png", _curves_figure(rows))
    if emit_surface:
        collector.add_text("surface.csv", _csv_text(SURFACE_COLUMNS, surface_rows))
    collector.add_text(
        "maxima.json",
        json.dumps(
            {"config_hash": cfg.config_hash, "maxima": maxima_entries},
            indent=2,
            sort_keys=True,
        )
        + "\n",
    )


def _run_modcod_table(cfg: ExperimentConfig, collector: OutputCollector):
    rows = table_rows(cfg)
    t_ref = float(cfg.params.get("t_ref", 1.0 / 27.5e6))
    f_ref = float(cfg.params.get("f_ref", 41.5e6))
    records = []
    csv_rows = []
    for row in rows:
        mc = row.modcod
        bits = float(mc.rate) * math.log2(build_constellation(mc.constellation).size)
        point = spectral_efficiency(bits, mc.tau, mc.nu, t_ref, f_ref)
        records.append({"family": row.family, "snr_db": mc.snr_db, "eta": point.eta})
        csv_rows.append(
            (
                row.family,
                mc.constellation,
                str(mc.rate),
                mc.tau,
                mc.nu,
                mc.w_scale,
                mc.snr_db,
                point.eta,
                cfg.config_hash,
            )
        )
    collector.add_text("modcods.csv", _csv_text(MODCOD_COLUMNS, csv_rows))
    collector.add_bytes("modcods.png", _modcods_figure(records))


def _run_ber(cfg: ExperimentConfig, collector: OutputCollector, progress: bool):
    plan: BerPlan = ber_plan(cfg)
    link = modcod_link(
        plan.modcod,
        nonlinear=plan.nonlinear,
        input_backoff_db=plan.input_backoff_db,
        num_users=plan.num_users,
        alpha=plan.alpha,
        span_symbols=plan.span_symbols,
        samples_per_symbol=plan.samples_per_symbol,
    )
    rng_id = np.random.default_rng(point_seed(cfg.config_hash, "kernels"))
    chain = build_chain(link, noise_density(link, plan.snr_db[0]), rng_id)
    code = make_ldpc(plan.code_length, plan.modcod.rate)
    schedule = IterationSchedule(plan.global_iterations, plan.local_iterations)
    workers = int(cfg.params.get("max_workers", _default_workers()))

    def one_point(snr: float):
        rng = np.random.default_rng(point_seed(cfg.config_hash, "ber", snr))
        return estimate_ber(
            plan.modcod,
            schedule,
            plan.n_codewords,
            rng,
            snr_db=snr,
            code=code,
            family=plan.detector,
            link=link,
            kernel_set=chain.kernel_set,
            min_errors=plan.min_errors,
        )

    points = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(one_point, snr): snr for snr in plan.snr_db}
        for done, future in enumerate(as_completed(futures), start=1):
            snr = futures[future]
            points[snr] = future.result()
            if progress:
                print(
                    f"[run] BER at {snr:+.2f} dB: {points[snr].ber:.3e} "
                    f"({done}/{len(plan.snr_db)})"
                )

    ordered = [points[snr] for snr in plan.snr_db]
    csv_rows = [
        (p.snr_db, p.ber, p.ci_low, p.ci_high, float(p.trials), cfg.config_hash)
        for p in ordered
    ]
    collector.add_text("ber.csv", _csv_text(BER_COLUMNS, csv_rows))
    collector.add_bytes("ber.png", _ber_figure(ordered))


@dataclass(frozen=True)
class RunResult:
    """Where a run landed and what it wrote."""

    out_dir: Path
    manifest: dict
    outputs: list


def run_experiment(
    config,
    full: bool = False,
    seed: int | None = None,
    out_dir=None,
    progress: bool = True,
) -> RunResult:
    """Execute one scenario config and write its artifacts.

    ``config`` is a file path or the name of a shipped scenario.  The
    whole configuration is validated before any computation starts, and
    all outputs are buffered until the run finishes, so failures of any
    kind leave no partial results.
    """
    path = resolve_config_path(str(config))
    cfg = load_config(path, full=full, seed=seed)
    out = Path(out_dir) if out_dir is not None else Path("runs") / cfg.name

    collector = OutputCollector()
    if cfg.kind == "se_curves":
        _run_se_curves(cfg, collector, progress)
    elif cfg.kind == "modcod_table":
        _run_modcod_table(cfg, collector)
    else:
        _run_ber(cfg, collector, progress)

    manifest = {
        "scenario": cfg.name,
        "kind": cfg.kind,
        "profile": cfg.profile,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash,
        "source_config": cfg.source,
        "outputs": collector.names,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": metadata.version("scipy"),
            "matplotlib": metadata.version("matplotlib"),
            "tfpack": _version(),
        },
    }
    collector.add_text(
        "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    written = collector.flush(out)
    return RunResult(out_dir=out, manifest=manifest, outputs=written)


# ---------------------------------------------------------------------------
# run comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompareRow:
    """Gain of the candidate over the baseline at one matched point."""

    label: str
    snr_db: float
    baseline_eta: float
    candidate_eta: float
    gain_percent: float


@dataclass(frozen=True)
class CompareReport:
    """Per-SNR gains plus the gain between the curve peaks."""

    mode: str
    rows: tuple
    envelope_gain_percent: float


def _read_curve_rows(path) -> list:
    """Read (label, snr_db, eta) triples from any CSV carrying them."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        missing = {"snr_db", "eta"} - set(header)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        i_snr = header.index("snr_db")
        i_eta = header.index("eta")
        i_label = header.index("label") if "label" in header else None
        rows = []
        for n, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.rstrip("\n").split(",")
            if len(cells) != len(header):
                raise ValueError(f"{path}: line {n}: expected {len(header)} fields")
            try:
                snr = float(cells[i_snr])
                eta = float(cells[i_eta])
            except ValueError as exc:
                raise ValueError(f"{path}: line {n}: {exc}") from exc
            rows.append(("" if i_label is None else cells[i_label], snr, eta))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def _envelope(rows) -> dict:
    env: dict[float, float] = {}
    for _, snr, eta in rows:
        env[snr] = max(env.get(snr, -math.inf), eta)
    return env


def _paired_rows(base_rows, cand_rows) -> list:
    base: dict = {}
    cand: dict = {}
    for target, rows, name in ((base, base_rows, "baseline"), (cand, cand_rows, "candidate")):
        for label, snr, eta in rows:
            if (label, snr) in target:
                raise ValueError(
                    f"{name} file has duplicate rows for curve {label!r} at "
                    f"{snr:g} dB; use envelope mode for surface-style files"
                )
            target[(label, snr)] = eta
    base_labels = {k[0] for k in base}
    cand_labels = {k[0] for k in cand}
    if base_labels != cand_labels:
        raise ValueError(
            f"curve labels differ between files ({sorted(base_labels)} vs "
            f"{sorted(cand_labels)}); use envelope mode to compare anyway"
        )
    rows = []
    for label in sorted(base_labels):
        snrs = sorted(
            {k[1] for k in base if k[0] == label}
            & {k[1] for k in cand if k[0] == label}
        )
        if not snrs:
            raise ValueError(f"SNR grids for curve {label!r} are disjoint")
        for snr in snrs:
            rows.append((label, snr, base[(label, snr)], cand[(label, snr)]))
    return rows


def compare_runs(baseline, candidate, envelope: bool = False) -> CompareReport:
    """Percentage spectral-efficiency gains of candidate over baseline.

    Both files need ``snr_db`` and ``eta`` columns; a ``label`` column
    separates curves.  The default mode matches rows per (label, SNR)
    and requires the same labels on both sides.  Envelope mode first
    reduces each file to its per-SNR envelope, then matches SNRs.  The
    envelope gain compares the peak eta reached on the matched points.
    """
    base_rows = _read_curve_rows(baseline)
    cand_rows = _read_curve_rows(candidate)
    if envelope:
        base_env = _envelope(base_rows)
        cand_env = _envelope(cand_rows)
        snrs = sorted(set(base_env) & set(cand_env))
        if not snrs:
            raise ValueError("SNR grids of the two files are disjoint")
        paired = [("envelope", snr, base_env[snr], cand_env[snr]) for snr in snrs]
    else:
        paired = _paired_rows(base_rows, cand_rows)

    rows = []
    for label, snr, b, c in paired:
        if b <= 0:
            raise ValueError(
                f"baseline eta is {b:g} at {snr:g} dB; gain is undefined"
            )
        rows.append(
            CompareRow(
                label=label,
                snr_db=snr,
                baseline_eta=b,
                candidate_eta=c,
                gain_percent=100.0 * (c / b - 1.0),
            )
        )
    peak_base = max(r.baseline_eta for r in rows)
    peak_cand = max(r.candidate_eta for r in rows)
    return CompareReport(
        mode="envelope" if envelope else "curves",
        rows=tuple(rows),
        envelope_gain_percent=100.0 * (peak_cand / peak_base - 1.0),
    )


def render_compare_report(report: CompareReport) -> str:
    """Human-readable gain listing, one matched point per line."""
    width = max(len(r.label) for r in report.rows)
    lines = [f"spectral-efficiency gains, candidate over baseline ({report.mode} mode)"]
    for r in report.rows:
        lines.append(
            f"  {r.label:<{width}}  {r.snr_db:+7.2f} dB  "
            f"eta {r.baseline_eta:.4f} -> {r.candidate_eta:.4f}  "
            f"{r.gain_percent:+.1f}%"
        )
    lines.append(f"envelope gain (peak vs peak): {report.envelope_gain_percent:+.1f}%")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    from .config import available_scenarios

    parser = argparse.ArgumentParser(
        prog="tfpack",
        description="Spectral-efficiency experiments on packed nonlinear downlinks",
    )
    parser.add_argument("--version", action="version", version=f"tfpack {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser(
        "run",
        help="run a scenario config into an output directory",
        epilog="shipped scenarios: " + ", ".join(available_scenarios()),
    )
    run_p.add_argument("config", help="config file path or shipped scenario name")
    run_p.add_argument(
        "--full", action="store_true", help="apply the config's long-profile overrides"
    )
    run_p.add_argument("--seed", type=int, default=None, help="replace the config seed")
    run_p.add_argument("--out", default=None, help="output directory (default runs/<name>)")

    cmp_p = sub.add_parser(
        "compare", help="report per-SNR spectral-efficiency gains between two curve CSVs"
    )
    cmp_p.add_argument("baseline")
    cmp_p.add_argument("candidate")
    cmp_p.add_argument(
        "--envelope",
        action="store_true",
        help="compare per-SNR envelopes (max eta over all rows at each SNR)",
    )

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            result = run_experiment(
                args.config, full=args.full, seed=args.seed, out_dir=args.out
            )
            print(f"[run] wrote {len(result.outputs)} files to {result.out_dir}")
            return 0
        report = compare_runs(args.baseline, args.candidate, envelope=args.envelope)
        print(render_compare_report(report), end="")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
