"""Figure regeneration from experiment CSV outputs.

The renderer consumes the delimited files the simulation runner writes
(spectral-efficiency curve sweeps and MODCOD operating-point schedules)
and turns them into fixed-style figures.  Rendering is read-only over
its inputs and fully deterministic: byte-identical inputs produce
byte-identical output files, so figures are regenerated artifacts and
never hand-edited.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

FIGURE_KINDS = ("se_curves", "se_envelope", "modcod_plane")
OUTPUT_FORMATS = ("png", "svg")

# Columns each figure kind reads from its input files.
REQUIRED_COLUMNS = {
    "se_curves": ("label", "snr_db", "eta"),
    "se_envelope": ("label", "snr_db", "eta"),
    "modcod_plane": ("family", "constellation", "snr_db", "eta"),
}

_MARKERS = ("o", "s", "^", "d", "v", "*")
_PACKAGE_DIR = Path(__file__).resolve().parent


class RecipeError(ValueError):
    """Raised for malformed recipes or inputs that do not satisfy them."""


def style_path() -> Path:
    """The checked-in style sheet every figure is drawn with."""
    return _PACKAGE_DIR / "style" / "clean.mplstyle"


def sample_dir() -> Path:
    """Directory of shipped sample CSVs and example recipes."""
    return _PACKAGE_DIR / "samples"


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FigureRecipe:
    """What to draw: input tables, figure kind, and axis dressing.

    ``labels`` names the inputs (legend prefixes for multi-file curve
    figures, line names for envelopes); it defaults to the file stems.
    ``x_range`` and ``y_range`` are optional (low, high) pairs.
    """

    kind: str
    inputs: tuple
    labels: tuple | None = None
    title: str | None = None
    x_range: tuple | None = None
    y_range: tuple | None = None

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise RecipeError(
                f"unknown figure kind {self.kind!r}; expected one of {FIGURE_KINDS}"
            )
        if not self.inputs:
            raise RecipeError("recipe lists no input files")
        object.__setattr__(self, "inputs", tuple(str(p) for p in self.inputs))
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != len(self.inputs):
                raise RecipeError("labels must match inputs one to one")
            object.__setattr__(self, "labels", labels)
        for name in ("x_range", "y_range"):
            value = getattr(self, name)
            if value is None:
                continue
            pair = tuple(float(v) for v in value)
            if len(pair) != 2 or not pair[0] < pair[1]:
                raise RecipeError(f"{name} must be (low, high) with low < high")
            object.__setattr__(self, name, pair)


_RECIPE_KEYS = {"kind", "inputs", "labels", "title", "x_range", "y_range"}


def load_recipe(path) -> FigureRecipe:
    """Parse a JSON recipe; relative input paths resolve beside the file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise RecipeError(f"cannot read recipe: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RecipeError(f"recipe is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise RecipeError("recipe must be a JSON object")
    unknown = sorted(set(doc) - _RECIPE_KEYS)
    if unknown:
        raise RecipeError(f"unknown recipe keys: {', '.join(unknown)}")
    missing = sorted({"kind", "inputs"} - set(doc))
    if missing:
        raise RecipeError(f"recipe needs keys: {', '.join(missing)}")
    inputs = doc["inputs"]
    if isinstance(inputs, str) or not isinstance(inputs, list):
        raise RecipeError("inputs must be a list of file paths")
    base = path.resolve().parent
    resolved = tuple(
        str(p) if Path(p).is_absolute() else str(base / p) for p in inputs
    )
    labels = doc.get("labels")
    if labels is not None and not isinstance(labels, list):
        raise RecipeError("labels must be a list of strings")
    return FigureRecipe(
        kind=doc["kind"],
        inputs=resolved,
        labels=None if labels is None else tuple(labels),
        title=doc.get("title"),
        x_range=doc.get("x_range"),
        y_range=doc.get("y_range"),
    )


# ---------------------------------------------------------------------------
# input tables
# ---------------------------------------------------------------------------


def read_table(path, columns) -> list[dict]:
    """Load one CSV and check it carries the needed columns and rows."""
    path = Path(path)
    if not path.is_file():
        raise RecipeError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise RecipeError(f"{path.name} is missing columns: {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise RecipeError(f"{path.name} has no data rows")
    return rows


def _series(rows, source):
    """Sorted (snr, eta) arrays of one row group."""
    try:
        pts = sorted((float(r["snr_db"]), float(r["eta"])) for r in rows)
    except ValueError as exc:
        raise RecipeError(f"{source}: non-numeric snr_db/eta cell ({exc})") from exc
    return [p[0] for p in pts], [p[1] for p in pts]


def _group(rows, key):
    """Row groups by column value, in first-seen order."""
    order, bins = [], {}
    for row in rows:
        value = row[key]
        if value not in bins:
            order.append(value)
            bins[value] = []
        bins[value].append(row)
    return [(value, bins[value]) for value in order]


# ---------------------------------------------------------------------------
# drawing
# ---------------------------------------------------------------------------


def _draw_se_curves(ax, tables, names):
    for name, table in zip(names, tables):
        for label, rows in _group(table, "label"):
            display = label if len(tables) == 1 else f"{name}: {label}"
            snr, eta = _series(rows, name)
            ax.plot(snr, eta, marker="o", label=display)


def _draw_se_envelope(ax, tables, names):
    for name, table in zip(names, tables):
        best = {}
        for row in table:
            snr, eta = _series([row], name)
            key = snr[0]
            best[key] = max(best.get(key, eta[0]), eta[0])
        snrs = sorted(best)
        ax.plot(snrs, [best[s] for s in snrs], marker="o", label=name)


def _draw_modcod_plane(ax, tables, names):
    rows = [row for table in tables for row in table]
    for i, (family, members) in enumerate(_group(rows, "family")):
        snr, eta = _series(members, family)
        ax.scatter(snr, eta, marker=_MARKERS[i % len(_MARKERS)], label=family)


_DRAWERS = {
    "se_curves": _draw_se_curves,
    "se_envelope": _draw_se_envelope,
    "modcod_plane": _draw_modcod_plane,
}


def render(recipe: FigureRecipe, out_path) -> Path:
    """Draw one figure and write it only after everything succeeded.

    The output format follows the file suffix (.png or .svg).  All
    inputs are read and validated before any drawing starts, and the
    image is assembled in memory, so a failure of any kind leaves no
    file behind.
    """
    out_path = Path(out_path)
    fmt = out_path.suffix.lower().lstrip(".")
    if fmt not in OUTPUT_FORMATS:
        raise RecipeError(
            f"unsupported output format {out_path.suffix!r}; use one of "
            + ", ".join("." + f for f in OUTPUT_FORMATS)
        )
    columns = REQUIRED_COLUMNS[recipe.kind]
    tables = [read_table(p, columns) for p in recipe.inputs]
    names = recipe.labels or tuple(Path(p).stem for p in recipe.inputs)

    with plt.style.context(str(style_path())):
        fig, ax = plt.subplots()
        try:
            _DRAWERS[recipe.kind](ax, tables, names)
            ax.set_xlabel("SNR [dB]")
            ax.set_ylabel("spectral efficiency [b/s/Hz]")
            if recipe.title:
                ax.set_title(recipe.title)
            if recipe.x_range:
                ax.set_xlim(*recipe.x_range)
            if recipe.y_range:
                ax.set_ylim(*recipe.y_range)
            ax.legend()
            fig.tight_layout()
            buf = BytesIO()
            # Fixed metadata keeps the bytes free of timestamps and
            # library version strings.
            metadata = {"Date": None} if fmt == "svg" else {"Software": "plotkit"}
            fig.savefig(buf, format=fmt, metadata=metadata)
        finally:
            plt.close(fig)

    if out_path.parent and not out_path.parent.exists():
        out_path.parent.mkdir(parents=True)
    out_path.write_bytes(buf.getvalue())
    return out_path
