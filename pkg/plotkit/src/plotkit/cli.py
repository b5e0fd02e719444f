"""Command-line front end: render one figure from a JSON recipe.

``plotkit render <recipe.json> --out fig.png`` draws the figure the
recipe describes and writes it at the given path; the suffix picks the
format (.png or .svg).  Recipe or input problems exit with status 2,
write failures with status 1, and neither leaves a partial file.
"""

from __future__ import annotations

import argparse
import sys

from .figures import RecipeError, load_recipe, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plotkit",
        description="Regenerate figures from experiment CSV outputs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_render = sub.add_parser("render", help="draw one figure from a recipe")
    p_render.add_argument("recipe", help="path to a JSON figure recipe")
    p_render.add_argument(
        "--out", required=True, help="output image path (.png or .svg)"
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = render(load_recipe(args.recipe), args.out)
    except RecipeError as exc:
        print(f"plotkit: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"plotkit: {exc}", file=sys.stderr)
        return 1
    print(f"[render] wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
