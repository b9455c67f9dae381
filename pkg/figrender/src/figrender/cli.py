"""figrender: turn run-directory artifacts into figures.

Either pass flags mirroring a FigureJob, or --job with a JSON job file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .artifacts import SchemaError
from .render import FIGURE_KINDS, FigureJob, render


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="figrender",
                                description="render adaptation-run artifacts into figures")
    p.add_argument("--job", help="JSON file with FigureJob fields")
    p.add_argument("--kind", choices=FIGURE_KINDS)
    p.add_argument("--input", action="append", default=[], help="artifact path (repeatable)")
    p.add_argument("--out", help="output image path")
    p.add_argument("--point-size", type=float, default=8.0)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--title", default="")
    return p


def job_from_args(args) -> FigureJob:
    if args.job:
        data = json.loads(Path(args.job).read_text())
        return FigureJob(kind=data["kind"], inputs=list(data["inputs"]), output=data["output"],
                         point_size=float(data.get("point_size", 8.0)),
                         scale=int(data.get("scale", 4)), title=data.get("title", ""))
    if not (args.kind and args.input and args.out):
        raise ValueError("either --job or all of --kind/--input/--out are required")
    return FigureJob(kind=args.kind, inputs=args.input, output=args.out,
                     point_size=args.point_size, scale=args.scale, title=args.title)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = job_from_args(args)
        out = render(job)
    except (SchemaError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"job error: {e}", file=sys.stderr)
        return 1
    if out is None:
        print("input empty; nothing rendered")
        return 0
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
