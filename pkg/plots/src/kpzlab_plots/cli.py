"""Command line for figure rendering.

    kpzlab-plot <spec.json>
    kpzlab-plot --kind loglog-var --input sweep.csv --out fig.png
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotError, PlotSpec, render


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kpzlab-plot", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("spec", nargs="?", help="plot spec JSON (alternative to flags)")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--input", help="primary input file for the chosen kind")
    p.add_argument("--sweep", help="sweep CSV (extra input for s-histogram)")
    p.add_argument("--out", help="output image path")
    p.add_argument("--expected-slope", type=float, default=None)
    p.add_argument("--t", type=float, default=None, help="grid time selector")
    return p


def spec_from_args(args) -> PlotSpec:
    if args.spec:
        return PlotSpec.from_json(args.spec)
    if not (args.kind and args.input and args.out):
        raise PlotError("need either a spec JSON or --kind/--input/--out")
    primary = {"loglog-var": "sweep", "loglog-diffusivity": "sweep",
               "s-histogram": "histogram", "identity-dashboard": "report"}[args.kind]
    kw = {primary: args.input}
    if args.sweep and primary != "sweep":
        kw["sweep"] = args.sweep
    return PlotSpec(kind=args.kind, out=args.out, expected_slope=args.expected_slope,
                    t_macro=args.t, **kw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        render(spec_from_args(args))
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
