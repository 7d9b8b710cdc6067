"""Plot tool: render one figure from a JSON spec or every standard figure
from an artifact directory."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .figures import FigureSpec, SchemaError, default_specs, render, save


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qcdrl-plot",
                                     description="Render figure analogs from experiment artifacts")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", help="JSON figure spec (figure, inputs, output)")
    group.add_argument("--all", action="store_true",
                       help="render every standard figure found under --in")
    parser.add_argument("--in", dest="in_dir", default=".", help="artifact directory")
    parser.add_argument("--out", dest="out_dir", default=".", help="image output directory")
    args = parser.parse_args(argv)

    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    try:
        if args.spec:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
            try:
                spec = FigureSpec(raw["figure"], raw["inputs"], raw["output"])
            except KeyError as exc:
                raise SchemaError(f"spec file missing key {exc}") from exc
            fig = render(spec, base_dir=in_dir)
            path = save(fig, out_dir / spec.output)
            print(path)
        else:
            rendered = []
            for spec in default_specs(in_dir):
                missing = [
                    v for v in _flat(spec.inputs.values()) if not (in_dir / v).exists()
                ]
                if missing:
                    print(f"skip {spec.figure}: missing {missing}", file=sys.stderr)
                    continue
                fig = render(spec, base_dir=in_dir)
                rendered.append(save(fig, out_dir / spec.output))
            for p in rendered:
                print(p)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    return 0


def _flat(values):
    for v in values:
        if isinstance(v, (list, tuple)):
            yield from v
        else:
            yield v


if __name__ == "__main__":
    sys.exit(main())
