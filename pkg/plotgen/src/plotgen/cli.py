"""plotgen <index.json> --out-dir figs/  - render every listed figure."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .figures import SchemaError, render, specs_from_index


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plotgen")
    parser.add_argument("index", type=Path, help="index.json of an export bundle")
    parser.add_argument("--out-dir", type=Path, default=Path("figs"))
    args = parser.parse_args(argv)
    try:
        specs = specs_from_index(args.index, args.out_dir)
        for spec in specs:
            path = render(spec)
            print(f"wrote {path}")
    except (SchemaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
