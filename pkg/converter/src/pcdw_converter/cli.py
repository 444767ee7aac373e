"""Command-line wrapper: pcdw-export <checkpoint dir> <output dir>."""

from __future__ import annotations

import argparse
import sys

from .export import UnsupportedArchitecture, export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="pcdw-export")
    parser.add_argument("source", help="checkpoint directory (config + weights + tokenizer files)")
    parser.add_argument("out_dir", help="destination directory")
    args = parser.parse_args(argv)
    try:
        manifest = export(args.source, args.out_dir)
    except UnsupportedArchitecture as exc:
        print(f"refusing to export: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {manifest.source} -> {args.out_dir} ({len(manifest.tensor_map)} tensors)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
