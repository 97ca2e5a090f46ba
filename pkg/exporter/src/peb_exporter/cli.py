"""Command line: peb-export --manifest manifest.json --out data.peb"""
from __future__ import annotations

import argparse
import sys

from .backbones import BackboneLoadError
from .export import ExportManifest, ImageDecodeError, ManifestError, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="peb-export",
        description="run a frozen backbone over an image set and write a PEB bundle",
    )
    parser.add_argument("--manifest", required=True, help="manifest JSON path")
    parser.add_argument("--out", required=True, help="output .peb path")
    args = parser.parse_args(argv)
    try:
        manifest = ExportManifest.from_json(args.manifest)
        summary = export(manifest, args.out)
    except (ManifestError, BackboneLoadError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ImageDecodeError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    print(
        f"wrote {summary['samples']} samples "
        f"({summary['classes']} classes, {summary['grid']}x{summary['grid']} grid, "
        f"dim {summary['embed_dim']}, backbone {summary['backbone']}) to {args.out}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
