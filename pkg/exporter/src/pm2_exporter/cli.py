"""Exporter CLI: `pm2-export export --manifest m.json --out dir/`."""

import argparse
import json
import logging
import sys

from .export import export_image_features, export_text_features
from .manifest import ExportManifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pm2-export")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="encode images and prompts into PM2F files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images-only", action="store_true")
    p.add_argument("--text-only", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    manifest = ExportManifest.from_json(args.manifest)
    out = {}
    if not args.text_only:
        out["images"] = export_image_features(manifest, args.out)
    if not args.images_only:
        out["text"] = export_text_features(manifest, args.out)
    print(json.dumps(out, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
