"""CLI: export activations of a torchvision model to an H2TA store."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="h2t-export",
        description="Dump tap activations of a (pretrained) torchvision "
                    "model over a labeled .npz dataset into the H2TA "
                    "activation-store format.")
    parser.add_argument("--model", required=True,
                        help="torchvision model name (e.g. resnet18)")
    parser.add_argument("--taps", required=True, action="append",
                        help="module path to capture (repeatable or "
                             "comma-separated)")
    parser.add_argument("--data", required=True,
                        help=".npz file with arrays x [N,H,W,C] and y [N]")
    parser.add_argument("--split", default="train")
    parser.add_argument("--out", required=True, help="output store path")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--capture", choices=("post", "pre"), default="post")
    parser.add_argument("--weights", default=None,
                        help="optional state-dict file to load")
    parser.add_argument("--dataset-id", default=None)
    return parser


def run(argv) -> int:
    args = build_parser().parse_args(argv)
    taps = [t for chunk in args.taps for t in chunk.split(",") if t]
    spec = ExportSpec(model=args.model, taps=taps, data=args.data,
                      out=args.out, split=args.split,
                      batch_size=args.batch_size, capture=args.capture,
                      weights=args.weights, dataset_id=args.dataset_id)
    path = export(spec)
    print(path)
    return 0


def main() -> None:
    try:
        sys.exit(run(sys.argv[1:]))
    except ExportError as e:
        sys.stderr.write(f"error: {' '.join(str(e).split())}\n")
        sys.exit(2)


if __name__ == "__main__":
    main()
