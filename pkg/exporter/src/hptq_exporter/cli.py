"""Command line interface: export models, pack datasets."""

import argparse
import sys


def build_parser():
    parser = argparse.ArgumentParser(prog="hptq-export", description="Keras to hptq container conversion")
    sub = parser.add_subparsers(dest="command", required=True)

    e = sub.add_parser("export", help="convert a Keras model into a model container with goldens")
    e.add_argument("--arch", required=True,
                   help="mobilenet_v1, resnet50, or a path to a saved Keras model")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--weights", default=None,
                   help="checkpoint: 'imagenet' or a weights path (default: random init)")
    e.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"), default=None)
    e.add_argument("--goldens", type=int, default=8, help="golden input/output pairs to record")

    p = sub.add_parser("pack", help="pack images into a calibration dataset container")
    p.add_argument("--images", required=True, help=".npy array or image directory")
    p.add_argument("--out", required=True, help="output container path (.json)")
    p.add_argument("--labels", default=None, help="optional .npy label vector")
    p.add_argument("--n", type=int, default=None, help="number of samples to keep")
    p.add_argument("--normalize", default="none", choices=["none", "scale01", "pm1"])
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            from .export import build_source, export_model

            model, source = build_source(args.arch, weights=args.weights, input_size=args.input_size)
            manifest = export_model(model, args.out, source=source, golden_count=args.goldens)
            print(f"exported {source}: {sum(len(v) for v in manifest.op_mapping.values())} layers "
                  f"-> {args.out}/model.json (+{manifest.golden_count} goldens)")
        else:
            from .pack import pack_dataset

            count = pack_dataset(
                args.images, args.out, labels=args.labels, n=args.n,
                normalize=args.normalize, size=tuple(args.size) if args.size else None,
            )
            print(f"packed {count} samples -> {args.out}")
        return 0
    except Exception as e:  # conversion errors should not traceback at the CLI
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
