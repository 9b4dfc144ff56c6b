"""Command line interface: serve a weights bundle or fine-tune one."""

from __future__ import annotations

import argparse
import sys

from .service import ServerConfig, serve
from .training import TrainSettings, finetune


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudattack-server")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="serve a trained weights bundle")
    p.add_argument("--weights", required=True)
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--deterministic", action="store_true", default=True)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("finetune", help="fine-tune the backbone on a dataset tree")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--pretrained", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)
    return parser


def cmd_serve(args):
    serve(ServerConfig(weights=args.weights, port=args.port, host=args.host,
                       deterministic=args.deterministic))


def cmd_finetune(args):
    summary = finetune(args.dataset, args.out, TrainSettings(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        input_size=args.input_size, pretrained=args.pretrained, seed=args.seed))
    print(f"saved weights bundle to {args.out}; "
          f"held-out accuracy {summary['holdout_accuracy']:.3f}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
