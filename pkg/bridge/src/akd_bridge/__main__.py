"""Command line entry point: serve the guidance protocol over TCP or stdio."""

import argparse
import sys

from .server import BridgeConfig, serve_stdio, serve_tcp
from .stubs import ALPHA_CEIL, ALPHA_FLOOR, PREDICTORS


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="akd_bridge",
        description="Out-of-process velocity guidance server for distillation clients.",
    )
    parser.add_argument("--port", type=int, default=None,
                        help="TCP port to listen on; 0 picks a free one")
    parser.add_argument("--host", default="127.0.0.1", help="bind address")
    parser.add_argument("--stdio", action="store_true",
                        help="serve one session over stdin/stdout instead of TCP")
    parser.add_argument("--predictor", choices=PREDICTORS, default="oracle",
                        help="which stub answers requests")
    parser.add_argument("--latent", action="store_true",
                        help="assemble sds_grad responses in 2x2-pooled latent space")
    parser.add_argument("--alpha-floor", type=float, default=ALPHA_FLOOR)
    parser.add_argument("--alpha-ceil", type=float, default=ALPHA_CEIL)
    args = parser.parse_args(argv)
    if args.stdio == (args.port is not None):
        parser.error("pick exactly one transport: --stdio or --port N")
    config = BridgeConfig(
        predictor=args.predictor,
        host=args.host,
        port=0 if args.port is None else args.port,
        stdio=args.stdio,
        latent=args.latent,
        alpha_floor=args.alpha_floor,
        alpha_ceil=args.alpha_ceil,
    )
    if config.stdio:
        serve_stdio(config)
    else:
        try:
            serve_tcp(config, announce=lambda line: print(line, flush=True))
        except KeyboardInterrupt:
            pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
