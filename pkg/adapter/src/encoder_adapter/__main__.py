"""Command line entry: run the bridge over HTTP (default) or stdio."""

from __future__ import annotations

import logging
import sys
import threading

from .config import build_arg_parser, config_from_args
from .server import BridgeServer


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    config = config_from_args(args)
    logging.basicConfig(level=logging.INFO, format="%(name)s %(levelname)s %(message)s")

    server = BridgeServer(config, coalesce_max=args.coalesce_max)
    try:
        if args.stdio:
            server.serve_stdio()
            return 0
        host, port = server.start_http(args.host, args.port)
        print(f"listening on http://{host}:{port} (dim={server.backend.dim})", flush=True)
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            pass
        return 0
    finally:
        server.close()


if __name__ == "__main__":
    sys.exit(main())
