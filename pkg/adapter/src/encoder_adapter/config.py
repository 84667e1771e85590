"""Adapter configuration and the startup flags that mirror it."""

from __future__ import annotations

import argparse
from dataclasses import dataclass

POOLING_MODES = ("mean", "last-token", "dual-eos")

DEFAULT_MODEL = "hash:64"
DEFAULT_MAX_INPUT_LENGTH = 8192


@dataclass(frozen=True)
class AdapterConfig:
    """What to serve and how to pool it.

    pooling picks how plain-text requests are reduced to one vector; the
    "dual-eos" value means the model family extracts at terminal marks, which
    for plain requests degrades to last-token. Dual-eos requests are always
    answered at their marks regardless of this setting.
    """

    model: str = DEFAULT_MODEL
    device: str = "cpu"
    max_input_length: int = DEFAULT_MAX_INPUT_LENGTH
    pooling: str = "mean"
    normalize: bool = True

    def __post_init__(self) -> None:
        if not self.model:
            raise ValueError("model must be non-empty")
        if self.max_input_length < 1:
            raise ValueError(f"max_input_length must be >= 1, got {self.max_input_length}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encoder-adapter",
        description="Serve the encoder bridge protocol over HTTP or stdio.",
    )
    parser.add_argument("--model", default=DEFAULT_MODEL,
                        help="model identifier, e.g. hash:64 (default: %(default)s)")
    parser.add_argument("--device", default="cpu",
                        help="compute device (default: %(default)s)")
    parser.add_argument("--max-input-length", type=int, default=DEFAULT_MAX_INPUT_LENGTH,
                        help="reject items longer than this many tokens (default: %(default)s)")
    parser.add_argument("--pooling", choices=POOLING_MODES, default="mean",
                        help="pooling for plain-text requests (default: %(default)s)")
    parser.add_argument("--no-normalize", action="store_true",
                        help="emit raw pooled vectors instead of unit vectors")
    parser.add_argument("--host", default="127.0.0.1",
                        help="HTTP bind address (default: %(default)s)")
    parser.add_argument("--port", type=int, default=8632,
                        help="HTTP port; 0 picks a free one (default: %(default)s)")
    parser.add_argument("--stdio", action="store_true",
                        help="serve newline-framed JSON on stdin/stdout instead of HTTP")
    parser.add_argument("--coalesce-max", type=int, default=8,
                        help="max concurrent requests merged into one model call (default: %(default)s)")
    return parser


def config_from_args(args: argparse.Namespace) -> AdapterConfig:
    return AdapterConfig(
        model=args.model,
        device=args.device,
        max_input_length=args.max_input_length,
        pooling=args.pooling,
        normalize=not args.no_normalize,
    )
