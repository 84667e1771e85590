"""Bridge encoder service: a small JSON protocol server that hands text
embedding requests to a pluggable backend.

The shipped backend is a deterministic hash encoder, which keeps the
protocol fully testable without model weights; real encoders plug in by
implementing the Backend protocol in ``backend``.
"""

from .backend import Backend, HashBackend, load_backend
from .config import POOLING_MODES, AdapterConfig
from .protocol import PROTO_VERSION
from .server import BridgeServer, serve

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "Backend",
    "BridgeServer",
    "HashBackend",
    "POOLING_MODES",
    "PROTO_VERSION",
    "load_backend",
    "serve",
    "__version__",
]
