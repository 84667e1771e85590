"""Embedding backends.

The reference backend hashes tokens to fixed random directions and runs a
causal recurrence over them, so it is deterministic, needs no weights on
disk, and has the one property the bridge protocol's dual-mark requests
rely on: the state at any prefix boundary depends only on the prefix.
Real model wrappers plug in by implementing the same three methods.
"""

from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np


class Backend(Protocol):
    dim: int

    def token_count(self, text: str) -> int: ...

    def encode_plain(self, texts: Sequence[str], pooling: str) -> list[np.ndarray]: ...

    def encode_dual(
        self, items: Sequence[tuple[str, tuple[int, int]]], pooling: str
    ) -> list[tuple[np.ndarray, np.ndarray]]: ...


class HashBackend:
    """Deterministic hashed-token encoder with causal state.

    Every token maps to a fixed unit direction drawn from a hash-seeded
    generator; the running state is h_i = v_i + decay * h_(i-1). Pooling
    "last-token" takes the final state, "mean" averages all states, and
    "dual-eos" behaves as last-token for plain text. Because the recurrence
    is causal, pooling a prefix of a longer sequence gives bitwise the same
    vector as pooling that prefix encoded alone.
    """

    def __init__(self, dim: int, seed: int = 0, decay: float = 0.5):
        if dim < 2:
            raise ValueError(f"dim must be >= 2, got {dim}")
        self.dim = dim
        self.seed = seed
        self.decay = decay
        self._directions: dict[str, np.ndarray] = {}

    def token_count(self, text: str) -> int:
        return len(text.split())

    def _direction(self, token: str) -> np.ndarray:
        vec = self._directions.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            raw = rng.standard_normal(self.dim)
            vec = raw / np.linalg.norm(raw)
            self._directions[token] = vec
        return vec

    def _states(self, tokens: Sequence[str]) -> list[np.ndarray]:
        state = np.zeros(self.dim)
        out = []
        for token in tokens:
            state = self._direction(token) + self.decay * state
            out.append(state)
        return out

    def _pool(self, states: Sequence[np.ndarray], pooling: str) -> np.ndarray:
        if not states:
            # empty input: a fixed direction, so callers always get a vector
            return self._direction("").copy()
        if pooling == "mean":
            return np.mean(states, axis=0)
        return states[-1].copy()

    def encode_plain(self, texts: Sequence[str], pooling: str) -> list[np.ndarray]:
        return [self._pool(self._states(text.split()), pooling) for text in texts]

    def encode_dual(
        self, items: Sequence[tuple[str, tuple[int, int]]], pooling: str
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        """Two vectors per item: one at each mark of the rendered text.

        The text is tokenized in two slices, [0, mark0) and [mark0, mark1),
        so the prefix token stream is exactly the chunk's own and the first
        pooled vector equals encode_plain of the chunk under any pooling.
        Text beyond the second mark (the trailing sentinel) is not encoded.
        """
        out = []
        for text, (mark0, mark1) in items:
            prefix_tokens = text[:mark0].split()
            rest_tokens = text[mark0:mark1].split()
            states = self._states(prefix_tokens + rest_tokens)
            first = self._pool(states[: len(prefix_tokens)], pooling)
            second = self._pool(states, pooling)
            out.append((first, second))
        return out


def load_backend(model: str, device: str = "cpu") -> Backend:
    """Resolve a model identifier to a backend instance.

    "hash:<dim>" is the built-in reference backend. Wrappers for transformer
    checkpoints implement the Backend protocol and register their own id
    scheme; none ship here because this package carries no model weights.
    """
    if model.startswith("hash:"):
        if device != "cpu":
            raise ValueError(f"hash backend runs on cpu only, got device {device!r}")
        try:
            dim = int(model.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad hash model id {model!r}, expected hash:<dim>") from None
        return HashBackend(dim)
    raise ValueError(
        f"unknown model id {model!r}; this build ships the hash:<dim> reference backend"
    )
