"""Counter-based random streams, one per purpose.

Each named stream is a Philox generator keyed by (seed, name), so drawing
more numbers from one stream never shifts another.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import ParameterError
from .tensor import Tensor


def _key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(f"ganlab:{int(seed)}:{name}".encode()).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


class RngStream:
    def __init__(self, seed: int, name: str = "default"):
        self.seed = int(seed)
        self.name = name
        self.draws = 0
        self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, name)))

    @property
    def counter(self) -> int:
        """Philox block counter (low word); advances with every draw."""
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def uniform(self, lo, hi, shape) -> np.ndarray:
        if not lo < hi:
            raise ParameterError(f"uniform needs lo < hi, got [{lo}, {hi})")
        out = self._gen.uniform(lo, hi, size=shape)
        self.draws += out.size
        return out

    def normal(self, shape, std=1.0) -> np.ndarray:
        out = self._gen.standard_normal(size=shape) * std
        self.draws += out.size
        return out

    def integers(self, high, shape) -> np.ndarray:
        out = self._gen.integers(0, high, size=shape)
        self.draws += out.size
        return out

    def permutation(self, n) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def state_dict(self) -> dict:
        bg = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "name": self.name,
            "draws": self.draws,
            "counter": [int(v) for v in bg["state"]["counter"]],
            "key": [int(v) for v in bg["state"]["key"]],
            "buffer": [int(v) for v in bg["buffer"]],
            "buffer_pos": int(bg["buffer_pos"]),
            "has_uint32": int(bg["has_uint32"]),
            "uinteger": int(bg["uinteger"]),
        }

    def load_state_dict(self, state: dict):
        self.seed = int(state["seed"])
        self.name = state["name"]
        self.draws = int(state["draws"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }


class RngStreams:
    """Lazily created named streams sharing one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, RngStream] = {}

    def __getitem__(self, name: str) -> RngStream:
        if name not in self._streams:
            self._streams[name] = RngStream(self.seed, name)
        return self._streams[name]

    def draw_counts(self) -> dict:
        return {k: s.draws for k, s in self._streams.items()}

    def state_dict(self) -> dict:
        return {"seed": self.seed, "streams": {k: s.state_dict() for k, s in self._streams.items()}}

    def load_state_dict(self, state: dict):
        self.seed = int(state["seed"])
        self._streams = {}
        for name, st in state["streams"].items():
            stream = RngStream(self.seed, name)
            stream.load_state_dict(st)
            self._streams[name] = stream


def sample(rng: RngStream, dist: str, shape, lo=-1.0, hi=1.0) -> Tensor:
    """Draw a tensor of i.i.d. values: ``dist`` is "uniform" or "normal"."""
    if dist == "uniform":
        return Tensor(rng.uniform(lo, hi, shape))
    if dist == "normal":
        return Tensor(rng.normal(shape))
    raise ParameterError(f"unknown distribution {dist!r}")
