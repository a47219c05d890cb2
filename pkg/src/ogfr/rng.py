"""Splittable counter-based random streams.

Each :class:`Stream` wraps a Philox generator keyed by ``(seed, path)``.
Children are derived by appending keys to the path, so any component can get
an independent, reproducible stream without sharing mutable state.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


class Stream:
    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_key(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys) -> "Stream":
        return Stream(self.seed, self.path + tuple(_key(k) for k in keys))

    def __getattr__(self, name):
        # uniform, normal, integers, permutation, choice, ...
        if name == "gen":
            raise AttributeError(name)
        return getattr(self.gen, name)

    def get_state(self) -> dict:
        st = self.gen.bit_generator.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Stream":
        s = cls(state["seed"], tuple(state["path"]))
        s.gen.bit_generator.state = {
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
        return s
