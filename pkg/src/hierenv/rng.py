"""Named, counter-based random streams split from one master seed.

Each stream is a Philox generator keyed by ``(seed, crc32(name), *extra)``,
so streams are independent of one another and of creation order.  A stream
can be snapshotted and replayed, which is how the gradient checker holds
Gumbel noise and dropout masks fixed across perturbed evaluations.
"""
from __future__ import annotations

import copy
import zlib

import numpy as np

STREAMS = ("data", "split", "envs", "env.init", "env.batch", "env.gumbel", "inv.init", "inv.batch", "inv.dropout")


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_generator(seed: int, name: str, *extra: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name), *map(int, extra)))
    return np.random.Generator(np.random.Philox(seq))


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = make_generator(self.seed, name)
            self._streams[name] = gen
        return gen

    __getitem__ = get

    def derived(self, name: str, *index: int) -> np.random.Generator:
        """A fresh generator for a sub-task (e.g. one graph) that does not advance ``name``."""
        return make_generator(self.seed, name, *index)

    def snapshot(self) -> dict[str, dict]:
        return {name: copy.deepcopy(gen.bit_generator.state) for name, gen in self._streams.items()}

    def restore(self, snap: dict[str, dict]) -> None:
        for name in list(self._streams):
            if name not in snap:
                del self._streams[name]
        for name, state in snap.items():
            self.get(name).bit_generator.state = copy.deepcopy(state)
