"""Counter-based Gaussian noise keyed by (seed, chain_id, step, level).

Every random number is a pure function of its key, so chains can be simulated in
any order, on any number of workers, and replayed without storing paths. The key
maps onto a Philox generator: ``key = seed | stream << 64`` and
``counter = (0, level, step, block)`` with chains grouped in fixed-size blocks.
Draws are consumed as raw 64-bit words (exactly one per number), so the value a
chain receives depends only on its block and position, never on how many other
chains were requested.

Brownian increments are produced on the unit interval and refined by Brownian
bridges: resolution ``M`` is obtained from ``M / p`` (``p`` the smallest prime
factor of ``M``) by splitting every sub-increment into ``p`` pieces conditioned on
their sum. Resolutions on the same refinement chain (for example 1, 64 and 256)
are therefore the same path, and the fine pieces always sum to the coarse one.
"""

from enum import IntEnum
from functools import lru_cache
from typing import Dict, Iterable, Sequence

import numpy as np
from scipy.special import ndtri

from app.infrastructure.config import settings

_UNIT = 2.0**-53


class Stream(IntEnum):
    SAMPLER = 0
    REFERENCE = 1
    DIRECTIONS = 2
    RESAMPLE = 3


@lru_cache(maxsize=None)
def refinement_chain(resolution: int) -> tuple[int, ...]:
    """Resolutions visited when refining the unit increment up to ``resolution``."""
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    chain = [resolution]
    current = resolution
    while current > 1:
        current //= _smallest_prime_factor(current)
        chain.append(current)
    return tuple(reversed(chain))


def _smallest_prime_factor(n: int) -> int:
    factor = 2
    while factor * factor <= n:
        if n % factor == 0:
            return factor
        factor += 1
    return n


class NoiseSource:
    def __init__(
        self,
        seed: int,
        stream: Stream = Stream.SAMPLER,
        block_size: int = settings.CHAIN_BLOCK_SIZE,
    ):
        if block_size < 1:
            raise ValueError("block_size must be positive")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = Stream(stream)
        self.block_size = block_size
        self._key = self.seed | (int(self.stream) << 64)

    def uniforms(
        self, step: int, level: int, chain_ids: Sequence[int], width: int
    ) -> np.ndarray:
        """Open-interval uniforms of shape ``(len(chain_ids), width)``."""
        ids = np.asarray(chain_ids, dtype=np.int64)
        out = np.empty((ids.size, width), dtype=np.float64)
        if ids.size == 0:
            return out
        blocks = ids // self.block_size
        positions = ids % self.block_size
        for block in np.unique(blocks):
            mask = blocks == block
            bitgen = np.random.Philox(
                key=self._key,
                counter=np.array([0, level, step, block], dtype=np.uint64),
            )
            raw = bitgen.random_raw(self.block_size * width).reshape(
                self.block_size, width
            )
            picked = raw[positions[mask]]
            out[mask] = ((picked >> np.uint64(11)).astype(np.float64) + 0.5) * _UNIT
        return out

    def normals(
        self, step: int, level: int, chain_ids: Sequence[int], width: int
    ) -> np.ndarray:
        return ndtri(self.uniforms(step, level, chain_ids, width))

    def brownian_increments(
        self,
        step: int,
        chain_ids: Sequence[int],
        dimension: int,
        resolutions: Iterable[int] = (1,),
    ) -> Dict[int, np.ndarray]:
        """Unit-interval Brownian increments at each requested resolution.

        Returns ``{M: array (n_chains, M, dimension)}``; entries have variance
        ``1/M``. Scale by ``sqrt(gamma)`` for a step of length ``gamma``.
        """
        needed = sorted({m for r in resolutions for m in refinement_chain(int(r))})
        n = len(chain_ids)
        increments: Dict[int, np.ndarray] = {
            1: self.normals(step, 1, chain_ids, dimension).reshape(n, 1, dimension)
        }
        for resolution in needed[1:]:
            factor = _smallest_prime_factor(resolution)
            parent = increments[resolution // factor]
            eps = self.normals(
                step, resolution, chain_ids, resolution * dimension
            ).reshape(n, resolution // factor, factor, dimension) * np.sqrt(
                1.0 / resolution
            )
            bridged = (
                eps - eps.mean(axis=2, keepdims=True) + parent[:, :, None, :] / factor
            )
            increments[resolution] = bridged.reshape(n, resolution, dimension)
        return {int(r): increments[int(r)] for r in resolutions}
