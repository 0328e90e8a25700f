from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np


@dataclass
class Trajectory:
    """One chain at its grid times, plus Brownian sub-increments for dense steps.

    ``dense[n]`` holds the unit-interval increments (shape ``(K, d)``, variance
    ``1/K`` each) of step ``n``; they sum to the step's own increment.
    """

    chain_id: int
    gamma: float
    beta: float
    states: np.ndarray  # (n_steps + 1, d)
    dense: Dict[int, np.ndarray] = field(default_factory=dict)
    dense_resolution: int = 0

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.gamma * np.arange(self.n_steps + 1)


@dataclass
class ChainEnsemble:
    """Independent chains sharing a config except for their ``chain_id``."""

    gamma: float
    beta: float
    seed: int
    chain_ids: np.ndarray  # (n_chains,)
    record_steps: np.ndarray  # (n_records,)
    states: np.ndarray  # (n_chains, n_records, d)

    @property
    def n_chains(self) -> int:
        return self.chain_ids.size

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def trajectories(self) -> Iterator[Trajectory]:
        if not np.array_equal(self.record_steps, np.arange(self.record_steps.size)):
            raise ValueError("only fully recorded ensembles split into trajectories")
        for i, chain_id in enumerate(self.chain_ids):
            yield Trajectory(
                chain_id=int(chain_id),
                gamma=self.gamma,
                beta=self.beta,
                states=self.states[i],
            )


@dataclass
class CoupledRun:
    """Coarse (stepsize gamma) and fine (gamma / M) chains on one Brownian path."""

    coarse: Trajectory
    fine: Trajectory
    refinement: int
    errors: np.ndarray  # |fine - coarse| at the coarse grid times, (n_steps + 1,)


@dataclass
class CoupledEnsembleStats:
    """Streaming error statistics of several resolutions sharing each chain's path.

    Keys are resolution pairs ``(a, b)`` with ``a < b``.
    """

    resolutions: Tuple[int, ...]
    n_chains: int
    sup_error: Dict[Tuple[int, int], np.ndarray]  # (n_chains,) max over grid of |e|
    mean_square: Dict[Tuple[int, int], np.ndarray]  # (n_steps + 1,) E|e_t|^2

    def mean_sup(self, pair: Tuple[int, int]) -> float:
        return float(np.mean(self.sup_error[pair]))

    def sup_l2(self, pair: Tuple[int, int]) -> float:
        return float(np.sqrt(np.max(self.mean_square[pair])))


@dataclass
class SynchronousPair:
    first: Trajectory
    second: Trajectory
    distances: np.ndarray  # (n_steps + 1,)


@dataclass
class EnsembleCheckpoint:
    """State needed to continue an ensemble bit-identically."""

    seed: int
    gamma: float
    beta: float
    step: int
    chain_ids: np.ndarray
    states: np.ndarray  # (n_chains, d)
