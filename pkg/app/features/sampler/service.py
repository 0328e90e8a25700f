import logging
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.features.potentials.models import PotentialSpec, as_points
from app.features.potentials.service import evaluate_gradient, stepsize_guard
from app.features.sampler.models import (
    ChainEnsemble,
    CoupledEnsembleStats,
    CoupledRun,
    EnsembleCheckpoint,
    SynchronousPair,
    Trajectory,
)
from app.features.sampler.schemas import SamplerConfig
from app.infrastructure.config import settings
from app.infrastructure.errors import MissingCheckpoints, NonFinite, OnDiscontinuity
from app.infrastructure.errors import OutOfRange
from app.infrastructure.noise import NoiseSource

logger = logging.getLogger(__name__)


def _noise_coefficient(beta: float) -> float:
    return 0.0 if math.isinf(beta) else math.sqrt(2.0 / beta)


def _drift(spec: PotentialSpec, x: np.ndarray) -> np.ndarray:
    try:
        return evaluate_gradient(spec, x)
    except OnDiscontinuity as e:
        logger.warning(f"{e}; using the bounded tie-break convention")
        return spec.gradient(x, tie_break=True)


def _ula_update(
    spec: PotentialSpec, x: np.ndarray, gamma: float, z: np.ndarray, beta: float
) -> Tuple[np.ndarray, np.ndarray]:
    grad = _drift(spec, x)
    return x - gamma * grad + math.sqrt(gamma) * _noise_coefficient(beta) * z, grad


def ula_step(spec: PotentialSpec, x, gamma: float, z, beta: float) -> np.ndarray:
    """``x - gamma grad U(x) + sqrt(2 gamma / beta) z`` for one point or a batch."""
    x = np.asarray(x, dtype=np.float64)
    out, _ = _ula_update(spec, x, gamma, np.asarray(z, dtype=np.float64), beta)
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"{spec.name}: ULA step left the finite range (gamma={gamma})")
    return out


def check_stepsize(spec: PotentialSpec, gamma: float) -> bool:
    """Warn when ``gamma`` is outside the range the error bounds cover."""
    guard = stepsize_guard(spec)
    if gamma >= guard.convergence_bound:
        logger.warning(
            f"{spec.name}: gamma={gamma:g} is not below mu/(2L^2)="
            f"{guard.convergence_bound:g}; error bounds do not cover this stepsize"
        )
        return False
    return True


def _initial_states(spec: PotentialSpec, init, n_chains: int) -> np.ndarray:
    points, single = as_points(init, spec.dimension)
    if single:
        points = np.repeat(points, n_chains, axis=0)
    if points.shape[0] != n_chains:
        raise ValueError(f"need 1 or {n_chains} initial points, got {points.shape[0]}")
    if np.any(spec.on_discontinuity(points)):
        raise OnDiscontinuity(f"{spec.name}: initial condition on a discontinuity")
    return points.copy()


@dataclass
class StepRecord:
    step: int
    x_prev: np.ndarray  # coarse states at the start of the step
    grad_prev: np.ndarray  # drift frozen over the step
    dense: Optional[np.ndarray]  # unit-interval sub-increments (n, K, d)


class EnsembleStepper:
    """Advances a block of chains one grid step at a time on counter-based noise.

    Besides the coarse chain (stepsize ``gamma``) it can carry finer chains at
    stepsize ``gamma / M`` for every ``M`` in ``resolutions``; all of them
    consume the same Brownian path.
    """

    def __init__(
        self,
        spec: PotentialSpec,
        gamma: float,
        beta: float,
        seed: int,
        chain_ids: Sequence[int],
        init,
        resolutions: Iterable[int] = (1,),
        dense_resolution: Optional[int] = None,
        start_step: int = 0,
    ):
        self.spec = spec
        self.gamma = gamma
        self.beta = beta
        self.chain_ids = np.asarray(chain_ids, dtype=np.int64)
        self.noise = NoiseSource(seed)
        self.resolutions = tuple(sorted({1, *(int(m) for m in resolutions)}))
        self.dense_resolution = dense_resolution
        self.step = start_step
        x0 = _initial_states(spec, init, self.chain_ids.size)
        self.states: Dict[int, np.ndarray] = {m: x0.copy() for m in self.resolutions}

    @property
    def x(self) -> np.ndarray:
        return self.states[1]

    def advance(self, dense: bool = False) -> StepRecord:
        wanted = set(self.resolutions)
        if dense:
            if not self.dense_resolution:
                raise MissingCheckpoints("stepper was built without a dense resolution")
            wanted.add(self.dense_resolution)
        increments = self.noise.brownian_increments(
            self.step, self.chain_ids, self.spec.dimension, sorted(wanted)
        )
        x_prev = self.states[1]
        x_next, grad = _ula_update(
            self.spec, x_prev, self.gamma, increments[1][:, 0, :], self.beta
        )
        self._check(x_next, "coarse")
        self.states[1] = x_next
        for m in self.resolutions[1:]:
            x_fine = self.states[m]
            sub = self.gamma / m
            scaled = math.sqrt(m) * increments[m]
            for i in range(m):
                x_fine, _ = _ula_update(self.spec, x_fine, sub, scaled[:, i, :], self.beta)
            self._check(x_fine, f"fine(M={m})")
            self.states[m] = x_fine
        record = StepRecord(
            step=self.step,
            x_prev=x_prev,
            grad_prev=grad,
            dense=increments.get(self.dense_resolution) if dense else None,
        )
        self.step += 1
        return record

    def _check(self, x: np.ndarray, label: str) -> None:
        if not np.all(np.isfinite(x)):
            bad = self.chain_ids[~np.all(np.isfinite(x), axis=1)]
            raise NonFinite(
                f"{self.spec.name}: {label} chain(s) {bad[:5].tolist()} diverged "
                f"at step {self.step} (gamma={self.gamma:g})",
                step=self.step,
                chain=label,
            )


def substep_states(record: StepRecord, gamma: float, beta: float) -> np.ndarray:
    """Continuous interpolation at ``kappa + i gamma / K``, ``i = 0..K-1``.

    Returns ``(n, K, d)``; the drift is frozen at the step's left grid point.
    """
    if record.dense is None:
        raise MissingCheckpoints(f"step {record.step} has no dense sub-increments")
    k = record.dense.shape[1]
    offsets = gamma * np.arange(k) / k
    walk = np.cumsum(record.dense, axis=1) - record.dense  # W at the left nodes
    return (
        record.x_prev[:, None, :]
        - offsets[None, :, None] * record.grad_prev[:, None, :]
        + _noise_coefficient(beta) * math.sqrt(gamma) * walk
    )


def trajectory_window(
    trajectory: Trajectory, spec: PotentialSpec, steps: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Left grid states ``(m, d)`` and sub-grid interpolation ``(m, K, d)`` for ``steps``."""
    steps = list(steps)
    if not steps:
        raise MissingCheckpoints("trajectory has no dense checkpoints")
    anchors = trajectory.states[steps]
    dense = np.stack([trajectory.dense[n] for n in steps])
    record = StepRecord(
        step=steps[0],
        x_prev=anchors,
        grad_prev=_drift(spec, anchors),
        dense=dense,
    )
    return anchors, substep_states(record, trajectory.gamma, trajectory.beta)


# --- Chains ---


def _chain_ids(config: SamplerConfig, n_chains: int) -> np.ndarray:
    return config.chain_id + np.arange(n_chains, dtype=np.int64)


def run_ensemble(
    spec: PotentialSpec,
    config: SamplerConfig,
    init,
    n_chains: int = 1,
    record_every: Optional[int] = 1,
    chain_ids: Optional[Sequence[int]] = None,
    start_step: int = 0,
) -> ChainEnsemble:
    """Run independent chains; ``record_every=None`` keeps only initial and final states."""
    beta = config.resolved_beta(spec)
    check_stepsize(spec, config.gamma)
    ids = _chain_ids(config, n_chains) if chain_ids is None else np.asarray(chain_ids)
    stepper = EnsembleStepper(
        spec, config.gamma, beta, config.seed, ids, init, start_step=start_step
    )
    if record_every is None:
        steps = np.array([0, config.n_steps])
    else:
        steps = np.unique(np.r_[np.arange(0, config.n_steps + 1, record_every), config.n_steps])
    records = np.empty((ids.size, steps.size, spec.dimension))
    records[:, 0, :] = stepper.x
    slot = 1
    for n in range(1, config.n_steps + 1):
        stepper.advance()
        if slot < steps.size and steps[slot] == n:
            records[:, slot, :] = stepper.x
            slot += 1
    return ChainEnsemble(
        gamma=config.gamma,
        beta=beta,
        seed=config.seed,
        chain_ids=ids,
        record_steps=start_step + steps,
        states=records,
    )


def run_chain(
    spec: PotentialSpec,
    config: SamplerConfig,
    init,
    dense_steps: Optional[range] = None,
    dense_resolution: int = settings.DENSE_SUBSTEPS,
) -> Trajectory:
    """One chain, every grid state, dense sub-increments for ``dense_steps``."""
    beta = config.resolved_beta(spec)
    check_stepsize(spec, config.gamma)
    stepper = EnsembleStepper(
        spec,
        config.gamma,
        beta,
        config.seed,
        [config.chain_id],
        init,
        dense_resolution=dense_resolution,
    )
    states = np.empty((config.n_steps + 1, spec.dimension))
    states[0] = stepper.x[0]
    dense: Dict[int, np.ndarray] = {}
    wanted = dense_steps if dense_steps is not None else range(0)
    for n in range(config.n_steps):
        record = stepper.advance(dense=n in wanted)
        if record.dense is not None:
            dense[n] = record.dense[0]
        states[n + 1] = stepper.x[0]
    return Trajectory(
        chain_id=config.chain_id,
        gamma=config.gamma,
        beta=beta,
        states=states,
        dense=dense,
        dense_resolution=dense_resolution if dense else 0,
    )


def interpolate(trajectory: Trajectory, spec: PotentialSpec, t: float) -> np.ndarray:
    """Continuous interpolation ``X_t`` with the drift frozen at ``X_kappa(t)``.

    Between stored sub-grid nodes the Brownian path is replaced by its bridge mean.
    """
    horizon = trajectory.n_steps * trajectory.gamma
    if not 0.0 <= t <= horizon * (1 + 1e-12):
        raise OutOfRange(f"t={t} outside [0, {horizon}]")
    position = t / trajectory.gamma
    n = min(int(math.floor(position + 1e-9)), trajectory.n_steps)
    frac = position - n
    if n == trajectory.n_steps or abs(frac) <= 1e-9:
        return trajectory.states[n].copy()
    frac = max(frac, 0.0)
    if n not in trajectory.dense:
        raise MissingCheckpoints(f"no dense checkpoints for step {n}")
    sub = trajectory.dense[n]
    k = sub.shape[0]
    nodes = np.vstack([np.zeros((1, sub.shape[1])), np.cumsum(sub, axis=0)])
    node_pos = frac * k
    j = min(int(node_pos), k - 1)
    w = node_pos - j
    walk = (1 - w) * nodes[j] + w * nodes[j + 1]
    x_kappa = trajectory.states[n]
    grad = _drift(spec, x_kappa)
    return (
        x_kappa
        - frac * trajectory.gamma * grad
        + _noise_coefficient(trajectory.beta) * math.sqrt(trajectory.gamma) * walk
    )


# --- Couplings ---


def run_coupled(
    spec: PotentialSpec, config: SamplerConfig, init, refinement_M: int
) -> CoupledRun:
    """Coarse chain and a ``refinement_M``-times finer chain on one Brownian path."""
    if refinement_M < 1:
        raise ValueError("refinement_M must be at least 1")
    beta = config.resolved_beta(spec)
    check_stepsize(spec, config.gamma)
    m = refinement_M
    noise = NoiseSource(config.seed)
    ids = [config.chain_id]
    x0 = _initial_states(spec, init, 1)
    coarse = np.empty((config.n_steps + 1, spec.dimension))
    fine = np.empty((config.n_steps * m + 1, spec.dimension))
    coarse[0] = fine[0] = x0[0]
    xc, xf = x0.copy(), x0.copy()
    for n in range(config.n_steps):
        increments = noise.brownian_increments(n, ids, spec.dimension, (1, m))
        # coarse increment is the sum of the fine ones
        unit = increments[m].sum(axis=1) if m > 1 else increments[1][:, 0, :]
        xc, _ = _ula_update(spec, xc, config.gamma, unit, beta)
        if not np.all(np.isfinite(xc)):
            raise NonFinite(f"coarse chain diverged at step {n}", step=n, chain="coarse")
        coarse[n + 1] = xc[0]
        for i in range(m):
            xf, _ = _ula_update(
                spec, xf, config.gamma / m, math.sqrt(m) * increments[m][:, i, :], beta
            )
            fine[n * m + i + 1] = xf[0]
        if not np.all(np.isfinite(xf)):
            raise NonFinite(f"fine chain diverged at step {n}", step=n, chain="fine")
    errors = np.linalg.norm(fine[::m] - coarse, axis=1)
    return CoupledRun(
        coarse=Trajectory(config.chain_id, config.gamma, beta, coarse),
        fine=Trajectory(config.chain_id, config.gamma / m, beta, fine),
        refinement=m,
        errors=errors,
    )


def run_coupled_ensemble(
    spec: PotentialSpec,
    config: SamplerConfig,
    init,
    resolutions: Sequence[int],
    chain_ids: Sequence[int],
) -> CoupledEnsembleStats:
    """Streaming pairwise errors between resolutions over ``config.n_steps`` steps."""
    beta = config.resolved_beta(spec)
    stepper = EnsembleStepper(
        spec, config.gamma, beta, config.seed, chain_ids, init, resolutions=resolutions
    )
    levels = stepper.resolutions
    pairs = list(combinations(levels, 2))
    n = len(chain_ids)
    sup_error = {p: np.zeros(n) for p in pairs}
    mean_square = {p: np.zeros(config.n_steps + 1) for p in pairs}
    for step in range(config.n_steps):
        stepper.advance()
        for a, b in pairs:
            err = np.linalg.norm(stepper.states[b] - stepper.states[a], axis=1)
            np.maximum(sup_error[(a, b)], err, out=sup_error[(a, b)])
            mean_square[(a, b)][step + 1] = np.mean(err**2)
    return CoupledEnsembleStats(
        resolutions=levels, n_chains=n, sup_error=sup_error, mean_square=mean_square
    )


def run_synchronous_ensemble(
    spec: PotentialSpec,
    config: SamplerConfig,
    init_a,
    init_b,
    chain_ids: Sequence[int],
    record_states: bool = False,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Pairs of chains driven by identical noise; returns distances ``(n, n_steps+1)``."""
    beta = config.resolved_beta(spec)
    ids = np.asarray(chain_ids, dtype=np.int64)
    n = ids.size
    a0 = _initial_states(spec, init_a, n)
    b0 = _initial_states(spec, init_b, n)
    stepper = EnsembleStepper(
        spec, config.gamma, beta, config.seed, np.r_[ids, ids], np.vstack([a0, b0])
    )
    distances = np.empty((n, config.n_steps + 1))
    states = np.empty((2 * n, config.n_steps + 1, spec.dimension)) if record_states else None
    distances[:, 0] = np.linalg.norm(a0 - b0, axis=1)
    if states is not None:
        states[:, 0] = stepper.x
    for step in range(config.n_steps):
        stepper.advance()
        x = stepper.x
        distances[:, step + 1] = np.linalg.norm(x[:n] - x[n:], axis=1)
        if states is not None:
            states[:, step + 1] = x
    return distances, states


def run_synchronous_pair(
    spec: PotentialSpec, config: SamplerConfig, init_a, init_b
) -> SynchronousPair:
    check_stepsize(spec, config.gamma)
    beta = config.resolved_beta(spec)
    distances, states = run_synchronous_ensemble(
        spec, config, init_a, init_b, [config.chain_id], record_states=True
    )
    return SynchronousPair(
        first=Trajectory(config.chain_id, config.gamma, beta, states[0]),
        second=Trajectory(config.chain_id, config.gamma, beta, states[1]),
        distances=distances[0],
    )


def reference_consistency(
    spec: PotentialSpec,
    config: SamplerConfig,
    init,
    n_chains: int,
    reference_M: int = settings.REFERENCE_REFINEMENT,
    check_M: int = settings.CONSISTENCY_REFINEMENT,
) -> CoupledEnsembleStats:
    """Coarse chain, ``reference_M`` and ``check_M`` references on one shared path.

    The ``(reference_M, check_M)`` entry measures how far the working reference
    is from a finer one; it must be small next to ``(1, reference_M)``.
    """
    return run_coupled_ensemble(
        spec, config, init, (1, reference_M, check_M), _chain_ids(config, n_chains)
    )


# --- Trajectory I/O ---


def dump_trajectories_csv(ensemble: ChainEnsemble, path: Union[str, Path]) -> Path:
    """Columns ``chain_id, step, t, x0..x{d-1}``, one row per chain and recorded step."""
    n_chains, n_records, dimension = ensemble.states.shape
    frame = pd.DataFrame(
        {
            "chain_id": np.repeat(ensemble.chain_ids, n_records),
            "step": np.tile(ensemble.record_steps, n_chains),
            "t": np.tile(ensemble.record_steps * ensemble.gamma, n_chains),
        }
    )
    flat = ensemble.states.reshape(n_chains * n_records, dimension)
    for j in range(dimension):
        frame[f"x{j}"] = flat[:, j]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


# Binary checkpoint, all fields little-endian:
#   magic     8 bytes  b"ULACKPT1"
#   seed      u64
#   gamma     f64
#   beta      f64 (inf for the noiseless chain)
#   step      u64      grid index of the stored states
#   n_chains  u32
#   dimension u32
#   chain_ids i64[n_chains]
#   states    f64[n_chains, dimension], row-major
CHECKPOINT_MAGIC = b"ULACKPT1"
_HEADER = np.dtype(
    [
        ("magic", "S8"),
        ("seed", "<u8"),
        ("gamma", "<f8"),
        ("beta", "<f8"),
        ("step", "<u8"),
        ("n_chains", "<u4"),
        ("dimension", "<u4"),
    ]
)


def checkpoint_of(ensemble: ChainEnsemble) -> EnsembleCheckpoint:
    return EnsembleCheckpoint(
        seed=ensemble.seed,
        gamma=ensemble.gamma,
        beta=ensemble.beta,
        step=int(ensemble.record_steps[-1]),
        chain_ids=np.asarray(ensemble.chain_ids, dtype=np.int64),
        states=ensemble.terminal.copy(),
    )


def save_checkpoint(checkpoint: EnsembleCheckpoint, path: Union[str, Path]) -> Path:
    states = np.asarray(checkpoint.states, dtype="<f8")
    header = np.zeros(1, dtype=_HEADER)
    header[0] = (
        CHECKPOINT_MAGIC,
        checkpoint.seed,
        checkpoint.gamma,
        checkpoint.beta,
        checkpoint.step,
        states.shape[0],
        states.shape[1],
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(header.tobytes())
        f.write(np.asarray(checkpoint.chain_ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(states).tobytes())
    logger.info(f"checkpoint at step {checkpoint.step} written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> EnsembleCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.itemsize:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = np.frombuffer(data, dtype=_HEADER, count=1)[0]
    if header["magic"] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a ULA checkpoint")
    n, d = int(header["n_chains"]), int(header["dimension"])
    offset = _HEADER.itemsize
    expected = offset + 8 * n + 8 * n * d
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    chain_ids = np.frombuffer(data, dtype="<i8", count=n, offset=offset)
    states = np.frombuffer(data, dtype="<f8", count=n * d, offset=offset + 8 * n)
    return EnsembleCheckpoint(
        seed=int(header["seed"]),
        gamma=float(header["gamma"]),
        beta=float(header["beta"]),
        step=int(header["step"]),
        chain_ids=chain_ids.astype(np.int64),
        states=states.reshape(n, d).astype(np.float64),
    )


def resume_ensemble(
    spec: PotentialSpec,
    checkpoint: EnsembleCheckpoint,
    n_steps: int,
    record_every: Optional[int] = 1,
) -> ChainEnsemble:
    """Continue ``n_steps`` more steps; identical to never having stopped."""
    config = SamplerConfig(
        gamma=checkpoint.gamma,
        n_steps=n_steps,
        seed=checkpoint.seed,
        beta=checkpoint.beta,
    )
    return run_ensemble(
        spec,
        config,
        checkpoint.states,
        n_chains=checkpoint.chain_ids.size,
        record_every=record_every,
        chain_ids=checkpoint.chain_ids,
        start_step=checkpoint.step,
    )
