"""Backstepping-imitation dataset: generation, shuffling and the binary file format.

File layout (little endian)::

    "PDDS" | version u16 | kind u8 | n u32 | count u64 | seed u64
    | gamma_lo f64 | gamma_hi f64 | max|U| f64
    | count x (coeff f64 x n, state f64 x n, target f64)
    | checksum u64 (sum of all preceding bytes)
"""

from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backstepping import BacksteppingController, backstepping_control, solve_kernel
from .errors import DatasetFormatError, EnvironmentFault, InvalidArgumentError, NumericalFailureError
from .numerics import Grid, Rng, derive_seed
from .pde_env import (GAMMA_RANGE, HORIZON, KINDS, SAMPLE_EVERY, CoefficientFn, check_kind,
                      sample_coefficient, simulate)

log = logging.getLogger(__name__)

MAGIC = b"PDDS"
VERSION = 1
_HEADER = struct.Struct("<4sHBIQQddd")
_KIND_CODE = {kind: i for i, kind in enumerate(KINDS)}
_CHUNK = 20000

# stream labels for derive_seed
_COEFF_STREAM = 0
_INIT_STREAM = 1


@dataclass
class DatasetFile:
    kind: str
    coeff: np.ndarray
    state: np.ndarray
    target: np.ndarray
    seed: int = 0
    gamma_range: tuple = (0.0, 0.0)
    max_abs_control: float = 0.0
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        check_kind(self.kind)
        m = self.target.shape[0]
        if self.coeff.shape[0] != m or self.state.shape[0] != m:
            raise InvalidArgumentError("coefficient, state and target counts differ")
        if self.coeff.shape[1:] != self.state.shape[1:]:
            raise InvalidArgumentError("coefficient and state widths differ")

    @property
    def count(self) -> int:
        return int(self.target.shape[0])

    @property
    def n_points(self) -> int:
        return int(self.state.shape[1])

    def subset(self, index) -> "DatasetFile":
        return DatasetFile(self.kind, self.coeff[index], self.state[index], self.target[index],
                           self.seed, self.gamma_range, self.max_abs_control)


@dataclass(frozen=True)
class GenerationPlan:
    kind: str
    n_coeffs: int = 100
    n_inits: int = 60
    n_points: int = 101
    dt: float = 1e-3
    horizon: float | None = None
    sample_every: int | None = None
    gamma_range: tuple | None = None
    u0_range: tuple = (1.0, 10.0)

    def __post_init__(self):
        check_kind(self.kind)
        if self.horizon is None:
            object.__setattr__(self, "horizon", HORIZON[self.kind])
        if self.sample_every is None:
            object.__setattr__(self, "sample_every", SAMPLE_EVERY[self.kind])
        if self.gamma_range is None:
            object.__setattr__(self, "gamma_range", GAMMA_RANGE[self.kind])
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise InvalidArgumentError(f"invalid gamma range {self.gamma_range}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def samples_per_rollout(self) -> int:
        # recorded at steps 0, every, 2*every, ... strictly before the horizon
        return -(-self.n_steps // self.sample_every)

    @property
    def n_rollouts(self) -> int:
        return self.n_coeffs * self.n_inits

    @property
    def n_samples(self) -> int:
        return self.n_rollouts * self.samples_per_rollout


def coefficient_gamma(plan: GenerationPlan, seed: int, index: int) -> float:
    lo, hi = plan.gamma_range
    if lo == hi:
        return lo
    return float(Rng(derive_seed(seed, _COEFF_STREAM, index)).uniform(lo, hi))


def initial_level(plan: GenerationPlan, seed: int, rollout: int) -> float:
    return float(Rng(derive_seed(seed, _INIT_STREAM, rollout)).uniform(*plan.u0_range))


class _MaxTracker:
    def __init__(self, controller):
        self.controller = controller
        self.max_abs = 0.0

    def __call__(self, values):
        u = self.controller(values)
        self.max_abs = max(self.max_abs, float(np.max(np.abs(u))))
        return u


def generate_coefficient_block(plan: GenerationPlan, seed: int, index: int):
    """All rollouts for coefficient ``index``.

    Returns ``(coeff_samples, states, targets, max_abs_control)`` with samples
    ordered by rollout then time, or raises :class:`NumericalFailureError` when
    the kernel does not converge.
    """
    grid = Grid(plan.n_points)
    gamma = coefficient_gamma(plan, seed, index)
    coeff = sample_coefficient(plan.kind, gamma, grid)
    kernel = solve_kernel(coeff, grid)
    rollouts = range(index * plan.n_inits, (index + 1) * plan.n_inits)
    levels = np.array([initial_level(plan, seed, r) for r in rollouts])
    u0 = levels[:, None] * np.ones(plan.n_points)
    tracker = _MaxTracker(BacksteppingController(kernel, grid.dx))
    n_record = plan.samples_per_rollout
    _, states, controls = simulate(coeff, u0, (n_record - 1) * plan.sample_every, plan.dt,
                                   controller=tracker, record_every=plan.sample_every)
    # the tail of the rollout after the last recorded sample still counts for max|U|
    tail = plan.n_steps - (n_record - 1) * plan.sample_every
    if tail > 1:
        simulate(coeff, states[-1], tail - 1, plan.dt, controller=tracker)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(controls))):
        bad = int(np.argmax(~np.all(np.isfinite(states), axis=(0, 2))))
        raise EnvironmentFault(f"rollout {rollouts[bad]} produced a non-finite state")
    # (time, rollout, n) -> (rollout, time, n)
    states = np.ascontiguousarray(states.transpose(1, 0, 2)).reshape(-1, plan.n_points)
    targets = np.ascontiguousarray(controls.T).reshape(-1)
    coeffs = np.broadcast_to(coeff.samples, states.shape).copy()
    return coeffs, states, targets, tracker.max_abs


def _block_or_skip(args):
    plan, seed, index = args
    try:
        return generate_coefficient_block(plan, seed, index)
    except NumericalFailureError as exc:
        return exc


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("PDECTRL_THREADS")
    if env:
        return max(1, int(env))
    return 1


def generate_dataset(plan: GenerationPlan, seed: int, workers: int | None = None) -> DatasetFile:
    """Closed-loop backstepping rollouts for every (coefficient, initial level) pair.

    Per-coefficient and per-rollout seeds derive from ``seed`` alone, so the
    result is independent of ``workers``.
    """
    jobs = [(plan, seed, i) for i in range(plan.n_coeffs)]
    workers = worker_count(workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_block_or_skip, jobs))
    else:
        blocks = [_block_or_skip(job) for job in jobs]
    coeffs, states, targets, skipped = [], [], [], []
    max_abs = 0.0
    for i, block in enumerate(blocks):
        if isinstance(block, Exception):
            gamma = coefficient_gamma(plan, seed, i)
            log.warning("skipping coefficient %d (gamma=%.6f): %s", i, gamma, block)
            skipped.append((i, gamma))
            continue
        c, s, t, m = block
        coeffs.append(c)
        states.append(s)
        targets.append(t)
        max_abs = max(max_abs, m)
    n = plan.n_points
    return DatasetFile(
        plan.kind,
        np.concatenate(coeffs) if coeffs else np.zeros((0, n)),
        np.concatenate(states) if states else np.zeros((0, n)),
        np.concatenate(targets) if targets else np.zeros(0),
        seed, tuple(plan.gamma_range), max_abs, skipped)


def shuffle_split(dataset: DatasetFile, ratio: float = 0.9, rng: Rng | None = None):
    """Uniform permutation, then the first ``round(ratio * count)`` go to training."""
    if dataset.count == 0:
        raise InvalidArgumentError("cannot split an empty dataset")
    if not 0.0 <= ratio <= 1.0:
        raise InvalidArgumentError(f"split ratio must be in [0, 1], got {ratio}")
    rng = rng or Rng(dataset.seed)
    perm = rng.permutation(dataset.count)
    n_train = int(round(ratio * dataset.count))
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


def verify_targets(dataset: DatasetFile) -> float:
    """Largest ``|stored - recomputed| / max(1, |stored|)`` over the dataset.

    Kernels are re-solved from the stored coefficient samples, one per
    distinct coefficient.
    """
    grid = Grid(dataset.n_points)
    groups: dict = {}
    for i in range(dataset.count):
        groups.setdefault(dataset.coeff[i].tobytes(), []).append(i)
    worst = 0.0
    for rows in groups.values():
        rows = np.array(rows)
        coeff = CoefficientFn(dataset.kind, 0.0, dataset.coeff[rows[0]].copy())
        kernel = solve_kernel(coeff, grid)
        recomputed = backstepping_control(kernel, dataset.state[rows], grid.dx)
        stored = dataset.target[rows]
        err = np.abs(recomputed - stored) / np.maximum(1.0, np.abs(stored))
        worst = max(worst, float(err.max()))
    return worst


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("coeff", "<f8", (n,)), ("state", "<f8", (n,)), ("target", "<f8")])


def _byte_sum(data) -> int:
    return int(np.frombuffer(data, dtype=np.uint8).sum(dtype=np.uint64))


def dataset_write(dataset: DatasetFile, path) -> None:
    n = dataset.n_points
    lo, hi = dataset.gamma_range
    header = _HEADER.pack(MAGIC, VERSION, _KIND_CODE[dataset.kind], n, dataset.count,
                          int(dataset.seed) & 0xFFFFFFFFFFFFFFFF, lo, hi,
                          dataset.max_abs_control)
    dtype = _record_dtype(n)
    total = _byte_sum(header)
    with open(path, "wb") as fh:
        fh.write(header)
        for start in range(0, dataset.count, _CHUNK):
            stop = min(start + _CHUNK, dataset.count)
            rec = np.empty(stop - start, dtype=dtype)
            rec["coeff"] = dataset.coeff[start:stop]
            rec["state"] = dataset.state[start:stop]
            rec["target"] = dataset.target[start:stop]
            raw = rec.tobytes()
            total += _byte_sum(raw)
            fh.write(raw)
        fh.write(struct.pack("<Q", total & 0xFFFFFFFFFFFFFFFF))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, kind, n, count, seed, lo, hi, max_u = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version: expected {VERSION}, found {version}")
    if kind >= len(KINDS):
        raise DatasetFormatError(f"{path}: unknown benchmark code {kind}")
    return {"kind": KINDS[kind], "n_points": n, "count": count, "seed": seed,
            "gamma_range": (lo, hi), "max_abs_control": max_u}


def dataset_read(path) -> DatasetFile:
    path = Path(path)
    head = read_header(path)
    n, count = head["n_points"], head["count"]
    dtype = _record_dtype(n)
    expected = _HEADER.size + count * dtype.itemsize + 8
    size = path.stat().st_size
    if size != expected:
        raise DatasetFormatError(
            f"{path}: header declares {count} samples ({expected} bytes) but file has {size} bytes")
    total = 0
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        total += _byte_sum(header)
        coeff = np.empty((count, n))
        state = np.empty((count, n))
        target = np.empty(count)
        for start in range(0, count, _CHUNK):
            stop = min(start + _CHUNK, count)
            raw = fh.read((stop - start) * dtype.itemsize)
            total += _byte_sum(raw)
            rec = np.frombuffer(raw, dtype=dtype)
            coeff[start:stop] = rec["coeff"]
            state[start:stop] = rec["state"]
            target[start:stop] = rec["target"]
        (stored,) = struct.unpack("<Q", fh.read(8))
    if stored != total & 0xFFFFFFFFFFFFFFFF:
        raise DatasetFormatError(f"{path}: checksum mismatch")
    return DatasetFile(head["kind"], coeff, state, target, head["seed"],
                       head["gamma_range"], head["max_abs_control"])
