"""Multilevel eigenwise-parallel driver.

Step 1 solves a dense eigenproblem on the first refined level; step 2 runs,
for every eigenpair independently, one sweep of correction steps per
intermediate level and ``finest_steps`` corrections on the finest level.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assembly import LevelOperators, ProblemCoefficients, build_level_operators
from .augmented import (
    CoarseData,
    EigenPairState,
    algebraic_residual,
    build_coarse_data,
    correction_step,
)
from .linalg import (
    DenseEigenResult,
    NumericalError,
    OpCounter,
    energy_products,
    solve_gevp_dense,
    spmv,
)
from .mesh import build_hierarchy
from .multigrid import MgConfig, measure_contraction

log = logging.getLogger(__name__)

PROBLEMS = ("laplace2d", "laplace3d", "variable_coeff", "harmonic_box")
DEFAULT_DENSE_CAP = 4000
DEFAULT_MAX_DOFS = 2_000_000
CLUSTER_TOL = 1e-6


class ConfigError(ValueError):
    pass


class DenseCapError(ValueError):
    pass


def default_box(problem: str) -> tuple:
    if problem == "laplace2d":
        return ((0.0, 1.0), (0.0, 1.0))
    if problem == "harmonic_box":
        return ((-4.0, 4.0),) * 3
    return ((0.0, 1.0),) * 3


@dataclass
class SolverConfig:
    problem: str = "laplace2d"
    box: tuple | None = None
    divisions: int = 4
    levels: int = 4
    eigenpairs: int = 1
    coarse_steps: int = 1
    finest_steps: int = 1
    mg: MgConfig = field(default_factory=MgConfig)
    workers: int | None = None
    max_dofs: int = DEFAULT_MAX_DOFS
    dense_cap: int = DEFAULT_DENSE_CAP
    first_level: int = 1
    shift_invert: bool = False

    def __post_init__(self):
        if self.box is None:
            self.box = default_box(self.problem)
        self.box = tuple(tuple(float(v) for v in pair) for pair in self.box)

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def h1_level(self) -> int:
        """Mesh level holding V_{h_1}; level 0 carries V_H."""
        return min(self.first_level, self.levels - 1)

    def h1_dofs(self) -> int:
        return (self.divisions * 2 ** self.h1_level - 1) ** self.dim

    def coarse_dofs(self) -> int:
        return (self.divisions - 1) ** self.dim

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; expected one of {', '.join(PROBLEMS)}")
        if self.dim not in (2, 3):
            raise ConfigError(f"box must have 2 or 3 axes, got {self.dim}")
        if self.problem == "laplace2d" and self.dim != 2:
            raise ConfigError("laplace2d requires a 2D box")
        if self.problem == "laplace3d" and self.dim != 3:
            raise ConfigError("laplace3d requires a 3D box")
        if any(hi <= lo for lo, hi in self.box):
            raise ConfigError(f"box has nonpositive extent: {self.box}")
        if self.divisions < 2:
            raise ConfigError("divisions must be >= 2 so the coarse space has interior DOFs")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.first_level not in (0, 1):
            raise ConfigError("first_level must be 0 (V_h1 = V_H) or 1 (V_h1 one refinement finer)")
        if self.eigenpairs < 1:
            raise ConfigError("eigenpairs must be >= 1 (m >= 1)")
        if self.eigenpairs > self.h1_dofs():
            raise ConfigError(
                f"eigenpairs = {self.eigenpairs} exceeds the {self.h1_dofs()} interior DOFs of V_h1 (m <= dim V_h1)"
            )
        if self.h1_dofs() > self.dense_cap:
            raise ConfigError(f"V_h1 has {self.h1_dofs()} DOFs, above the dense cap of {self.dense_cap}")
        if self.coarse_dofs() + 1 > self.dense_cap:
            raise ConfigError(f"coarse space of {self.coarse_dofs()} DOFs exceeds the dense cap of {self.dense_cap}")
        if self.coarse_steps < 1:
            raise ConfigError("coarse_steps must be >= 1")
        if self.finest_steps < 1:
            raise ConfigError("finest_steps must be >= 1")
        if self.mg.cycles_per_solve < 1:
            raise ConfigError("cycles must be >= 1: zero multigrid cycles gives no contraction")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.shift_invert:
            raise ConfigError("shift_invert is reserved; only the dense small eigensolver is implemented")

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return self.workers
        return max(1, min(self.eigenpairs, os.cpu_count() or 1))


def problem_coefficients(problem: str, dim: int) -> ProblemCoefficients:
    if problem in ("laplace2d", "laplace3d"):
        return ProblemCoefficients()
    if problem == "variable_coeff":
        def diffusion(x):
            y = x - 0.5
            return np.eye(dim)[None, :, :] + y[:, :, None] * y[:, None, :]

        def potential(x):
            return np.exp(np.prod(x - 0.5, axis=1))

        return ProblemCoefficients(diffusion=diffusion, potential=potential)
    if problem == "harmonic_box":
        def potential(x):
            return 0.5 * np.sum(x * x, axis=1)

        return ProblemCoefficients(potential=potential, laplace_scale=0.5)
    raise ConfigError(f"unknown problem {problem!r}")


def analytic_eigenvalues(problem: str, box, count: int) -> np.ndarray | None:
    """Smallest ``count`` exact eigenvalues where they are known.

    For ``harmonic_box`` these are the whole-space oscillator levels; the
    box truncation biases the discrete values slightly upwards.
    """
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    if problem in ("laplace2d", "laplace3d"):
        lengths = box[:, 1] - box[:, 0]
        top = count + 2
        grids = np.meshgrid(*[np.arange(1, top + 1)] * d, indexing="ij")
        vals = sum((np.pi * g / L) ** 2 for g, L in zip(grids, lengths))
        return np.sort(vals.ravel())[:count]
    if problem == "harmonic_box":
        top = count + 1
        grids = np.meshgrid(*[np.arange(top)] * d, indexing="ij")
        vals = sum(grids) + 0.5 * d
        return np.sort(vals.ravel()).astype(float)[:count]
    return None


@dataclass
class Setup:
    """Immutable data shared by every worker."""

    config: SolverConfig
    ops: LevelOperators
    coarse: CoarseData

    @property
    def finest(self) -> int:
        return self.ops.n_levels - 1


def prepare(config: SolverConfig) -> Setup:
    config.validate()
    hierarchy = build_hierarchy(config.box, config.divisions, config.levels, max_dofs=config.max_dofs)
    ops = build_level_operators(hierarchy, problem_coefficients(config.problem, config.dim))
    return Setup(config=config, ops=ops, coarse=build_coarse_data(ops))


def schedule(config: SolverConfig) -> list[tuple[int, int]]:
    """``(level, correction count)`` pairs after the step-1 level."""
    finest = config.levels - 1
    plan = [(k, config.coarse_steps) for k in range(config.h1_level + 1, finest)]
    plan.append((finest, config.finest_steps))
    return plan


def initial_states(setup: Setup) -> list[EigenPairState]:
    """Dense solve on V_h1 seeding one state per eigenpair."""
    level = setup.config.h1_level
    result = solve_gevp_dense(setup.ops.stiffness[level], setup.ops.mass[level])
    states = []
    for i in range(setup.config.eigenpairs):
        u = result.eigenvectors[:, i].copy()
        lam = float(result.eigenvalues[i])
        res = algebraic_residual(setup.ops, level, lam, u)
        states.append(EigenPairState(index=i, level=level, eigenvalue=lam, vector=u,
                                     history=[(level, 0, lam, res)]))
    return states


def prolong_state(setup: Setup, state: EigenPairState, level: int) -> EigenPairState:
    counter = state.counter.copy()
    u = state.vector
    for k in range(state.level + 1, level + 1):
        u = spmv(setup.ops.prolongations[k], u, counter, k)
    a_uu, _ = energy_products(setup.ops.stiffness[level], setup.ops.mass[level], u)
    u = u / float(np.sqrt(a_uu))
    counter.matvec(setup.ops.stiffness[level], level)
    return EigenPairState(index=state.index, level=level, eigenvalue=state.eigenvalue, vector=u,
                          history=list(state.history), counter=counter, wall_time=state.wall_time)


def run_pipeline(setup: Setup, state: EigenPairState, plan) -> EigenPairState:
    """Full correction schedule for one eigenpair; failures are captured."""
    start = time.perf_counter()
    try:
        if not np.all(np.isfinite(state.vector)):
            raise NumericalError("non-finite initial eigenvector")
        for level, steps in plan:
            if level != state.level:
                state = prolong_state(setup, state, level)
            for it in range(1, steps + 1):
                state = correction_step(setup.ops, setup.coarse, state, setup.config.mg, iteration=it)
    except (NumericalError, FloatingPointError, ValueError) as exc:
        log.warning("eigenpair %d failed: %s", state.index, exc)
        state = EigenPairState(index=state.index, level=state.level, eigenvalue=float("nan"),
                               vector=state.vector, history=list(state.history), counter=state.counter,
                               failed=True, error=f"{type(exc).__name__}: {exc}")
    state.wall_time = time.perf_counter() - start
    return state


def run_workers(setup: Setup, states: list[EigenPairState], plan, workers: int = 1) -> list[EigenPairState]:
    """Run every eigenpair's pipeline; eigenpair ``i`` goes to worker ``i % workers``.

    Workers share only ``setup`` (read-only) and never exchange data, so the
    results do not depend on ``workers``.
    """
    workers = max(1, min(int(workers), len(states)))
    buckets = [states[w::workers] for w in range(workers)]

    def work(bucket):
        return [run_pipeline(setup, s, plan) for s in bucket]

    if workers == 1:
        done = [work(buckets[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(work, buckets))
    out: list[EigenPairState | None] = [None] * len(states)
    for w, bucket in enumerate(done):
        for j, state in enumerate(bucket):
            out[w + j * workers] = state
    return out


def orthogonality_report(ops: LevelOperators, level: int, vectors, eigenvalues,
                         cluster_tol: float = CLUSTER_TOL) -> float:
    """Largest normalised |b(u_i, u_j)| over pairs with distinct eigenvalues."""
    vectors = [np.asarray(v) for v in vectors]
    if len(vectors) < 2:
        return 0.0
    U = np.column_stack(vectors)
    MU = ops.mass[level] @ U
    gram = U.T @ MU
    norms = np.sqrt(np.diag(gram))
    normalized = np.abs(gram) / np.outer(norms, norms)
    lam = np.asarray(eigenvalues, dtype=float)
    distinct = np.abs(lam[:, None] - lam[None, :]) >= cluster_tol * np.maximum(np.abs(lam[:, None]), np.abs(lam[None, :]))
    np.fill_diagonal(distinct, False)
    if not np.any(distinct):
        return 0.0
    return float(np.max(normalized[distinct]))


def oracle_fine_solve(ops: LevelOperators, level: int, count: int,
                      dense_cap: int = DEFAULT_DENSE_CAP) -> DenseEigenResult:
    """Dense reference eigenpairs on ``level`` for tests and diagnostics.

    Eigenvalues are refined to extended-precision Rayleigh quotients of the
    returned vectors.
    """
    n = ops.dofs(level)
    if n > dense_cap:
        raise DenseCapError(f"oracle refused: {n} DOFs exceed the dense cap of {dense_cap}")
    A, M = ops.stiffness[level], ops.mass[level]
    result = solve_gevp_dense(A, M, count=count)
    refined = []
    for j in range(count):
        a_uu, b_uu = energy_products(A, M, result.eigenvectors[:, j])
        refined.append(float(a_uu / b_uu))
    return DenseEigenResult(eigenvalues=np.array(refined), eigenvectors=result.eigenvectors)


def eigenspace_error(ops: LevelOperators, level: int, u, oracle: DenseEigenResult, index: int,
                     cluster_tol: float = CLUSTER_TOL) -> float:
    """Energy-norm distance from ``u`` to the oracle eigenspace of ``index``."""
    A = ops.stiffness[level]
    lam = oracle.eigenvalues
    members = np.flatnonzero(np.abs(lam - lam[index]) <= cluster_tol * abs(lam[index]))
    V = oracle.eigenvectors[:, members]
    Au = A @ u
    coeffs = V.T @ Au
    diff = u - V @ coeffs
    return float(np.sqrt(max(float(diff @ (A @ diff)), 0.0)))


@dataclass
class GammaEstimate:
    gamma: float
    errors: list[float]
    beta: int = 2
    coarse_steps: int = 1

    @property
    def condition_met(self) -> bool:
        return self.gamma ** self.coarse_steps * self.beta < 1.0


def fit_rate(errors, floor: float = 1e-12) -> float:
    """Least-squares geometric rate of a decaying sequence above ``floor``."""
    errs = np.asarray(errors, dtype=float)
    keep = np.flatnonzero(errs > floor)
    if keep.size < 2:
        return 0.0
    keep = keep[: np.argmax(np.append(np.diff(keep) != 1, True)) + 1]
    if keep.size < 2:
        return 0.0
    slope = np.polyfit(keep.astype(float), np.log(errs[keep]), 1)[0]
    return float(np.exp(slope))


def measure_gamma(config: SolverConfig, index: int = 0, steps: int = 6,
                  setup: Setup | None = None, oracle: DenseEigenResult | None = None) -> GammaEstimate:
    """Fit the per-step contraction of ``||u_bar - u||_A`` on the finest level.

    Starts from the multilevel initial guess (the finest level's input) and
    compares against the dense oracle, which may be passed in precomputed
    (it must hold at least ``eigenpairs + 1`` pairs of the finest level).
    """
    setup = prepare(config) if setup is None else setup
    finest = setup.finest
    if index >= setup.config.eigenpairs:
        raise ValueError(f"eigenpair index {index} outside 0..{setup.config.eigenpairs - 1}")
    if oracle is None:
        count = min(setup.config.eigenpairs + 1, setup.ops.dofs(finest))
        oracle = oracle_fine_solve(setup.ops, finest, count, setup.config.dense_cap)
    state = initial_states(setup)[index]
    plan = schedule(setup.config)[:-1]
    state = run_pipeline(setup, state, plan)
    if state.failed:
        raise NumericalError(f"eigenpair {index} failed before the finest level: {state.error}")
    if state.level != finest:
        state = prolong_state(setup, state, finest)
    errors = [eigenspace_error(setup.ops, finest, state.vector, oracle, index)]
    for it in range(1, steps + 1):
        state = correction_step(setup.ops, setup.coarse, state, setup.config.mg, iteration=it)
        errors.append(eigenspace_error(setup.ops, finest, state.vector, oracle, index))
    return GammaEstimate(gamma=fit_rate(errors), errors=errors,
                         beta=setup.ops.hierarchy.beta, coarse_steps=setup.config.coarse_steps)


@dataclass
class PairResult:
    index: int
    eigenvalue: float
    residual: float
    history: list
    counter: OpCounter
    wall_time: float
    failed: bool = False
    error: str | None = None


@dataclass
class RunReport:
    config: SolverConfig
    pairs: list[PairResult]
    vectors: list[np.ndarray]
    orthogonality: float
    theta: float | None = None
    gamma: float | None = None
    finest_dofs: int = 0

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([p.eigenvalue for p in self.pairs])

    @property
    def failed(self) -> list[int]:
        return [p.index for p in self.pairs if p.failed]


def solve(config: SolverConfig, workers: int | None = None, setup: Setup | None = None,
          diagnostics: bool = False, seed: int = 0, states: list[EigenPairState] | None = None) -> RunReport:
    """Compute the first ``config.eigenpairs`` eigenpairs.

    ``states`` overrides the step-1 seeds (used to inject faults in tests).
    With ``diagnostics`` the report also carries the measured multigrid
    contraction on the finest level and the fitted correction rate of the
    first eigenpair (when the finest level fits under the dense cap).
    """
    setup = prepare(config) if setup is None else setup
    config = setup.config
    workers = config.resolved_workers() if workers is None else workers
    seeds = initial_states(setup) if states is None else states
    finished = run_workers(setup, seeds, schedule(config), workers)

    finest = setup.finest
    pairs, vectors = [], []
    for st in finished:
        res = float("nan") if st.failed else algebraic_residual(setup.ops, finest, st.eigenvalue, st.vector)
        pairs.append(PairResult(index=st.index, eigenvalue=st.eigenvalue, residual=res, history=st.history,
                                counter=st.counter, wall_time=st.wall_time, failed=st.failed, error=st.error))
        vectors.append(st.vector)

    ok = [j for j, p in enumerate(pairs) if not p.failed]
    ortho = orthogonality_report(setup.ops, finest, [vectors[j] for j in ok], [pairs[j].eigenvalue for j in ok])
    # Failed pairs sort last, the rest by eigenvalue.
    order = sorted(range(len(pairs)), key=lambda j: (pairs[j].failed, pairs[j].eigenvalue, j))
    report = RunReport(config=config, pairs=[pairs[j] for j in order], vectors=[vectors[j] for j in order],
                       orthogonality=ortho, finest_dofs=setup.ops.dofs(finest))
    if diagnostics:
        if finest > 0:
            report.theta = measure_contraction(setup.ops, finest, config.mg, trials=3, seed=seed)
        if setup.ops.dofs(finest) <= config.dense_cap:
            report.gamma = measure_gamma(config, 0, setup=setup).gamma
    return report
