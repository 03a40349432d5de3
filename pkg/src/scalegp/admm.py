"""Consensus ADMM over local GP hyperparameter fits.

Each worker owns one shard and minimizes its own objective plus the
augmented-Lagrangian coupling to the global vector ``z``; the coordinator
averages, updates the duals and checks the primal/dual residual tests.
All vectors live in the log domain of the active kernel hyperparameters.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .gp import FitResult, Shard, default_init, estimate_noise, fit_local, nll
from .kernel import HyperParams, KernelSpec

__all__ = [
    "PARTITIONS",
    "TooFewPoints",
    "AdmmConfig",
    "RoundRecord",
    "AdmmState",
    "TrainResult",
    "partition",
    "init_state",
    "run_round",
    "tolerances",
    "check_stop",
    "train",
    "format_trace",
]

log = logging.getLogger(__name__)

PARTITIONS = ("contiguous", "strided", "random")


class TooFewPoints(ValueError):
    pass


@dataclass(frozen=True)
class AdmmConfig:
    workers: int = 1
    rho: float = 1.0
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    max_rounds: int = 50
    partition: str = "contiguous"
    seed: int = 0
    threads: int = 1
    max_iter: int = 200
    gtol: float = 1e-5
    use_toeplitz: bool = True

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("tolerances must be > 0")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.partition not in PARTITIONS:
            raise ValueError(f"partition must be one of {PARTITIONS}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def partition(times, values, cfg: AdmmConfig) -> list:
    """Split a series into ``cfg.workers`` disjoint shards of (near) equal size."""
    times = np.asarray(times, dtype=float).ravel()
    values = np.asarray(values, dtype=float).ravel()
    n, k = times.size, cfg.workers
    if n < 2 * k:
        raise TooFewPoints(f"{n} points cannot feed {k} workers with >= 2 points each")
    if cfg.partition == "contiguous":
        groups = np.array_split(np.arange(n), k)
    elif cfg.partition == "strided":
        groups = [np.arange(i, n, k) for i in range(k)]
    else:
        perm = np.random.default_rng(cfg.seed).permutation(n)
        groups = [np.sort(g) for g in np.array_split(perm, k)]
    return [Shard(times[g], values[g]) for g in groups]


@dataclass(frozen=True)
class RoundRecord:
    round: int
    z: np.ndarray
    primal: np.ndarray  # per-worker ||theta_i - z||
    dual: float  # ||rho (z_new - z_old)||
    eps_pri: float
    eps_dual: float
    local_nll: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    worker_seconds: np.ndarray
    coordinator_seconds: float


@dataclass(frozen=True)
class AdmmState:
    """Consensus state after ``round`` completed rounds.

    ``theta`` and ``zeta`` are ``(K, p)`` arrays; ``history`` holds one
    :class:`RoundRecord` per finished round.
    """

    round: int
    theta: np.ndarray
    z: np.ndarray
    zeta: np.ndarray
    rho: float
    base: HyperParams
    history: tuple = ()
    scalars_exchanged: int = 0
    failures: tuple = ()

    @property
    def workers(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    @property
    def n_cons(self) -> int:
        return self.round

    def hyperparams(self, spec: KernelSpec) -> HyperParams:
        return self.base.with_free(self.z, spec)


def init_state(shards, base: HyperParams, spec: KernelSpec, cfg: AdmmConfig, theta0=None, zeta0=None) -> AdmmState:
    """Initial local/dual vectors and ``z0 = mean(theta0 + zeta0 / rho)``."""
    k = len(shards)
    u0 = base.free_log(spec)
    theta = np.tile(u0, (k, 1)) if theta0 is None else np.array(theta0, dtype=float)
    zeta = np.zeros_like(theta) if zeta0 is None else np.array(zeta0, dtype=float)
    if theta.shape != (k, u0.size) or zeta.shape != theta.shape:
        raise ValueError("theta0/zeta0 must have shape (workers, free params)")
    z = np.mean(theta + zeta / cfg.rho, axis=0)
    return AdmmState(round=0, theta=theta, z=z, zeta=zeta, rho=cfg.rho, base=base)


def tolerances(theta, z, zeta, rho, eps_abs, eps_rel):
    """Feasibility thresholds ``(eps_pri, eps_dual)``.

    ``eps_pri`` takes the max over every local vector and ``z``; the dual
    term uses the stacked duals of all workers.
    """
    theta = np.atleast_2d(theta)
    p = theta.shape[1]
    root = np.sqrt(p) * eps_abs
    scale = max(float(np.max(np.linalg.norm(theta, axis=1))), float(np.linalg.norm(z)))
    eps_pri = root + eps_rel * scale
    eps_dual = root + eps_rel * float(np.linalg.norm(rho * np.asarray(zeta)))
    return eps_pri, eps_dual


def _local_step(shard, base, spec, theta_i, z, zeta_i, rho, cfg):
    t0 = time.perf_counter()
    res = fit_local(
        shard,
        base.with_free(theta_i, spec),
        spec,
        proximal=(z, zeta_i, rho),
        max_iter=cfg.max_iter,
        gtol=cfg.gtol,
        use_toeplitz=cfg.use_toeplitz,
    )
    local = nll(shard, res.hp, spec, cfg.use_toeplitz)
    return res, local, time.perf_counter() - t0


def run_round(state: AdmmState, shards, spec: KernelSpec, cfg: AdmmConfig, executor=None) -> AdmmState:
    """One barrier-synchronized round: K local fits, average, dual ascent."""
    k = state.workers
    if len(shards) != k:
        raise ValueError(f"{len(shards)} shards for {k} workers")
    args = [(shards[i], state.base, spec, state.theta[i], state.z, state.zeta[i], state.rho, cfg) for i in range(k)]
    if executor is None:
        outcomes = [_local_step(*a) for a in args]
    else:
        outcomes = list(executor.map(lambda a: _local_step(*a), args))

    t0 = time.perf_counter()
    results: list[FitResult] = [o[0] for o in outcomes]
    theta = np.stack([r.hp.free_log(spec) for r in results])
    rho = state.rho
    z_new = np.mean(theta + state.zeta / rho, axis=0)
    zeta_new = state.zeta + rho * (theta - z_new)
    primal = np.linalg.norm(theta - z_new, axis=1)
    dual = float(np.linalg.norm(rho * (z_new - state.z)))
    eps_pri, eps_dual = tolerances(theta, z_new, zeta_new, rho, cfg.eps_abs, cfg.eps_rel)
    failures = tuple((state.round + 1, i, r.message) for i, r in enumerate(results) if not r.converged)
    for _, i, msg in failures:
        log.debug("round %d worker %d kept best iterate: %s", state.round + 1, i, msg)
    record = RoundRecord(
        round=state.round + 1,
        z=z_new.copy(),
        primal=primal,
        dual=dual,
        eps_pri=eps_pri,
        eps_dual=eps_dual,
        local_nll=np.array([o[1] for o in outcomes]),
        iterations=np.array([r.iterations for r in results]),
        converged=np.array([r.converged for r in results]),
        worker_seconds=np.array([o[2] for o in outcomes]),
        coordinator_seconds=time.perf_counter() - t0,
    )
    return replace(
        state,
        round=state.round + 1,
        theta=theta,
        z=z_new,
        zeta=zeta_new,
        history=state.history + (record,),
        scalars_exchanged=state.scalars_exchanged + 2 * state.dim + 1,
        failures=state.failures + failures,
    )


def check_stop(state: AdmmState, cfg: AdmmConfig) -> str:
    """``"converged"``, ``"capped"`` or ``"continue"``."""
    if state.history:
        last = state.history[-1]
        if np.max(last.primal) <= last.eps_pri and last.dual <= last.eps_dual:
            return "converged"
    if state.round >= cfg.max_rounds:
        return "capped"
    return "continue"


@dataclass
class TrainResult:
    hp: HyperParams
    state: AdmmState
    status: str
    wall_seconds: float
    # critical-path time: per round the slowest worker plus the coordinator
    parallel_seconds: float
    noise: float
    single: FitResult | None = field(default=None, repr=False)

    @property
    def rounds(self) -> int:
        return self.state.round


def train(times, values, cfg: AdmmConfig, spec: KernelSpec, init: HyperParams | None = None, noise: float | None = None) -> TrainResult:
    """Run consensus ADMM on a series and return the global hyperparameters.

    ``noise`` defaults to :func:`estimate_noise` on the whole series and is
    held fixed. With one worker this is a single unconstrained local fit.
    """
    t_start = time.perf_counter()
    values = np.asarray(values, dtype=float)
    if noise is None:
        noise = estimate_noise(values)
    if init is None:
        init = default_init(values, noise)
    else:
        init = init.replace(sigma2_e=noise)
    shards = partition(times, values, cfg)

    if cfg.workers == 1:
        state = init_state(shards, init, spec, cfg)
        t0 = time.perf_counter()
        res = fit_local(shards[0], init, spec, max_iter=cfg.max_iter, gtol=cfg.gtol, use_toeplitz=cfg.use_toeplitz)
        seconds = time.perf_counter() - t0
        u = res.hp.free_log(spec)[None, :]
        eps_pri, eps_dual = tolerances(u, u[0], np.zeros_like(u), cfg.rho, cfg.eps_abs, cfg.eps_rel)
        record = RoundRecord(
            round=1,
            z=u[0].copy(),
            primal=np.zeros(1),
            dual=float(np.linalg.norm(cfg.rho * (u[0] - state.z))),
            eps_pri=eps_pri,
            eps_dual=eps_dual,
            local_nll=np.array([res.objective]),
            iterations=np.array([res.iterations]),
            converged=np.array([res.converged]),
            worker_seconds=np.array([seconds]),
            coordinator_seconds=0.0,
        )
        state = replace(
            state,
            round=1,
            theta=u,
            z=u[0].copy(),
            history=(record,),
            scalars_exchanged=2 * state.dim + 1,
            failures=() if res.converged else ((1, 0, res.message),),
        )
        wall = time.perf_counter() - t_start
        return TrainResult(res.hp, state, "converged", wall, seconds, noise, single=res)

    state = init_state(shards, init, spec, cfg)
    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        status = "continue"
        while status == "continue":
            state = run_round(state, shards, spec, cfg, executor)
            status = check_stop(state, cfg)
    finally:
        if executor is not None:
            executor.shutdown()

    worst = [float(np.max(r.primal)) for r in state.history]
    smoothed = np.convolve(worst, np.ones(3) / 3, mode="valid")
    if np.any(np.diff(smoothed) > 0):
        log.info("primal residual trend not monotone over %d rounds", state.round)
    parallel = sum(float(np.max(r.worker_seconds)) + r.coordinator_seconds for r in state.history)
    wall = time.perf_counter() - t_start
    return TrainResult(state.hyperparams(spec), state, status, wall, parallel, noise)


def format_trace(state: AdmmState) -> str:
    """Tab-separated per-round trace with a header line."""
    k = state.workers
    cols = ["round"] + [f"primal_{i}" for i in range(k)] + ["dual", "eps_pri", "eps_dual"]
    cols += [f"nll_{i}" for i in range(k)]
    lines = ["\t".join(cols)]
    for r in state.history:
        row = [str(r.round)] + [f"{v:.6e}" for v in r.primal]
        row += [f"{r.dual:.6e}", f"{r.eps_pri:.6e}", f"{r.eps_dual:.6e}"]
        row += [f"{v:.6f}" for v in r.local_nll]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"
