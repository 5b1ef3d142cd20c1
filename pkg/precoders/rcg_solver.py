# precoders/rcg_solver.py
"""
Riemannian conjugate gradient for the WSR precoder design.

One outer iteration:
    cache refresh -> Euclidean gradient -> Riemannian gradient (projection)
    -> direction (modified PRP + transport) -> U blocks -> backtracking on
    phi(alpha) -> promote the accepted candidate cache.

Sufficient decrease is tested as

    f(P) - phi(alpha) >= c * alpha * |g(grad f, eta)|

which is Armijo's condition with the sign of the (negative) slope normalized.
"""
import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from precoders.errors import ConfigurationError, DegenerateRetractionError, LineSearchFailure
from precoders.geometry import PerBSPowerManifold, Precoder, TangentVector
from precoders.wsr_objective import ObjectiveCache, WsrObjective

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    alpha0: float = 1e-3
    r: float = 0.5
    c: float = 1e-4
    max_outer: int = 500
    max_inner: int = 40
    grad_tol: float = 1e-6
    restart: bool = True

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ConfigurationError(f"alpha0 must be > 0, got {self.alpha0}")
        if not 0 < self.r < 1:
            raise ConfigurationError(f"r must be in (0, 1), got {self.r}")
        if not 0 < self.c < 1:
            raise ConfigurationError(f"c must be in (0, 1), got {self.c}")
        if self.max_outer < 0 or self.max_inner < 1:
            raise ConfigurationError("max_outer must be >= 0 and max_inner >= 1")
        if not self.grad_tol >= 0:
            raise ConfigurationError(f"grad_tol must be >= 0, got {self.grad_tol}")

    @classmethod
    def from_config(cls, config, **overrides) -> "SolverOptions":
        values = dict(
            alpha0=config.alpha0, r=config.r, c=config.c,
            max_outer=config.max_outer, max_inner=config.max_inner, grad_tol=config.grad_tol,
        )
        values.update(overrides)
        return cls(**values)


class Termination(str, enum.Enum):
    GRAD_TOL = "grad_tol"
    MAX_OUTER = "max_outer"
    LINE_SEARCH = "line_search"
    DEGENERATE = "degenerate_retraction"


@dataclass(frozen=True)
class IterationRecord:
    """Row n describes the iterate P^n; row 0 is the initial point."""
    iteration: int
    f: float
    wsr: float
    grad_norm: float
    beta: float
    alpha: float
    inner_iters: int
    wall_ms: float
    restarted: bool = False


@dataclass
class SolverTrace:
    records: List[IterationRecord] = field(default_factory=list)
    termination: Optional[Termination] = None

    @property
    def outer_iterations(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def total_inner(self) -> int:
        return sum(rec.inner_iters for rec in self.records)

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    def f_values(self) -> np.ndarray:
        return np.array([rec.f for rec in self.records])

    def mean_inner(self) -> float:
        n = self.outer_iterations
        return self.total_inner / n if n else 0.0


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    point: Precoder
    cache: ObjectiveCache
    value: float
    gamma: np.ndarray
    inner_iters: int


# ---------------------------------------------------------------------
# DIRECTION
# ---------------------------------------------------------------------
def beta_modified_prp(
        manifold: PerBSPowerManifold,
        g_now: TangentVector,
        g_prev_transported: Optional[TangentVector],
        g_prev_normsq: float,
) -> float:
    """max(0, min(beta_PRP, beta_FR)); 0 without history or with a zero previous gradient."""
    if g_prev_transported is None or not g_prev_normsq > 0:
        return 0.0
    nu = g_now - g_prev_transported
    beta_prp = manifold.metric(None, g_now, nu) / g_prev_normsq
    beta_fr = manifold.metric(None, g_now, g_now) / g_prev_normsq
    return max(0.0, min(beta_prp, beta_fr))


def _direction(
        manifold: PerBSPowerManifold,
        g_riem: TangentVector,
        eta_prev: Optional[TangentVector],
        p: Optional[Precoder],
        p_new: Precoder,
        beta: float,
) -> Tuple[TangentVector, float, bool]:
    steepest = TangentVector.from_stack(-g_riem)
    if beta == 0.0 or eta_prev is None:
        return steepest, 0.0, False
    eta = steepest + beta * manifold.transport(p, p_new, eta_prev)
    if manifold.metric(p_new, eta, g_riem) >= 0.0:
        return steepest, 0.0, True
    return TangentVector.from_stack(eta), beta, False


def search_direction(
        manifold: PerBSPowerManifold,
        g_riem: TangentVector,
        eta_prev: Optional[TangentVector],
        alpha_prev: float,
        p: Precoder,
        p_new: Optional[Precoder],
        beta: float,
) -> TangentVector:
    """
    -grad f(P_new) + beta T(eta_prev), falling back to -grad when that is not
    a descent direction. P_new defaults to R_P(alpha_prev eta_prev).
    """
    if p_new is None:
        p_new = p if eta_prev is None else manifold.retract(p, alpha_prev * eta_prev)[0]
    return _direction(manifold, g_riem, eta_prev, p, p_new, beta)[0]


# ---------------------------------------------------------------------
# LINE SEARCH
# ---------------------------------------------------------------------
def backtrack(
        objective: WsrObjective,
        p: Precoder,
        eta: TangentVector,
        cache: ObjectiveCache,
        slope: float,
        opts: SolverOptions,
        f0: Optional[float] = None,
) -> LineSearchResult:
    """
    Try alpha = alpha0, r alpha0, r^2 alpha0, ... and accept the first trial
    with sufficient decrease. `cache` must carry the U blocks of `eta`.
    """
    f0 = objective.value(cache) if f0 is None else f0
    alpha = opts.alpha0
    for m in range(1, opts.max_inner + 1):
        trial = objective.phi(cache, alpha)
        if f0 - trial.value >= opts.c * alpha * abs(slope):
            point = objective.manifold.scale_blocks(p + alpha * eta, trial.gamma, cls=Precoder)
            return LineSearchResult(
                alpha=alpha, point=point, cache=trial.cache, value=trial.value, gamma=trial.gamma, inner_iters=m,
            )
        alpha *= opts.r
    raise LineSearchFailure(opts.max_inner, alpha / opts.r)


# ---------------------------------------------------------------------
# SOLVER
# ---------------------------------------------------------------------
IterateCallback = Callable[[int, Precoder, ObjectiveCache], None]


def rcg_solve(
        objective: WsrObjective,
        p0: Precoder,
        opts: Optional[SolverOptions] = None,
        callback: Optional[IterateCallback] = None,
) -> Tuple[Precoder, SolverTrace]:
    """
    Run RCG from p0 (which must lie on the manifold). Line-search failures and
    degenerate retractions end the run with the last accepted iterate, which is
    also the best one since f never increases.
    """
    opts = opts or SolverOptions()
    manifold = objective.manifold
    trace = SolverTrace()

    p = p0
    cache = objective.build_cache(p)
    f = objective.value(cache)
    g = objective.riemannian_gradient(p, objective.euclidean_gradient(cache))
    g_normsq = manifold.metric(p, g, g)
    eta = TangentVector.from_stack(-g)
    beta = 0.0
    restarted = False
    # inner steps of a failed conjugate search, charged to the restarted iteration
    spent = 0

    trace.records.append(IterationRecord(
        iteration=0, f=f, wsr=-f, grad_norm=float(np.sqrt(g_normsq)),
        beta=0.0, alpha=0.0, inner_iters=0, wall_ms=0.0,
    ))
    if callback:
        callback(0, p, cache)
    log.info("rcg start: wsr=%.6g nats, |grad|=%.3e", -f, np.sqrt(g_normsq))

    n = 0
    while True:
        if np.sqrt(g_normsq) <= opts.grad_tol:
            trace.termination = Termination.GRAD_TOL
            break
        if n >= opts.max_outer:
            trace.termination = Termination.MAX_OUTER
            break

        if not spent:
            started = time.perf_counter()
        try:
            step = backtrack(
                objective, p, eta, objective.with_direction(cache, p, eta),
                manifold.metric(p, g, eta), opts, f0=f,
            )
        except LineSearchFailure as exc:
            if opts.restart and beta > 0.0:
                log.debug("iteration %d: conjugate step failed (%s); restarting along -grad", n + 1, exc)
                spent += exc.inner_iters
                eta, beta, restarted = TangentVector.from_stack(-g), 0.0, True
                continue
            trace.termination = Termination.LINE_SEARCH
            log.info("rcg stopped at iteration %d: %s", n, exc)
            break
        except DegenerateRetractionError as exc:
            trace.termination = Termination.DEGENERATE
            log.warning("rcg stopped at iteration %d: %s", n, exc)
            break

        p_new, cache = step.point, step.cache
        g_new = objective.riemannian_gradient(p_new, objective.euclidean_gradient(cache))
        g_new_normsq = manifold.metric(p_new, g_new, g_new)

        beta_next = beta_modified_prp(manifold, g_new, manifold.transport(p, p_new, g), g_normsq)
        eta_next, beta_next, fell_back = _direction(manifold, g_new, eta, p, p_new, beta_next)

        n += 1
        trace.records.append(IterationRecord(
            iteration=n, f=step.value, wsr=-step.value, grad_norm=float(np.sqrt(g_new_normsq)),
            beta=beta, alpha=step.alpha, inner_iters=step.inner_iters + spent,
            wall_ms=(time.perf_counter() - started) * 1e3, restarted=restarted,
        ))
        if callback:
            callback(n, p_new, cache)

        p, f, g, g_normsq = p_new, step.value, g_new, g_new_normsq
        eta, beta, restarted = eta_next, beta_next, fell_back
        spent = 0

    log.info(
        "rcg done: %s after %d iterations, wsr=%.6g nats, |grad|=%.3e, mean N_in=%.2f",
        trace.termination.value, trace.outer_iterations, -f, np.sqrt(g_normsq), trace.mean_inner(),
    )
    return p, trace
