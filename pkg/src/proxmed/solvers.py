"""Estimating-equation solvers for the four bridge parameter vectors.

The outcome-bridge systems are linear in their parameters and are solved in a
single step; the treatment-bridge systems are solved by damped Newton
iteration. All systems are exactly identified: with the default instruments
the number of moments equals the number of parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .bridges import BridgeSpec, _q0_parts, _q1_parts
from .data import MediationDataset

log = logging.getLogger(__name__)

SINGULAR_COND = 1e12
WEAK_PROXY_F = 10.0
DEFAULT_TOL = 1e-9
DEFAULT_RESTARTS = 20
RESTART_SCALE = 2.0
_RESTART_KEY = 0x5EED


class SolverError(RuntimeError):
    """A bridge fit failed; ``report`` carries the last iterate when available."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class ConvergenceError(SolverError):
    pass


class SingularSystemError(SolverError):
    pass


@dataclass
class MomentSystem:
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    dim: int
    # optional per-evaluation clamp counter: params -> number of clamped exponents
    clamps: Optional[Callable[[np.ndarray], int]] = None


@dataclass
class SolveReport:
    params: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    condition: float
    clamp_count: int = 0
    relevance_f: Optional[float] = None
    warnings: List[str] = field(default_factory=list)
    restarts: int = 0

    @property
    def weak_proxy(self) -> bool:
        return any(w.startswith("weak proxy") for w in self.warnings)

    def to_dict(self) -> dict:
        return {
            "params": [float(v) for v in self.params],
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "condition": self.condition,
            "clamp_count": self.clamp_count,
            "relevance_f": self.relevance_f,
            "restarts": self.restarts,
            "warnings": list(self.warnings),
        }


def _cond(j: np.ndarray) -> float:
    if not np.isfinite(j).all():
        return np.inf
    return float(np.linalg.cond(j))


def newton_solve(system: MomentSystem, init, tol: float = DEFAULT_TOL, max_iter: int = 100,
                 max_halvings: int = 30) -> SolveReport:
    """Damped Newton root finding with step halving on the residual 2-norm.

    Converged iff the sup-norm of the residual is at most ``tol``.
    """
    p = np.array(init, dtype=float).reshape(system.dim)
    r = system.residual(p)
    if r.shape != (system.dim,):
        raise ValueError(f"residual has shape {r.shape}, expected ({system.dim},)")
    merit = float(r @ r)
    clamps = 0
    cond = np.nan
    for it in range(max_iter + 1):
        if np.max(np.abs(r)) <= tol:
            return SolveReport(p, it, float(np.max(np.abs(r))), True, cond, clamps)
        if it == max_iter:
            break
        j = system.jacobian(p)
        cond = _cond(j)
        if cond > SINGULAR_COND:
            raise SingularSystemError(
                f"singular Jacobian (condition estimate {cond:.3g})",
                SolveReport(p, it, float(np.max(np.abs(r))), False, cond, clamps),
            )
        step = np.linalg.solve(j, -r)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = p + t * step
            with np.errstate(over="ignore", invalid="ignore"):
                r_cand = system.residual(cand)
                m_cand = float(r_cand @ r_cand)
            if np.isfinite(m_cand) and m_cand < merit:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                "step underflow: no decrease in residual after step halving",
                SolveReport(p, it, float(np.max(np.abs(r))), False, cond, clamps),
            )
        p, r, merit = cand, r_cand, m_cand
        if system.clamps is not None:
            clamps += system.clamps(p)
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (residual {np.max(np.abs(r)):.3g})",
        SolveReport(p, max_iter, float(np.max(np.abs(r))), False, cond, clamps),
    )


def solve_with_restarts(system: MomentSystem, init, tol: float = DEFAULT_TOL, max_iter: int = 100,
                        restarts: int = DEFAULT_RESTARTS) -> SolveReport:
    """newton_solve from ``init``; if that fails, from seeded perturbations of it.

    The restart points are a fixed function of the restart index, so results do
    not depend on scheduling. When the first attempt converges its root is kept.
    """
    init = np.array(init, dtype=float).reshape(system.dim)
    try:
        return newton_solve(system, init, tol=tol, max_iter=max_iter)
    except SolverError as err:
        first = err
    for k in range(1, restarts + 1):
        g = np.random.Generator(np.random.Philox(np.random.SeedSequence([_RESTART_KEY, k])))
        start = init + RESTART_SCALE * g.standard_normal(system.dim)
        try:
            rep = newton_solve(system, start, tol=tol, max_iter=max_iter)
        except SolverError:
            continue
        rep.restarts = k
        rep.warnings.append(f"root reached from restart {k}, not from the initial value")
        return rep
    raise type(first)(f"{first} (also failed from {restarts} restarts)", first.report)


class Designs:
    """Per-bridge design and default instrument matrices for one dataset and spec.

    ``f*`` are bridge feature matrices, ``c*``/``d*`` the instruments:

        h1: f1 = (1, W, M, X),  c1 = (1, Z, M, X)
        h0: f0 = (1, W, X),     c0 = (1, Z, X)
        q0: g0 = (1, Z, X),     d0 = (1, W, X)
        q1: g1 = (1, Z, M, X),  d1 = (1, W, M, X)

    where X is passed through the bridge's own feature map.
    """

    def __init__(self, data: MediationDataset, spec: Optional[BridgeSpec] = None):
        spec = spec or BridgeSpec.default(data.p_x)
        spec.check(data)
        self.data, self.spec = data, spec
        one = np.ones((data.n, 1))
        m = data.m[:, None]
        x = {b: getattr(spec, b).apply(data.x) for b in ("h1", "h0", "q0", "q1")}
        self.f1 = np.hstack([one, data.w, m, x["h1"]])
        self.c1 = np.hstack([one, data.z, m, x["h1"]])
        self.f0 = np.hstack([one, data.w, x["h0"]])
        self.c0 = np.hstack([one, data.z, x["h0"]])
        self.g0 = np.hstack([one, data.z, x["q0"]])
        self.d0 = np.hstack([one, data.w, x["q0"]])
        self.g1 = np.hstack([one, data.z, m, x["q1"]])
        self.d1 = np.hstack([one, data.w, m, x["q1"]])
        self.a = data.a
        self.y = data.y
        self.n = data.n
        self._xmaps = x

    def h1(self, beta1):
        return self.f1 @ beta1

    def h0(self, beta0):
        return self.f0 @ beta0

    def q0(self, gamma0):
        return _q0_parts(gamma0, self.g0)[0]

    def q1(self, gamma1, gamma0):
        return _q1_parts(gamma1, gamma0, self.g1, self.g0)[0]

    def relevance(self, tag: str) -> float:
        """First-stage F statistic of the proxy pair behind a bridge's moment system."""
        d, a = self.data, self.a
        one = np.ones((d.n, 1))
        m = d.m[:, None]
        xm = self._xmaps[tag]
        if tag == "h1":
            return relevance_f(d.w, d.z, np.hstack([one, m, xm]), a == 1)
        if tag == "h0":
            return relevance_f(d.w, d.z, np.hstack([one, xm]), a == 0)
        if tag == "q0":
            return relevance_f(d.z, d.w, np.hstack([one, xm]), a == 0)
        if tag == "q1":
            return relevance_f(d.z, d.w, np.hstack([one, m, xm]), a == 1)
        raise ValueError(f"unknown bridge tag {tag!r}")


def relevance_f(endog: np.ndarray, instruments: np.ndarray, exog: np.ndarray, mask) -> float:
    """Smallest partial F statistic for the instrument block across endogenous columns."""
    mask = np.asarray(mask, dtype=bool)
    e, zi, xo = endog[mask], instruments[mask], exog[mask]
    full = np.hstack([xo, zi])
    n, k, q = full.shape[0], full.shape[1], zi.shape[1]
    if n <= k:
        return float("nan")
    fs = []
    for col in e.T:
        rss_u = np.sum((col - full @ np.linalg.lstsq(full, col, rcond=None)[0]) ** 2)
        rss_r = np.sum((col - xo @ np.linalg.lstsq(xo, col, rcond=None)[0]) ** 2)
        fs.append(((rss_r - rss_u) / q) / (rss_u / (n - k)) if rss_u > 0 else np.inf)
    return float(min(fs))


def _attach_relevance(report: SolveReport, designs: Designs, tag: str) -> SolveReport:
    f = designs.relevance(tag)
    report.relevance_f = f
    if np.isfinite(f) and f < WEAK_PROXY_F:
        report.warnings.append(f"weak proxy: {tag} first-stage F = {f:.2f} < {WEAK_PROXY_F:g}")
    return report


def _linear_solve(weights, instruments, features, target, tag) -> SolveReport:
    n = len(weights)
    wi = instruments * weights[:, None]
    g = wi.T @ features / n
    b = wi.T @ target / n
    cond = _cond(g)
    if cond > SINGULAR_COND:
        raise SingularSystemError(f"{tag}: singular cross-moment matrix (condition {cond:.3g}); "
                                  "proxies may be weak or irrelevant")
    params = np.linalg.solve(g, b)
    resid = wi.T @ (target - features @ params) / n
    return SolveReport(params, 1, float(np.max(np.abs(resid))), True, cond)


def _square(instr, params_dim, tag):
    if instr.shape[1] != params_dim:
        raise ValueError(f"{tag}: {instr.shape[1]} instruments for {params_dim} parameters; "
                         "the system must be exactly identified (p_z = p_w with default instruments)")


def fit_beta1(data: MediationDataset, spec: Optional[BridgeSpec] = None, instruments=None,
              designs: Optional[Designs] = None):
    """Solve sum_i A_i c1_i (Y_i - h1_i) = 0 for the h1 coefficients."""
    ds = designs or Designs(data, spec)
    c1 = ds.c1 if instruments is None else np.asarray(instruments, dtype=float)
    _square(c1, ds.f1.shape[1], "h1")
    rep = _linear_solve(ds.a, c1, ds.f1, ds.y, "h1")
    return rep.params, _attach_relevance(rep, ds, "h1")


def fit_beta0(data: MediationDataset, spec: Optional[BridgeSpec], beta1, instruments=None,
              designs: Optional[Designs] = None):
    """Solve sum_i (1 - A_i) c0_i (h1_i - h0_i) = 0 given fitted h1 coefficients."""
    ds = designs or Designs(data, spec)
    c0 = ds.c0 if instruments is None else np.asarray(instruments, dtype=float)
    _square(c0, ds.f0.shape[1], "h0")
    rep = _linear_solve(1.0 - ds.a, c0, ds.f0, ds.h1(np.asarray(beta1, dtype=float)), "h0")
    return rep.params, _attach_relevance(rep, ds, "h0")


def gamma0_system(ds: Designs, instruments=None) -> MomentSystem:
    d0 = ds.d0 if instruments is None else np.asarray(instruments, dtype=float)
    _square(d0, ds.g0.shape[1], "q0")
    ctrl = 1.0 - ds.a
    n = ds.n

    def residual(g):
        q0 = _q0_parts(g, ds.g0)[0]
        return d0.T @ (ctrl * q0 - 1.0) / n

    def jacobian(g):
        e = _q0_parts(g, ds.g0)[1]
        return -(d0 * (ctrl * e)[:, None]).T @ ds.g0 / n

    return MomentSystem(residual, jacobian, ds.g0.shape[1], clamps=lambda g: _q0_parts(g, ds.g0)[2])


def gamma1_system(ds: Designs, gamma0, instruments=None) -> MomentSystem:
    d1 = ds.d1 if instruments is None else np.asarray(instruments, dtype=float)
    _square(d1, ds.g1.shape[1], "q1")
    gamma0 = np.asarray(gamma0, dtype=float)
    q0 = ds.q0(gamma0)
    target = (1.0 - ds.a) * q0
    n = ds.n

    def residual(g):
        q1 = _q1_parts(g, gamma0, ds.g1, ds.g0)[0]
        return d1.T @ (ds.a * q1 - target) / n

    def jacobian(g):
        q1 = _q1_parts(g, gamma0, ds.g1, ds.g0)[0]
        return (d1 * (ds.a * q1)[:, None]).T @ ds.g1 / n

    return MomentSystem(residual, jacobian, ds.g1.shape[1],
                        clamps=lambda g: _q1_parts(g, gamma0, ds.g1, ds.g0)[4])


def fit_gamma0(data: MediationDataset, spec: Optional[BridgeSpec] = None, init=None, instruments=None,
               designs: Optional[Designs] = None, tol: float = DEFAULT_TOL, max_iter: int = 100,
               restarts: int = DEFAULT_RESTARTS):
    """Solve sum_i {(1 - A_i) q0_i - 1} d0_i = 0 by damped Newton (zeros by default)."""
    ds = designs or Designs(data, spec)
    system = gamma0_system(ds, instruments)
    init = np.zeros(system.dim) if init is None else init
    rep = solve_with_restarts(system, init, tol=tol, max_iter=max_iter, restarts=restarts)
    return rep.params, _attach_relevance(rep, ds, "q0")


def fit_gamma1(data: MediationDataset, spec: Optional[BridgeSpec], gamma0, init=None, instruments=None,
               designs: Optional[Designs] = None, tol: float = DEFAULT_TOL, max_iter: int = 100,
               restarts: int = DEFAULT_RESTARTS):
    """Solve sum_i {A_i q1_i - (1 - A_i) q0_i} d1_i = 0 given fitted q0 coefficients."""
    ds = designs or Designs(data, spec)
    system = gamma1_system(ds, gamma0, instruments)
    init = np.zeros(system.dim) if init is None else init
    rep = solve_with_restarts(system, init, tol=tol, max_iter=max_iter, restarts=restarts)
    return rep.params, _attach_relevance(rep, ds, "q1")
