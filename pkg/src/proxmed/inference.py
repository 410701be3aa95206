"""Standard errors and confidence intervals.

Two routes: a sandwich variance from the stacked estimating equations of all
nuisance fits plus the estimator's own centering equation, and a
nonparametric bootstrap that reruns the whole pipeline per replicate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .bridges import BridgeSpec, _q0_parts, _q1_parts
from .data import MediationDataset
from .estimators import (
    METHODS,
    REQUIRED,
    Z_975,
    DRBridges,
    EstimationError,
    FittedBridges,
    fit_bridges,
    fit_dr_bridges,
    psi_summand,
)
from .rng import stream
from .solvers import SolverError

log = logging.getLogger(__name__)

DEFAULT_B = 200
MAX_FAIL_SHARE = 0.20


class InferenceError(RuntimeError):
    pass


# --- sandwich ----------------------------------------------------------------


@dataclass
class StackedSystem:
    """Per-row stacked moments m_i(theta) at the fitted theta, with the analytic bread.

    ``names``/``slices`` index the blocks; ``target`` is the gradient of the
    reported scalar with respect to the stacked parameter vector.
    """

    names: List[str]
    slices: dict
    theta: np.ndarray
    moments: Callable[[np.ndarray], np.ndarray]
    bread_fn: Callable[[np.ndarray], np.ndarray]
    target: np.ndarray

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def bread(self) -> np.ndarray:
        return self.bread_fn(self.theta)

    def meat(self) -> np.ndarray:
        m = self.moments(self.theta)
        return m.T @ m / m.shape[0]

    def numeric_bread(self, step: float = 1e-6) -> np.ndarray:
        """Central finite differences of the averaged moments (used to check the bread)."""
        out = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = step * max(1.0, abs(self.theta[j]))
            hi = self.moments(self.theta + e).mean(axis=0)
            lo = self.moments(self.theta - e).mean(axis=0)
            out[:, j] = (hi - lo) / (2 * e[j])
        return out

    def covariance(self) -> np.ndarray:
        n = self.moments(self.theta).shape[0]
        bread = self.bread()
        cond = np.linalg.cond(bread)
        if not np.isfinite(cond) or cond > 1e14:
            raise InferenceError(f"singular bread matrix (condition {cond:.3g})")
        inv = np.linalg.inv(bread)
        cov = inv @ self.meat() @ inv.T / n
        return (cov + cov.T) / 2

    def variance(self) -> float:
        return float(max(self.target @ self.covariance() @ self.target, 0.0))


def _layout(blocks: Sequence[Tuple[str, int]]):
    slices, start = {}, 0
    for name, k in blocks:
        slices[name] = slice(start, start + k)
        start += k
    return slices, start


def stacked_system(bridges: FittedBridges, method: str, dr0: Optional[DRBridges] = None) -> StackedSystem:
    """Stack bridge moments, the psi centering equation and, if ``dr0`` is given,
    the E[Y(0)] blocks; the target is psi, or psi - E[Y(0)] with ``dr0``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    need = set(REQUIRED[method])
    if "h0" in need:
        need.add("h1")
    if "q1" in need:
        need.add("q0")
    bridges.require(need)
    ds, p = bridges.designs, bridges.params
    a, y, n = ds.a, ds.y, ds.n
    ctrl = 1.0 - a
    dims = {"h1": ds.f1.shape[1], "h0": ds.f0.shape[1], "q0": ds.g0.shape[1], "q1": ds.g1.shape[1]}
    blocks = [(t, dims[t]) for t in ("h1", "h0", "q0", "q1") if t in need] + [("psi", 1)]
    if dr0 is not None:
        blocks += [("ht", dr0.f.shape[1]), ("qt", dr0.gz.shape[1]), ("delta", 1)]
    sl, dim = _layout(blocks)

    init = {"h1": p.beta1, "h0": p.beta0, "q0": p.gamma0, "q1": p.gamma1}
    theta = np.zeros(dim)
    for t in need:
        theta[sl[t]] = init[t]
    theta[sl["psi"]] = psi_summand(method, bridges).mean()
    if dr0 is not None:
        theta[sl["ht"]], theta[sl["qt"]] = dr0.b, dr0.g
        theta[sl["delta"]] = dr0.summand().mean()

    def unpack(th):
        return {k: th[s] for k, s in sl.items()}

    def pieces(th):
        v = unpack(th)
        out = {}
        if "h1" in v:
            out["h1"] = ds.f1 @ v["h1"]
        if "h0" in v:
            out["h0"] = ds.f0 @ v["h0"]
        if "q0" in v:
            out["q0"], out["e0"], _ = _q0_parts(v["q0"], ds.g0)
        if "q1" in v:
            out["q1"], _, _, out["e1"], _ = _q1_parts(v["q1"], v["q0"], ds.g1, ds.g0)
        return v, out

    def summand(v, pc):
        if method == "P-OR":
            return pc["h0"]
        if method == "P-hybrid":
            return ctrl * pc["q0"] * pc["h1"]
        if method == "P-IPW":
            return a * pc["q1"] * y
        return a * pc["q1"] * (y - pc["h1"]) + ctrl * pc["q0"] * (pc["h1"] - pc["h0"]) + pc["h0"]

    def moments(th):
        v, pc = pieces(th)
        m = np.empty((n, dim))
        if "h1" in sl:
            m[:, sl["h1"]] = ds.c1 * (a * (y - pc["h1"]))[:, None]
        if "h0" in sl:
            m[:, sl["h0"]] = ds.c0 * (ctrl * (pc["h1"] - pc["h0"]))[:, None]
        if "q0" in sl:
            m[:, sl["q0"]] = ds.d0 * (ctrl * pc["q0"] - 1.0)[:, None]
        if "q1" in sl:
            m[:, sl["q1"]] = ds.d1 * (a * pc["q1"] - ctrl * pc["q0"])[:, None]
        m[:, sl["psi"]] = (summand(v, pc) - v["psi"])[:, None]
        if dr0 is not None:
            ht = dr0.f @ v["ht"]
            qt = _q0_parts(v["qt"], dr0.gz)[0]
            m[:, sl["ht"]] = dr0.c * (dr0.ind * (y - ht))[:, None]
            m[:, sl["qt"]] = dr0.d * (dr0.ind * qt - 1.0)[:, None]
            m[:, sl["delta"]] = (dr0.ind * qt * (y - ht) + ht - v["delta"])[:, None]
        return m

    def bread_fn(th):
        v, pc = pieces(th)
        j = np.zeros((dim, dim))

        def put(row, col, mat):
            j[sl[row], sl[col]] += mat

        def avg(weights, left, right):
            return (left * weights[:, None]).T @ right / n

        if "q0" in pc:
            # gradient of q0 w.r.t. gamma0 is -e0 * g0; q1 = q0 * e1 gives e1 times that
            dq0 = -pc["e0"]
        if "h1" in sl:
            put("h1", "h1", -avg(a, ds.c1, ds.f1))
        if "h0" in sl:
            put("h0", "h1", avg(ctrl, ds.c0, ds.f1))
            put("h0", "h0", -avg(ctrl, ds.c0, ds.f0))
        if "q0" in sl:
            put("q0", "q0", avg(ctrl * dq0, ds.d0, ds.g0))
        if "q1" in sl:
            put("q1", "q1", avg(a * pc["q1"], ds.d1, ds.g1))
            put("q1", "q0", avg(a * pc["e1"] * dq0 - ctrl * dq0, ds.d1, ds.g0))
        ones = np.ones((n, 1))
        if method == "P-OR":
            put("psi", "h0", avg(np.ones(n), ones, ds.f0))
        elif method == "P-hybrid":
            put("psi", "h1", avg(ctrl * pc["q0"], ones, ds.f1))
            put("psi", "q0", avg(ctrl * pc["h1"] * dq0, ones, ds.g0))
        elif method == "P-IPW":
            put("psi", "q1", avg(a * y * pc["q1"], ones, ds.g1))
            put("psi", "q0", avg(a * y * pc["e1"] * dq0, ones, ds.g0))
        else:
            r1 = y - pc["h1"]
            put("psi", "h1", avg(-a * pc["q1"] + ctrl * pc["q0"], ones, ds.f1))
            put("psi", "h0", avg(1.0 - ctrl * pc["q0"], ones, ds.f0))
            put("psi", "q0", avg((a * r1 * pc["e1"] + ctrl * (pc["h1"] - pc["h0"])) * dq0, ones, ds.g0))
            put("psi", "q1", avg(a * r1 * pc["q1"], ones, ds.g1))
        j[sl["psi"], sl["psi"]] = -1.0
        if dr0 is not None:
            ht = dr0.f @ v["ht"]
            qt, et, _ = _q0_parts(v["qt"], dr0.gz)
            ind = dr0.ind
            put("ht", "ht", -avg(ind, dr0.c, dr0.f))
            put("qt", "qt", avg(-ind * et, dr0.d, dr0.gz))
            put("delta", "ht", avg(1.0 - ind * qt, ones, dr0.f))
            put("delta", "qt", avg(-ind * (y - ht) * et, ones, dr0.gz))
            j[sl["delta"], sl["delta"]] = -1.0
        return j

    target = np.zeros(dim)
    target[sl["psi"]] = 1.0
    if dr0 is not None:
        target[sl["delta"]] = -1.0
    return StackedSystem([b for b, _ in blocks], sl, theta, moments, bread_fn, target)


def sandwich_se(data: MediationDataset, bridges: FittedBridges, method: str,
                dr0: Optional[DRBridges] = None) -> Tuple[float, Tuple[float, float]]:
    """Sandwich se and normal 95% CI for psi (or psi - E[Y(0)] when ``dr0`` is given)."""
    system = stacked_system(bridges, method, dr0)
    se = float(np.sqrt(system.variance()))
    point = float(system.target @ system.theta)
    return se, (point - Z_975 * se, point + Z_975 * se)


def mean_sandwich_se(values) -> float:
    """Sandwich se of a sample mean: the one-block stack m_i = v_i - mu."""
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean((v - v.mean()) ** 2) / v.size))


# --- bootstrap ---------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = DEFAULT_B
    seed: int = 0
    method: str = "P-MR"
    interval: str = "normal"
    threads: int = 1

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("bootstrap needs B >= 1")
        if self.interval not in ("normal", "percentile"):
            raise ValueError("interval must be 'normal' or 'percentile'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class BootstrapResult:
    point: float
    se: float
    ci: Tuple[float, float]
    replicates: np.ndarray
    n_failed: int

    def to_dict(self) -> dict:
        return {"point": self.point, "se": self.se, "ci_lo": self.ci[0], "ci_hi": self.ci[1],
                "n_replicates": int(self.replicates.size), "n_failed": self.n_failed}


def resample_indices(n: int, seed: int, r: int) -> np.ndarray:
    return stream(seed, r, 0xB007).integers(0, n, size=n)


def _replicate(pipeline, data: MediationDataset, seed: int, r: int) -> float:
    try:
        return float(pipeline(data.take(resample_indices(data.n, seed, r))))
    except (SolverError, EstimationError, np.linalg.LinAlgError) as err:
        log.debug("bootstrap replicate %d failed: %s", r, err)
        return float("nan")


def bootstrap_se(data: MediationDataset, pipeline: Callable[[MediationDataset], float],
                 config: BootstrapConfig = BootstrapConfig()) -> BootstrapResult:
    """Rerun ``pipeline`` on B row resamples; replicate r uses its own stream."""
    point = float(pipeline(data))
    if config.threads == 1:
        reps = [_replicate(pipeline, data, config.seed, r) for r in range(config.B)]
    else:
        reps = Parallel(n_jobs=config.threads)(
            delayed(_replicate)(pipeline, data, config.seed, r) for r in range(config.B))
    reps = np.asarray(reps, dtype=float)
    ok = reps[np.isfinite(reps)]
    n_failed = int(reps.size - ok.size)
    if n_failed > MAX_FAIL_SHARE * config.B:
        raise InferenceError(f"bootstrap unstable: {n_failed} of {config.B} replicates failed")
    se = float(np.std(ok, ddof=1)) if ok.size > 1 else 0.0
    if ok.size == 1:
        ci = (float(ok[0]), float(ok[0]))
    elif config.interval == "normal":
        ci = (point - Z_975 * se, point + Z_975 * se)
    else:
        lo, hi = np.quantile(ok, [0.025, 0.975])
        ci = (min(float(lo), point), max(float(hi), point))
    return BootstrapResult(point, se, ci, ok, n_failed)


def theta_pipeline(method: str, spec: Optional[BridgeSpec] = None) -> Callable[[MediationDataset], float]:
    """Estimate of NDE(0) = psi - E[Y(0)] for one method, bridges refit on the given data."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")

    def run(data: MediationDataset) -> float:
        fb = fit_bridges(data, spec, REQUIRED[method])
        fb.require(REQUIRED[method])
        return float(psi_summand(method, fb).mean() - fit_dr_bridges(data, 0).summand().mean())

    return run


def psi_pipeline(method: str, spec: Optional[BridgeSpec] = None) -> Callable[[MediationDataset], float]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")

    def run(data: MediationDataset) -> float:
        return float(psi_summand(method, fit_bridges(data, spec, REQUIRED[method])).mean())

    return run
