"""Proximal estimators of the mediation functional psi = E[Y{1, M(0)}] and of
the counterfactual means E[Y(a)], plus effect contrasts, the naive regression
benchmark, and the randomized-trial variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bridges import BRIDGES, BridgeParams, BridgeSpec, _q0_parts, clamped_exp, coef_names
from .data import MediationDataset
from .solvers import (
    Designs,
    MomentSystem,
    SolveReport,
    WEAK_PROXY_F,
    _linear_solve,
    fit_beta0,
    fit_beta1,
    fit_gamma0,
    fit_gamma1,
    newton_solve,
    solve_with_restarts,
    relevance_f,
)

log = logging.getLogger(__name__)

METHODS = ("P-OR", "P-hybrid", "P-IPW", "P-MR")
RCT_VARIANTS = ("OR", "IPW", "MR")
REQUIRED = {
    "P-OR": ("h1", "h0"),
    "P-hybrid": ("h1", "q0"),
    "P-IPW": ("q0", "q1"),
    "P-MR": ("h1", "h0", "q0", "q1"),
}
_PARAM = {"h1": "beta1", "h0": "beta0", "q0": "gamma0", "q1": "gamma1"}
Z_975 = 1.959963984540054


class EstimationError(RuntimeError):
    pass


@dataclass
class EstimateResult:
    estimand: str
    method: str
    point: float
    se: Optional[float] = None
    ci: Optional[Tuple[float, float]] = None
    diagnostics: Dict[str, dict] = field(default_factory=dict)

    def with_se(self, se: float, ci: Optional[Tuple[float, float]] = None) -> "EstimateResult":
        if se < 0:
            raise ValueError("standard error must be non-negative")
        if ci is None:
            ci = (self.point - Z_975 * se, self.point + Z_975 * se)
        return replace(self, se=float(se), ci=(float(ci[0]), float(ci[1])))

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "se": self.se,
            "ci_lo": None if self.ci is None else self.ci[0],
            "ci_hi": None if self.ci is None else self.ci[1],
            "diagnostics": self.diagnostics,
        }


@dataclass
class FittedBridges:
    params: BridgeParams
    spec: BridgeSpec
    reports: Dict[str, SolveReport]
    designs: Designs

    def require(self, tags: Iterable[str]) -> None:
        for tag in tags:
            rep = self.reports.get(tag)
            if rep is None or getattr(self.params, _PARAM[tag]) is None:
                raise EstimationError(f"bridge {tag} was not fitted")
            if not rep.converged:
                raise EstimationError(f"bridge {tag} did not converge; refusing to estimate")

    @property
    def weak_proxy(self) -> bool:
        return any(r.weak_proxy for r in self.reports.values())

    def diagnostics(self) -> Dict[str, dict]:
        return {tag: rep.to_dict() for tag, rep in self.reports.items()}


def bridges_for(methods: Iterable[str]) -> Tuple[str, ...]:
    need = set()
    for meth in methods:
        if meth not in REQUIRED:
            raise ValueError(f"unknown method {meth!r}; expected one of {METHODS}")
        need.update(REQUIRED[meth])
    return tuple(b for b in BRIDGES if b in need)


def fit_bridges(data: MediationDataset, spec: Optional[BridgeSpec] = None, bridges: Sequence[str] = BRIDGES,
                inits: Optional[Dict[str, np.ndarray]] = None) -> FittedBridges:
    """Fit the requested bridges in dependency order (h1 before h0, q0 before q1)."""
    spec = spec or BridgeSpec.default(data.p_x)
    ds = Designs(data, spec)
    inits = inits or {}
    want = set(bridges)
    if "h0" in want:
        want.add("h1")
    if "q1" in want:
        want.add("q0")
    params, reports = BridgeParams(), {}
    if "h1" in want:
        params.beta1, reports["h1"] = fit_beta1(data, designs=ds)
    if "h0" in want:
        params.beta0, reports["h0"] = fit_beta0(data, spec, params.beta1, designs=ds)
    if "q0" in want:
        params.gamma0, reports["q0"] = fit_gamma0(data, init=inits.get("q0"), designs=ds)
    if "q1" in want:
        params.gamma1, reports["q1"] = fit_gamma1(data, spec, params.gamma0, init=inits.get("q1"), designs=ds)
    params.names = {_PARAM[t]: coef_names(t, data) for t in reports}
    return FittedBridges(params, spec, reports, ds)


def with_params(fb: FittedBridges, **overrides) -> FittedBridges:
    """Copy with some coefficient vectors replaced (e.g. to probe robustness)."""
    params = replace(fb.params, **{k: np.asarray(v, dtype=float) for k, v in overrides.items()})
    return replace(fb, params=params)


def mr_combine(a, y, h1, h0, q0, q1) -> np.ndarray:
    """A q1 (Y - h1) + (1 - A) q0 (h1 - h0) + h0, row by row."""
    return a * q1 * (y - h1) + (1.0 - a) * q0 * (h1 - h0) + h0


def psi_summand(method: str, fb: FittedBridges) -> np.ndarray:
    """Per-row contribution whose sample mean is the method's estimate of psi."""
    ds, p = fb.designs, fb.params
    a, y = ds.a, ds.y
    if method == "P-OR":
        return ds.h0(p.beta0)
    if method == "P-hybrid":
        return (1.0 - a) * ds.q0(p.gamma0) * ds.h1(p.beta1)
    if method == "P-IPW":
        return a * ds.q1(p.gamma1, p.gamma0) * y
    if method == "P-MR":
        h1, h0 = ds.h1(p.beta1), ds.h0(p.beta0)
        q0, q1 = ds.q0(p.gamma0), ds.q1(p.gamma1, p.gamma0)
        return mr_combine(a, y, h1, h0, q0, q1)
    raise ValueError(f"unknown method {method!r}")


def _psi(method: str, bridges: FittedBridges) -> EstimateResult:
    bridges.require(REQUIRED[method])
    point = float(np.mean(psi_summand(method, bridges)))
    return EstimateResult("psi_10", method, point, diagnostics=bridges.diagnostics())


def psi_por(data: MediationDataset, bridges: FittedBridges) -> EstimateResult:
    """Mean of h0(W, X) over all rows."""
    return _psi("P-OR", bridges)


def psi_phybrid(data: MediationDataset, bridges: FittedBridges) -> EstimateResult:
    """Mean of (1 - A) q0(Z, X) h1(W, M, X)."""
    return _psi("P-hybrid", bridges)


def psi_pipw(data: MediationDataset, bridges: FittedBridges) -> EstimateResult:
    """Mean of A q1(Z, M, X) Y."""
    return _psi("P-IPW", bridges)


def psi_pmr(data: MediationDataset, bridges: FittedBridges) -> EstimateResult:
    """Influence-function based estimator; consistent if any one of the
    (h1, h0), (h1, q0) or (q0, q1) pairs is correctly specified."""
    return _psi("P-MR", bridges)


PSI_ESTIMATORS = {"P-OR": psi_por, "P-hybrid": psi_phybrid, "P-IPW": psi_pipw, "P-MR": psi_pmr}


# --- doubly robust E[Y(a)] -------------------------------------------------


@dataclass
class DRBridges:
    """Outcome and treatment bridges for E[Y(a)] in a single arm.

    Outcome bridge  ht(W, X) = (1, W, X).b  solves  E[I(A=a)(Y - ht)(1, Z, X)] = 0
    Treatment bridge qt(Z, X) = 1 + exp(-(1, Z, X).g)  solves  E[{I(A=a) qt - 1}(1, W, X)] = 0
    """

    arm: int
    b: np.ndarray
    g: np.ndarray
    reports: Dict[str, SolveReport]
    f: np.ndarray
    c: np.ndarray
    gz: np.ndarray
    d: np.ndarray
    ind: np.ndarray
    y: np.ndarray

    def h(self) -> np.ndarray:
        return self.f @ self.b

    def q(self) -> np.ndarray:
        return _q0_parts(self.g, self.gz)[0]

    def summand(self) -> np.ndarray:
        h = self.h()
        return self.ind * self.q() * (self.y - h) + h

    @property
    def weak_proxy(self) -> bool:
        return any(r.weak_proxy for r in self.reports.values())


def fit_dr_bridges(data: MediationDataset, arm: int, init=None) -> DRBridges:
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    one = np.ones((data.n, 1))
    f = np.hstack([one, data.w, data.x])
    c = np.hstack([one, data.z, data.x])
    gz = np.hstack([one, data.z, data.x])
    d = np.hstack([one, data.w, data.x])
    ind = (data.a == arm).astype(float)
    if c.shape[1] != f.shape[1]:
        raise ValueError("doubly robust bridges need p_z = p_w")
    rep_h = _linear_solve(ind, c, f, data.y, f"ht{arm}")
    n = data.n

    def residual(g):
        return d.T @ (ind * _q0_parts(g, gz)[0] - 1.0) / n

    def jacobian(g):
        return -(d * (ind * _q0_parts(g, gz)[1])[:, None]).T @ gz / n

    rep_q = solve_with_restarts(MomentSystem(residual, jacobian, gz.shape[1]), np.zeros(gz.shape[1]) if init is None else init)
    mask_arm = data.a == arm
    for rep, endog, instr in ((rep_h, data.w, data.z), (rep_q, data.z, data.w)):
        rep.relevance_f = relevance_f(endog, instr, np.hstack([one, data.x]), mask_arm)
        if np.isfinite(rep.relevance_f) and rep.relevance_f < WEAK_PROXY_F:
            rep.warnings.append(f"weak proxy: arm-{arm} first-stage F = {rep.relevance_f:.2f} < {WEAK_PROXY_F:g}")
    return DRBridges(arm, rep_h.params, rep_q.params, {f"ht{arm}": rep_h, f"qt{arm}": rep_q},
                     f, c, gz, d, ind, data.y)


def delta_pdr(data: MediationDataset, arm: int, dr: Optional[DRBridges] = None) -> EstimateResult:
    """Proximal doubly robust estimate of E[Y(arm)]."""
    dr = dr or fit_dr_bridges(data, arm)
    point = float(np.mean(dr.summand()))
    diag = {k: r.to_dict() for k, r in dr.reports.items()}
    return EstimateResult(f"ey{arm}", "P-DR", point, diagnostics=diag)


def effects(data: MediationDataset, bridges: FittedBridges, method: str,
            dr0: Optional[DRBridges] = None, dr1: Optional[DRBridges] = None) -> List[EstimateResult]:
    """NDE(0) = psi - E[Y(0)], NIE(1) = E[Y(1)] - psi, total = E[Y(1)] - E[Y(0)]."""
    psi = PSI_ESTIMATORS[method](data, bridges).point
    d0 = delta_pdr(data, 0, dr0).point
    d1 = delta_pdr(data, 1, dr1).point
    diag = bridges.diagnostics()
    return [
        EstimateResult("nde_0", method, psi - d0, diagnostics=diag),
        EstimateResult("nie_1", method, d1 - psi, diagnostics=diag),
        EstimateResult("total", method, d1 - d0, diagnostics=diag),
    ]


def flipped_effects(data: MediationDataset, method: str, spec: Optional[BridgeSpec] = None,
                    dr0: Optional[DRBridges] = None, dr1: Optional[DRBridges] = None) -> List[EstimateResult]:
    """NDE(1) and NIE(0) through E[Y{0, M(1)}], estimated by relabelling the arms."""
    flipped = data.flip_treatment()
    fb = fit_bridges(flipped, spec, bridges_for([method]))
    psi01 = PSI_ESTIMATORS[method](flipped, fb).point
    d0 = delta_pdr(data, 0, dr0).point
    d1 = delta_pdr(data, 1, dr1).point
    diag = fb.diagnostics()
    return [
        EstimateResult("nde_1", method, d1 - psi01, diagnostics=diag),
        EstimateResult("nie_0", method, psi01 - d0, diagnostics=diag),
    ]


# --- naive benchmark -------------------------------------------------------


def naive_ols(data: MediationDataset, include_z: bool = True) -> EstimateResult:
    """Coefficient of A from least squares of Y on (1, A, M, X, [Z,] W), classical SE."""
    blocks = [np.ones(data.n), data.a, data.m, data.x] + ([data.z] if include_z else []) + [data.w]
    design = np.column_stack(blocks)
    coef, _, rank, _ = np.linalg.lstsq(design, data.y, rcond=None)
    if rank < design.shape[1]:
        raise EstimationError("rank-deficient regression design")
    resid = data.y - design @ coef
    dof = data.n - design.shape[1]
    sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = sigma2 * np.linalg.inv(design.T @ design)
    return EstimateResult("nde_0", "OLS", float(coef[1])).with_se(float(np.sqrt(max(cov[1, 1], 0.0))))


# --- randomized trials -----------------------------------------------------


def fit_eta0(data: MediationDataset, bridges: FittedBridges) -> np.ndarray:
    """Coefficients of the least-squares projection of h1(W, M, X) on (1, W, X) among controls."""
    bridges.require(("h1",))
    ds = bridges.designs
    ctrl = ds.a == 0
    if not ctrl.any():
        raise EstimationError("no control rows to fit eta0")
    target = ds.h1(bridges.params.beta1)[ctrl]
    design = eta0_design(data, bridges.spec)[ctrl]
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        raise EstimationError("rank-deficient eta0 design")
    return coef


def eta0_design(data: MediationDataset, spec: BridgeSpec) -> np.ndarray:
    return np.hstack([np.ones((data.n, 1)), data.w, spec.h0.apply(data.x)])


def q1_rct_design(data: MediationDataset, spec: BridgeSpec):
    one = np.ones((data.n, 1))
    xm = spec.q1.apply(data.x)
    g = np.hstack([one, data.z, data.m[:, None], xm])
    d = np.hstack([one, data.w, data.m[:, None], xm])
    return g, d


def fit_q1_rct(data: MediationDataset, spec: Optional[BridgeSpec] = None, init=None):
    """Trial version of q1 = exp((1, Z, M, X).g), solving
    sum_i {A_i q1_i - (1 - A_i)} (1, W_i, M_i, X_i) = 0."""
    spec = spec or BridgeSpec.default(data.p_x)
    g1, d1 = q1_rct_design(data, spec)
    if g1.shape[1] != d1.shape[1]:
        raise ValueError("trial q1 system needs p_z = p_w")
    a, n = data.a, data.n

    def residual(g):
        return d1.T @ (a * clamped_exp(g1 @ g)[0] - (1.0 - a)) / n

    def jacobian(g):
        return (d1 * (a * clamped_exp(g1 @ g)[0])[:, None]).T @ g1 / n

    rep = solve_with_restarts(MomentSystem(residual, jacobian, g1.shape[1]), np.zeros(g1.shape[1]) if init is None else init)
    return rep.params, rep


def propensity_control(data: MediationDataset, model: Union[float, str] = "marginal") -> np.ndarray:
    """f(A=0 | X_i) per row: a known constant, the marginal share, or a logistic fit on X."""
    if isinstance(model, (int, float)):
        p0 = np.full(data.n, float(model))
    elif model == "marginal":
        p0 = np.full(data.n, float(np.mean(1.0 - data.a)))
    elif model == "logistic":
        import statsmodels.api as sm

        exog = sm.add_constant(data.x, has_constant="add")
        fit = sm.Logit(data.a, exog).fit(disp=0)
        p0 = 1.0 - fit.predict(exog)
    else:
        raise ValueError(f"unknown propensity model {model!r}")
    if np.any(p0 <= 0.01) or np.any(p0 >= 0.99):
        raise EstimationError("propensity estimate outside (0.01, 0.99)")
    return p0


@dataclass
class RCTNuisance:
    beta1: np.ndarray
    eta0: np.ndarray
    gamma1: Optional[np.ndarray]
    p0: np.ndarray


def rct_nuisance(data: MediationDataset, bridges: FittedBridges, propensity: Union[float, str] = "marginal",
                 need_q1: bool = True) -> RCTNuisance:
    gamma1 = fit_q1_rct(data, bridges.spec)[0] if need_q1 else None
    return RCTNuisance(bridges.params.beta1, fit_eta0(data, bridges), gamma1, propensity_control(data, propensity))


def rct_summand(variant: str, data: MediationDataset, spec: BridgeSpec, nu: RCTNuisance) -> np.ndarray:
    a, y = data.a, data.y
    eta = eta0_design(data, spec) @ nu.eta0
    if variant == "OR":
        return eta
    g1, _ = q1_rct_design(data, spec)
    q1 = clamped_exp(g1 @ nu.gamma1)[0]
    if variant == "IPW":
        return a * q1 * y / nu.p0
    if variant == "MR":
        h1 = Designs(data, spec).h1(nu.beta1)
        return a * q1 * (y - h1) / nu.p0 + (1.0 - a) * (h1 - eta) / nu.p0 + eta
    raise ValueError(f"unknown trial variant {variant!r}; expected one of {RCT_VARIANTS}")


def psi_rct(data: MediationDataset, bridges: FittedBridges, propensity: Union[float, str] = "marginal",
            variant: str = "MR", nuisance: Optional[RCTNuisance] = None) -> EstimateResult:
    """Trial estimators of psi when A is randomized at baseline."""
    if variant not in RCT_VARIANTS:
        raise ValueError(f"unknown trial variant {variant!r}; expected one of {RCT_VARIANTS}")
    nu = nuisance or rct_nuisance(data, bridges, propensity, need_q1=variant != "OR")
    point = float(np.mean(rct_summand(variant, data, bridges.spec, nu)))
    return EstimateResult("psi_10", f"RCT-{variant}", point, diagnostics=bridges.diagnostics())
