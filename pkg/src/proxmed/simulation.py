"""Simulation harness: the linear-Gaussian proxy mediation mechanism, counterfactual
oracle truth, and the nine Monte Carlo experiments.

Mechanism (defaults):

    (X1, X2, U) ~ N((0.25, 0.25, 0), Sigma)
    A | X, U    ~ Bernoulli(expit(-0.5 X1 - 0.5 X2 - 0.4 U))
    Z | A, X, U ~ N(0.2 - 0.52 A + 0.2 X1 + 0.2 X2 - 0.7 U, 1)
    W | X, U    ~ N(0.3 + 0.2 X1 + 0.2 X2 - 0.6 U, 1)
    M | A, X, U ~ N(-0.3 A - 0.5 X1 - 0.5 X2 + 0.4 U, 1)
    Y           = 2 + 2 A + M + 2 W - X1 - X2 - U + 2 e,   e ~ N(0, 1)

Random streams: every (seed, replicate, channel) triple gets its own Philox
generator, so draws never depend on how replicates are scheduled.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .bridges import BridgeSpec
from .data import MediationDataset
from .rng import stream

log = logging.getLogger(__name__)

CHANNELS = ("xu", "a", "z", "w", "m", "y")


@dataclass(frozen=True)
class DgpConfig:
    mean: Tuple[float, float, float] = (0.25, 0.25, 0.0)
    cov: Tuple[Tuple[float, ...], ...] = ((0.25, 0.0, 0.05), (0.0, 0.25, 0.05), (0.05, 0.05, 1.0))
    # treatment: P(A=1) = expit(a_0 + a_x.X + a_u U)
    a_0: float = 0.0
    a_x: Tuple[float, float] = (-0.5, -0.5)
    a_u: float = -0.4
    # treatment-inducing proxy
    z_0: float = 0.2
    z_a: float = -0.52
    z_x: Tuple[float, float] = (0.2, 0.2)
    z_u: float = -0.7
    sigma_z: float = 1.0
    # outcome-inducing proxy; w_a != 0 breaks the W exclusion restriction
    w_0: float = 0.3
    w_a: float = 0.0
    w_x: Tuple[float, float] = (0.2, 0.2)
    w_u: float = -0.6
    sigma_w: float = 1.0
    # mediator
    m_0: float = 0.0
    m_a: float = -0.3
    m_x: Tuple[float, float] = (-0.5, -0.5)
    m_u: float = 0.4
    sigma_m: float = 1.0
    # outcome; y_z != 0 breaks the Z exclusion restriction
    y_0: float = 2.0
    y_a: float = 2.0
    y_m: float = 1.0
    y_w: float = 2.0
    y_x: Tuple[float, float] = (-1.0, -1.0)
    y_u: float = -1.0
    y_z: float = 0.0
    sigma_y: float = 2.0

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
            raise ValueError("cov must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("cov must be positive semidefinite")
        for s in ("sigma_z", "sigma_w", "sigma_m", "sigma_y"):
            if getattr(self, s) < 0:
                raise ValueError(f"{s} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        fields = {k: tuple(map(tuple, v)) if k == "cov" else (tuple(v) if isinstance(v, list) else v)
                  for k, v in d.items()}
        return cls(**fields)

    @property
    def is_linear(self) -> bool:
        return True

    def randomized(self, p_treat: float = 0.5) -> "DgpConfig":
        """Trial variant: A ~ Bernoulli(p_treat) independent of (X, U); Z no longer shifts with A."""
        logit = float(np.log(p_treat / (1.0 - p_treat)))
        return replace(self, a_0=logit, a_x=(0.0, 0.0), a_u=0.0, z_a=0.0)


def _cov_root(cov) -> np.ndarray:
    vals, vecs = np.linalg.eigh(np.asarray(cov, dtype=float))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class _Draws:
    x: np.ndarray
    u: np.ndarray
    a: np.ndarray
    z: np.ndarray
    e_w: np.ndarray
    e_m: np.ndarray
    e_y: np.ndarray


def _draw(cfg: DgpConfig, n: int, seed: int, rep: int) -> _Draws:
    g = {c: stream(seed, rep, i) for i, c in enumerate(CHANNELS)}
    xu = np.asarray(cfg.mean) + g["xu"].standard_normal((n, 3)) @ _cov_root(cfg.cov).T
    x, u = xu[:, :2], xu[:, 2]
    p = expit(cfg.a_0 + x @ np.asarray(cfg.a_x) + cfg.a_u * u)
    a = (g["a"].random(n) < p).astype(float)
    z = cfg.z_0 + cfg.z_a * a + x @ np.asarray(cfg.z_x) + cfg.z_u * u + cfg.sigma_z * g["z"].standard_normal(n)
    return _Draws(x, u, a, z, g["w"].standard_normal(n), g["m"].standard_normal(n), g["y"].standard_normal(n))


def _w(cfg, d: _Draws, a):
    return cfg.w_0 + cfg.w_a * a + d.x @ np.asarray(cfg.w_x) + cfg.w_u * d.u + cfg.sigma_w * d.e_w


def _m(cfg, d: _Draws, a):
    return cfg.m_0 + cfg.m_a * a + d.x @ np.asarray(cfg.m_x) + cfg.m_u * d.u + cfg.sigma_m * d.e_m


def _y(cfg, d: _Draws, a, m, w):
    return (cfg.y_0 + cfg.y_a * a + cfg.y_m * m + cfg.y_w * w + d.x @ np.asarray(cfg.y_x)
            + cfg.y_u * d.u + cfg.y_z * d.z + cfg.sigma_y * d.e_y)


def generate(cfg: DgpConfig, n: int, seed: int, rep: int = 0) -> Tuple[MediationDataset, np.ndarray]:
    """Draw n rows; returns the observed dataset and the latent confounder U."""
    d = _draw(cfg, n, seed, rep)
    w = _w(cfg, d, d.a)
    m = _m(cfg, d, d.a)
    y = _y(cfg, d, d.a, m, w)
    data = MediationDataset(y=y, a=d.a, m=m, x=d.x, z=d.z[:, None], w=w[:, None],
                            x_names=("x1", "x2"), z_names=("z1",), w_names=("w1",))
    return data, d.u


@dataclass
class OracleTruth:
    psi: float
    ey0: float
    ey1: float
    nde0: float
    nie1: float
    method: str
    se: Optional[Dict[str, float]] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_treated(cfg: DgpConfig, nodes: int = 80) -> float:
    """E[A] by Gauss-Hermite quadrature over the normal linear index."""
    mean = np.asarray(cfg.mean)
    cov = np.asarray(cfg.cov)
    coef = np.array([*cfg.a_x, cfg.a_u])
    mu = cfg.a_0 + coef @ mean
    sd = float(np.sqrt(coef @ cov @ coef))
    t, wts = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(wts * expit(mu + sd * t)) / np.sqrt(2 * np.pi))


def closed_form_truth(cfg: DgpConfig) -> OracleTruth:
    """Counterfactual means by plugging expectations through the linear equations.

    Z is a pre-treatment quantity (its factual value enters Y); W(a) follows the
    W equation with A set to a.
    """
    ex = np.asarray(cfg.mean[:2])
    eu = cfg.mean[2]
    ez = cfg.z_0 + cfg.z_a * _mean_treated(cfg) + ex @ np.asarray(cfg.z_x) + cfg.z_u * eu

    def ew(a):
        return cfg.w_0 + cfg.w_a * a + ex @ np.asarray(cfg.w_x) + cfg.w_u * eu

    def em(a):
        return cfg.m_0 + cfg.m_a * a + ex @ np.asarray(cfg.m_x) + cfg.m_u * eu

    def ey(a, a_star):
        return (cfg.y_0 + cfg.y_a * a + cfg.y_m * em(a_star) + cfg.y_w * ew(a) + ex @ np.asarray(cfg.y_x)
                + cfg.y_u * eu + cfg.y_z * ez)

    psi, ey0, ey1 = ey(1, 0), ey(0, 0), ey(1, 1)
    return OracleTruth(psi, ey0, ey1, psi - ey0, ey1 - psi, "closed_form")


def oracle_truth(cfg: DgpConfig, n_mc: int = 1_000_000, seed: int = 0, chunk: int = 1_000_000) -> OracleTruth:
    """Brute-force counterfactual simulation of E[Y{1,M(0)}], E[Y(0)], E[Y(1)]."""
    sums = {k: 0.0 for k in ("psi", "ey0", "ey1", "nde0", "nie1")}
    sq = dict(sums)
    done, block = 0, 0
    while done < n_mc:
        k = min(chunk, n_mc - done)
        d = _draw(cfg, k, seed, block)
        m0, m1 = _m(cfg, d, 0.0), _m(cfg, d, 1.0)
        w0, w1 = _w(cfg, d, 0.0), _w(cfg, d, 1.0)
        y10 = _y(cfg, d, 1.0, m0, w1)
        y00 = _y(cfg, d, 0.0, m0, w0)
        y11 = _y(cfg, d, 1.0, m1, w1)
        for key, v in (("psi", y10), ("ey0", y00), ("ey1", y11), ("nde0", y10 - y00), ("nie1", y11 - y10)):
            sums[key] += float(v.sum())
            sq[key] += float((v * v).sum())
        done += k
        block += 1
    means = {k: sums[k] / n_mc for k in sums}
    se = {k: float(np.sqrt(max(sq[k] / n_mc - means[k] ** 2, 0.0) / n_mc)) for k in sums}
    return OracleTruth(means["psi"], means["ey0"], means["ey1"], means["nde0"], means["nie1"], "monte_carlo", se)


# --- Monte Carlo experiments -------------------------------------------------

# id -> (misspecified bridges, DgpConfig overrides, OLS adjusts for Z)
EXPERIMENTS: Dict[int, Tuple[Tuple[str, ...], dict, bool]] = {
    1: ((), {}, True),
    2: (("q1", "q0"), {}, True),
    3: (("q1", "h0"), {}, True),
    4: (("h1", "h0"), {}, True),
    5: ((), {"a_u": 0.0, "m_u": 0.0, "y_u": 0.0}, False),
    6: ((), {"y_z": -0.5}, True),
    7: ((), {"w_a": 0.2}, True),
    8: ((), {"w_u": 0.05}, True),
    9: ((), {"z_u": 0.05}, True),
}
ESTIMATORS = ("P-IPW", "P-hybrid", "P-OR", "P-MR", "OLS")
FAIL_FLAG_SHARE = 0.10


@dataclass(frozen=True)
class ExperimentSpec:
    """One Monte Carlo experiment: mechanism overrides, bridge misspecification, size."""

    id: int
    n: int = 2000
    reps: int = 1000
    seed: int = 1
    misspecified: Tuple[str, ...] = ()
    overrides: Dict[str, float] = field(default_factory=dict)
    ols_include_z: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.n < 1 or self.reps < 1:
            raise ValueError("n and reps must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        object.__setattr__(self, "misspecified", tuple(self.misspecified))
        object.__setattr__(self, "overrides", dict(self.overrides))
        self.config()
        BridgeSpec.misspecified(2, self.misspecified)

    @classmethod
    def for_id(cls, exp_id: int, **kw) -> "ExperimentSpec":
        if exp_id not in EXPERIMENTS:
            raise ValueError(f"experiment id must be one of {sorted(EXPERIMENTS)}, got {exp_id}")
        mis, over, with_z = EXPERIMENTS[exp_id]
        base = dict(misspecified=mis, overrides=over, ols_include_z=with_z)
        base.update(kw)
        return cls(exp_id, **base)

    def config(self) -> DgpConfig:
        return replace(DgpConfig(), **self.overrides)

    def bridge_spec(self) -> BridgeSpec:
        return BridgeSpec.misspecified(len(DgpConfig().a_x), self.misspecified)

    def to_dict(self) -> dict:
        return {"id": self.id, "n": self.n, "reps": self.reps, "seed": self.seed,
                "misspecified": list(self.misspecified), "overrides": dict(self.overrides),
                "ols_include_z": self.ols_include_z, "threads": self.threads}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        exp_id = int(d.pop("id"))
        return cls.for_id(exp_id, **d)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EstimatorSummary:
    estimator: str
    n_used: int
    bias: float
    median_bias: float
    mse: float
    coverage: float
    mean_length: float
    median_length: float


@dataclass
class MonteCarloReport:
    spec: ExperimentSpec
    truth: float
    rows: List[EstimatorSummary]
    n_failed: int
    n_weak: int
    failures: Dict[str, int]
    points: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def flagged(self) -> bool:
        return self.n_failed > FAIL_FLAG_SHARE * self.spec.reps

    def row(self, estimator: str) -> EstimatorSummary:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def to_dict(self) -> dict:
        return {
            "experiment": self.spec.to_dict(),
            "truth_nde0": self.truth,
            "n_failed": self.n_failed,
            "n_weak_proxy": self.n_weak,
            "flagged": self.flagged,
            "failures": self.failures,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path) -> None:
        import csv

        cols = list(asdict(self.rows[0]))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["experiment", *cols])
            for r in self.rows:
                w.writerow([self.spec.id, *asdict(r).values()])

    def table(self) -> str:
        head = f"{'Exp':>3}  {'Est':<9}{'Bias':>8}{'Med.Bias':>10}{'MSE':>10}{'Coverage':>10}{'MeanLen':>10}{'MedLen':>9}{'Used':>6}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{self.spec.id:>3}  {r.estimator:<9}{r.bias:>8.3f}{r.median_bias:>10.3f}{r.mse:>10.3f}"
                         f"{r.coverage:>10.3f}{r.mean_length:>10.3f}{r.median_length:>9.3f}{r.n_used:>6}")
        lines.append(f"truth NDE(0) = {self.truth:.4f}; reps = {self.spec.reps}, failed = {self.n_failed}, "
                     f"weak-proxy reps = {self.n_weak}" + ("; FLAGGED (>10% failures)" if self.flagged else ""))
        return "\n".join(lines)


def _one_rep(spec: ExperimentSpec, cfg: DgpConfig, bspec: BridgeSpec, r: int) -> dict:
    from .estimators import EstimationError, fit_bridges, fit_dr_bridges, naive_ols, psi_summand
    from .inference import InferenceError, sandwich_se
    from .solvers import WEAK_PROXY_F, Designs, SolverError

    data, _ = generate(cfg, spec.n, spec.seed, r)
    ds = Designs(data, bspec)
    weak = any(ds.relevance(t) < WEAK_PROXY_F for t in ("h1", "h0", "q0", "q1"))
    out = {"weak": bool(weak), "error": None, "est": {}}
    try:
        fb = fit_bridges(data, bspec)
        dr0 = fit_dr_bridges(data, 0)
        delta = float(dr0.summand().mean())
        for meth in ESTIMATORS[:4]:
            point = float(psi_summand(meth, fb).mean()) - delta
            out["est"][meth] = (point, sandwich_se(data, fb, meth, dr0)[0])
    except (SolverError, EstimationError, InferenceError, np.linalg.LinAlgError) as err:
        out["error"] = type(err).__name__
        out["est"] = {}
        return out
    ols = naive_ols(data, include_z=spec.ols_include_z)
    out["est"]["OLS"] = (ols.point, ols.se)
    return out


def _summarize(name: str, pts: np.ndarray, ses: np.ndarray, truth: float) -> EstimatorSummary:
    if pts.size == 0:
        nan = float("nan")
        return EstimatorSummary(name, 0, nan, nan, nan, nan, nan, nan)
    err = pts - truth
    half = 1.959963984540054 * ses
    length = 2 * half
    return EstimatorSummary(
        name, int(pts.size), float(err.mean()), float(np.median(pts) - truth), float(np.mean(err**2)),
        float(np.mean(np.abs(err) <= half)), float(length.mean()), float(np.median(length)),
    )


def run_experiment(spec: ExperimentSpec, truth: Optional[float] = None) -> MonteCarloReport:
    """Run all replicates; replicate r draws from streams (spec.seed, r, channel).

    A replicate where any bridge solve or variance computation fails is
    recorded and excluded from every estimator's aggregates.
    """
    cfg, bspec = spec.config(), spec.bridge_spec()
    truth = closed_form_truth(cfg).nde0 if truth is None else float(truth)
    if spec.threads == 1:
        recs = [_one_rep(spec, cfg, bspec, r) for r in range(spec.reps)]
    else:
        from joblib import Parallel, delayed

        recs = Parallel(n_jobs=spec.threads, batch_size=8)(
            delayed(_one_rep)(spec, cfg, bspec, r) for r in range(spec.reps))
    failures: Dict[str, int] = {}
    for rec in recs:
        if rec["error"]:
            failures[rec["error"]] = failures.get(rec["error"], 0) + 1
    ok = [rec for rec in recs if not rec["error"]]
    rows, points = [], {}
    for name in ESTIMATORS:
        pts = np.array([rec["est"][name][0] for rec in ok])
        ses = np.array([rec["est"][name][1] for rec in ok])
        rows.append(_summarize(name, pts, ses, truth))
        points[name] = pts
    report = MonteCarloReport(spec, float(truth), rows, len(recs) - len(ok),
                              sum(rec["weak"] for rec in recs), failures, points)
    if report.flagged:
        log.warning("experiment %d: %d of %d replicates failed", spec.id, report.n_failed, spec.reps)
    return report
