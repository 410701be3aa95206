"""Exact finite-law checks of proximal identification.

A ``DiscreteLaw`` is built from structural kernels

    P(U), P(A | U), P(Z | U, A), P(W | U), P(M | A, U), P(Y | A, M, U, W)

so the proxy independencies hold by construction: Z reaches M and Y only
through (A, U), and W is unaffected by A, Z and M. Covariates are absorbed
(a single stratum). Each bridge equation is a finite linear system per
conditioning cell.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .rng import stream

RANK_TOL = 1e-10
SOLVE_TOL = 1e-9
MAX_SUPPORT = 4


class CompletenessError(ValueError):
    """An identification matrix lacks the rank needed for a unique psi."""

    def __init__(self, msg: str, cell: Tuple = ()):
        super().__init__(msg)
        self.cell = cell


def _kernel(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if np.any(arr < 0) or not np.isfinite(arr).all():
        raise ValueError(f"{name}: probabilities must be finite and non-negative")
    if not np.allclose(arr.sum(axis=-1), 1.0, atol=1e-12):
        raise ValueError(f"{name}: conditional distributions must sum to 1 over the last axis")
    return arr


@dataclass
class DiscreteLaw:
    p_u: np.ndarray          # (U,)
    p_a_u: np.ndarray        # (U, 2)
    p_z_ua: np.ndarray       # (U, 2, Z)
    p_w_u: np.ndarray        # (U, W)
    p_m_au: np.ndarray       # (2, U, M)
    p_y_amuw: np.ndarray     # (2, M, U, W, Y)
    y_values: np.ndarray     # (Y,)

    def __post_init__(self):
        self.p_u = _kernel(self.p_u, "P(U)")
        self.p_a_u = _kernel(self.p_a_u, "P(A|U)")
        self.p_z_ua = _kernel(self.p_z_ua, "P(Z|U,A)")
        self.p_w_u = _kernel(self.p_w_u, "P(W|U)")
        self.p_m_au = _kernel(self.p_m_au, "P(M|A,U)")
        self.p_y_amuw = _kernel(self.p_y_amuw, "P(Y|A,M,U,W)")
        self.y_values = np.asarray(self.y_values, dtype=float)
        ku, kz, kw, km, ky = self.sizes
        shapes = {
            "p_a_u": (ku, 2), "p_z_ua": (ku, 2, kz), "p_w_u": (ku, kw),
            "p_m_au": (2, ku, km), "p_y_amuw": (2, km, ku, kw, ky), "y_values": (ky,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if max(self.sizes) > MAX_SUPPORT:
            raise ValueError(f"supports are limited to {MAX_SUPPORT} categories")

    @property
    def sizes(self) -> Tuple[int, int, int, int, int]:
        """(|U|, |Z|, |W|, |M|, |Y|)."""
        return (self.p_u.shape[0], self.p_z_ua.shape[2], self.p_w_u.shape[1],
                self.p_m_au.shape[2], self.p_y_amuw.shape[4])

    def joint(self) -> np.ndarray:
        """Full table P(U, A, Z, W, M, Y)."""
        return np.einsum("u,ua,uaz,uw,aum,amuwy->uazwmy", self.p_u, self.p_a_u, self.p_z_ua,
                         self.p_w_u, self.p_m_au, self.p_y_amuw)

    def observed(self) -> np.ndarray:
        """P(A, Z, W, M, Y), U marginalized."""
        return self.joint().sum(axis=0)

    def to_dict(self) -> dict:
        names = ("p_u", "p_a_u", "p_z_ua", "p_w_u", "p_m_au", "p_y_amuw", "y_values")
        return {k: getattr(self, k).tolist() for k in names}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteLaw":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_json(cls, path) -> "DiscreteLaw":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _dirichlet(g: np.random.Generator, shape, k: int, conc: float = 1.0) -> np.ndarray:
    return g.dirichlet(np.full(k, conc), size=shape)


def _tilted(g: np.random.Generator, k_u: int, k: int, strength: float) -> np.ndarray:
    """Rows P(. | u) that lean towards category u mod k (association with U)."""
    base = _dirichlet(g, (k_u,), k)
    lean = np.zeros((k_u, k))
    lean[np.arange(k_u), np.arange(k_u) % k] = 1.0
    return (1.0 - strength) * base + strength * lean


def random_law(seed: int, k_u: int = 2, k_z: int = 2, k_w: int = 2, k_m: int = 2, k_y: int = 2,
               strength: float = 0.6) -> DiscreteLaw:
    """Random strictly positive law; ``strength`` in [0, 1) sets the U-Z and U-W association."""
    if not 0.0 <= strength < 1.0:
        raise ValueError("strength must lie in [0, 1)")
    g = stream(seed, 0xD15C)
    p_u = _dirichlet(g, (), k_u, 2.0)
    p_a_u = _dirichlet(g, (k_u,), 2, 2.0)
    p_z_ua = np.stack([_tilted(g, k_u, k_z, strength) for _ in range(2)], axis=1)
    p_w_u = _tilted(g, k_u, k_w, strength)
    p_m_au = _dirichlet(g, (2, k_u), k_m, 2.0)
    p_y_amuw = _dirichlet(g, (2, k_m, k_u, k_w), k_y, 2.0)
    y_values = np.sort(g.normal(0.0, 2.0, size=k_y))
    return DiscreteLaw(p_u, p_a_u, p_z_ua, p_w_u, p_m_au, p_y_amuw, y_values)


def independent_z_law(seed: int) -> DiscreteLaw:
    """Binary law where Z carries no information about U (completeness fails)."""
    law = random_law(seed)
    k_u = law.p_u.shape[0]
    pz = law.p_z_ua[0]
    law.p_z_ua = np.broadcast_to(pz, (k_u,) + pz.shape).copy()
    return law


def degenerate_u_law(seed: int) -> DiscreteLaw:
    """Binary observables with a single-valued U (no unmeasured confounding)."""
    big = random_law(seed)
    return DiscreteLaw(np.ones(1), big.p_a_u[:1], big.p_z_ua[:1], big.p_w_u[:1], big.p_m_au[:, :1],
                       big.p_y_amuw[:, :, :1], big.y_values)


# --- ground truth ------------------------------------------------------------


def true_psi_brute(law: DiscreteLaw) -> float:
    """Latent g-formula sum_u sum_m E[Y | u, A=1, m] P(m | u, A=0) P(u) from the joint table."""
    j = law.joint()
    p_uam = j.sum(axis=(2, 3, 5))                                   # (U, A, M)
    ey_uam = np.einsum("uazwmy,y->uam", j, law.y_values) / p_uam
    p_m_given_u0 = p_uam[:, 0, :] / p_uam[:, 0, :].sum(axis=1, keepdims=True)
    p_u = p_uam.sum(axis=(1, 2))
    return float(np.einsum("u,um,um->", p_u, p_m_given_u0, ey_uam[:, 1, :]))


def counterfactual_distribution(law: DiscreteLaw) -> Dict[float, float]:
    """P(Y{1, M(0)} = y) by enumerating unit types through the structural kernels."""
    ku, _, kw, km, ky = law.sizes
    dist = np.zeros(ky)
    for u, w, m0 in itertools.product(range(ku), range(kw), range(km)):
        weight = law.p_u[u] * law.p_w_u[u, w] * law.p_m_au[0, u, m0]
        dist += weight * law.p_y_amuw[1, m0, u, w]
    return {float(v): float(p) for v, p in zip(law.y_values, dist)}


def psi_from_counterfactuals(law: DiscreteLaw) -> float:
    return float(sum(y * p for y, p in counterfactual_distribution(law).items()))


def standard_mediation_formula(law: DiscreteLaw) -> float:
    """sum_m E[Y | A=1, m] P(m | A=0) from observables (valid without latent confounding)."""
    o = law.observed()
    p_am = o.sum(axis=(1, 2, 4))
    ey_am = np.einsum("azwmy,y->am", o, law.y_values) / p_am
    return float(np.sum(ey_am[1] * p_am[0] / p_am[0].sum()))


# --- bridge systems ----------------------------------------------------------


@dataclass
class LinearCell:
    """One conditioning cell of a bridge equation: matrix @ bridge = rhs."""

    bridge: str
    cell: Tuple
    matrix: np.ndarray
    rhs: Optional[np.ndarray] = None


def _cond_rows(table: np.ndarray) -> np.ndarray:
    return table / table.sum(axis=-1, keepdims=True)


def outcome_matrices(law: DiscreteLaw) -> Dict[Tuple, np.ndarray]:
    """P(w | z, A=a, m) for h1 cells and P(w | z, A=0) for the h0 cell (rows index z)."""
    o = law.observed()
    p_azwm = o.sum(axis=4)
    out = {}
    for m in range(law.sizes[3]):
        out[("h1", m)] = _cond_rows(p_azwm[1, :, :, m])
    out[("h0",)] = _cond_rows(p_azwm[0].sum(axis=2))
    return out


def treatment_matrices(law: DiscreteLaw) -> Dict[Tuple, np.ndarray]:
    """P(z | w, A=0) for the q0 cell and P(z | w, A=1, m) for q1 cells (rows index w)."""
    o = law.observed()
    p_azwm = o.sum(axis=4)
    out = {("q0",): _cond_rows(p_azwm[0].sum(axis=2).T)}
    for m in range(law.sizes[3]):
        out[("q1", m)] = _cond_rows(p_azwm[1, :, :, m].T)
    return out


def _solve_cell(mat: np.ndarray, rhs: np.ndarray, cell: Tuple, k_u: int, shift: float = 0.0) -> np.ndarray:
    rank = np.linalg.matrix_rank(mat, tol=RANK_TOL)
    if rank < k_u:
        raise CompletenessError(f"completeness violated in cell {cell}: rank {rank} < |U| = {k_u}", cell)
    sol, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    resid = np.max(np.abs(mat @ sol - rhs))
    if resid > SOLVE_TOL * max(1.0, np.max(np.abs(rhs))):
        raise CompletenessError(f"no bridge solution in cell {cell} (residual {resid:.3g})", cell)
    if shift and rank < mat.shape[1]:
        null = np.linalg.svd(mat)[2][rank:]
        sol = sol + shift * null[0]
    return sol


@dataclass
class IdentificationResult:
    psi_true: float
    psi_h: float
    psi_hybrid: float
    psi_q: float
    h1: np.ndarray       # (W, M)
    h0: np.ndarray       # (W,)
    q0: np.ndarray       # (Z,)
    q1: np.ndarray       # (Z, M)
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(abs(v - self.psi_true) for v in (self.psi_h, self.psi_hybrid, self.psi_q))

    def to_dict(self) -> dict:
        return {
            "psi_true": self.psi_true, "psi_h": self.psi_h, "psi_hybrid": self.psi_hybrid,
            "psi_q": self.psi_q, "max_error": self.max_error,
            "h1": self.h1.tolist(), "h0": self.h0.tolist(), "q0": self.q0.tolist(), "q1": self.q1.tolist(),
            "residuals": self.residuals,
        }


def solve_bridges_discrete(law: DiscreteLaw, null_shift: float = 0.0) -> IdentificationResult:
    """Solve the four bridge equations cell by cell and evaluate psi three ways.

    With ``null_shift`` != 0, every underdetermined cell returns a different
    solution (least-norm plus a multiple of a null-space direction).
    """
    ku, kz, kw, km, _ = law.sizes
    o = law.observed()                                   # (A, Z, W, M, Y)
    yv = law.y_values
    p_azwm = o.sum(axis=4)
    ey_azm = np.einsum("azwmy,y->azm", o, yv) / o.sum(axis=(2, 4))
    outcome, treat = outcome_matrices(law), treatment_matrices(law)
    residuals = {}

    h1 = np.zeros((kw, km))
    for m in range(km):
        mat = outcome[("h1", m)]
        h1[:, m] = _solve_cell(mat, ey_azm[1, :, m], ("h1", m), ku, null_shift)
        residuals[f"h1[m={m}]"] = float(np.max(np.abs(mat @ h1[:, m] - ey_azm[1, :, m])))

    # E[h1(W, M) | z, A=0]
    p_wm_z0 = p_azwm[0] / p_azwm[0].sum(axis=(1, 2), keepdims=True)
    rhs0 = np.einsum("zwm,wm->z", p_wm_z0, h1)
    mat = outcome[("h0",)]
    h0 = _solve_cell(mat, rhs0, ("h0",), ku, null_shift)
    residuals["h0"] = float(np.max(np.abs(mat @ h0 - rhs0)))

    # 1 / P(A=0 | w)
    p_aw = p_azwm.sum(axis=(1, 3))
    inv_p0 = p_aw.sum(axis=0) / p_aw[0]
    mat = treat[("q0",)]
    q0 = _solve_cell(mat, inv_p0, ("q0",), ku, null_shift)
    residuals["q0"] = float(np.max(np.abs(mat @ q0 - inv_p0)))

    # E[q0(Z) | w, A=0, m] P(A=0 | w, m) / P(A=1 | w, m)
    q1 = np.zeros((kz, km))
    p_awm = p_azwm.sum(axis=1)
    for m in range(km):
        p_z_w0m = _cond_rows(p_azwm[0, :, :, m].T)
        rhs = (p_z_w0m @ q0) * p_awm[0, :, m] / p_awm[1, :, m]
        mat = treat[("q1", m)]
        q1[:, m] = _solve_cell(mat, rhs, ("q1", m), ku, null_shift)
        residuals[f"q1[m={m}]"] = float(np.max(np.abs(mat @ q1[:, m] - rhs)))

    p_w = p_azwm.sum(axis=(0, 1, 3))
    psi_h = float(p_w @ h0)
    psi_hybrid = float(np.einsum("zwm,z,wm->", p_azwm[0], q0, h1))
    psi_q = float(np.einsum("zmy,zm,y->", o[1].sum(axis=1), q1, yv))
    return IdentificationResult(true_psi_brute(law), psi_h, psi_hybrid, psi_q, h1, h0, q0, q1, residuals)


# --- completeness ------------------------------------------------------------


@dataclass
class CellCheck:
    bridge: str
    cell: Tuple
    rank: int
    condition: float
    passes: bool


@dataclass
class CompletenessReport:
    k_u: int
    k_z: int
    k_w: int
    order_condition: bool
    cells: List[CellCheck]

    @property
    def ok(self) -> bool:
        return self.order_condition and all(c.passes for c in self.cells)

    @property
    def failures(self) -> List[str]:
        out = []
        if not self.order_condition:
            out.append(f"order condition: min(|Z|, |W|) = {min(self.k_z, self.k_w)} < |U| = {self.k_u}")
        out += [f"{c.bridge} cell {c.cell}: rank {c.rank} < {self.k_u}" for c in self.cells if not c.passes]
        return out

    def to_dict(self) -> dict:
        return {"k_u": self.k_u, "k_z": self.k_z, "k_w": self.k_w, "order_condition": self.order_condition,
                "ok": self.ok, "failures": self.failures,
                "cells": [{"bridge": c.bridge, "cell": list(c.cell), "rank": c.rank,
                           "condition": c.condition, "passes": c.passes} for c in self.cells]}


def completeness_check(law: DiscreteLaw) -> CompletenessReport:
    """Rank and condition number of every observable Z-W transition matrix."""
    ku, kz, kw, _, _ = law.sizes
    cells = []
    for key, mat in {**outcome_matrices(law), **treatment_matrices(law)}.items():
        rank = int(np.linalg.matrix_rank(mat, tol=RANK_TOL))
        sv = np.linalg.svd(mat, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
        cells.append(CellCheck(key[0], tuple(key[1:]), rank, cond, rank >= ku))
    return CompletenessReport(ku, kz, kw, min(kz, kw) >= ku, cells)
