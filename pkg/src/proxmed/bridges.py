"""Parametric confounding-bridge families and their parameter gradients.

Outcome bridges are linear:

    h1(w, m, x) = b0 + bw.w + bm*m + bx.x
    h0(w, x)    = b0 + bw.w + bx.x

Treatment bridges are inverse-propensity shaped:

    q0(z, x)    = 1 + exp(-(g0 + gz.z + gx.x))
    q1(z, m, x) = q0(z, x) * exp(g0' + gz'.z + gm'*m + gx'.x)

All evaluators accept a single point or a batch (leading row axis).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .data import FeatureMap, MediationDataset

EXP_CLAMP = 700.0
BRIDGES = ("h1", "h0", "q0", "q1")


def clamped_exp(arg):
    """exp() with the argument clipped to [-700, 700]; returns (values, clamp count)."""
    arg = np.asarray(arg, dtype=float)
    clipped = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
    return np.exp(clipped), int(np.count_nonzero(clipped != arg))


def _is_batch(*features, m=None):
    return any(np.ndim(v) == 2 for v in features) or (m is not None and np.ndim(m) == 1)


def _design(batch, *blocks):
    """[1, blocks...] as an (n, d) matrix. In batch mode 1-D blocks are columns."""
    if batch:
        mats = [np.asarray(b, dtype=float) for b in blocks]
        mats = [b[:, None] if b.ndim == 1 else b for b in mats]
        n = max(b.shape[0] for b in mats)
        mats = [np.broadcast_to(b, (n, b.shape[1])) if b.ndim == 2 else np.full((n, 1), float(b)) for b in mats]
    else:
        mats = [np.atleast_1d(np.asarray(b, dtype=float)).reshape(1, -1) for b in blocks]
        n = 1
    return np.column_stack([np.ones(n), *mats])


def _squeeze(out, batch):
    return out if batch else float(out[0])


def _check(params, design, tag):
    params = np.asarray(params, dtype=float)
    if params.shape != (design.shape[1],):
        raise ValueError(f"{tag}: expected {design.shape[1]} parameters, got shape {params.shape}")
    return params


def h1_design(w, m, x):
    return _design(_is_batch(w, x, m=m), w, m, x)


def h0_design(w, x):
    return _design(_is_batch(w, x), w, x)


def q0_design(z, x):
    return _design(_is_batch(z, x), z, x)


def q1_design(z, m, x):
    return _design(_is_batch(z, x, m=m), z, m, x)


def eval_h1(beta1, w, m, x):
    f = h1_design(w, m, x)
    return _squeeze(f @ _check(beta1, f, "h1"), _is_batch(w, x, m=m))


def eval_h0(beta0, w, x):
    f = h0_design(w, x)
    return _squeeze(f @ _check(beta0, f, "h0"), _is_batch(w, x))


def _q0_parts(gamma0, f):
    e, clamps = clamped_exp(-(f @ _check(gamma0, f, "q0")))
    return 1.0 + e, e, clamps


def eval_q0(gamma0, z, x):
    f = q0_design(z, x)
    return _squeeze(_q0_parts(gamma0, f)[0], _is_batch(z, x))


def _q1_parts(gamma1, gamma0, f1, f0):
    q0, e0, c0 = _q0_parts(gamma0, f0)
    e1, c1 = clamped_exp(f1 @ _check(gamma1, f1, "q1"))
    with np.errstate(over="ignore"):
        q1 = q0 * e1
    cap = np.exp(EXP_CLAMP)
    over = q1 > cap
    if np.any(over):
        q1 = np.minimum(q1, cap)
    return q1, q0, e0, e1, c0 + c1 + int(np.count_nonzero(over))


def eval_q1(gamma1, gamma0, z, m, x):
    f1, f0 = q1_design(z, m, x), q0_design(z, x)
    return _squeeze(_q1_parts(gamma1, gamma0, f1, f0)[0], _is_batch(z, x, m=m))


def grad_params(tag: str, params, point: Dict[str, np.ndarray], gamma0=None):
    """Analytic gradient of a bridge with respect to its own parameters.

    ``point`` holds the needed inputs among ``w``, ``m``, ``x``, ``z``; returns a
    vector for a single point or an (n, d) matrix for a batch. For q1 the
    gradient is with respect to gamma1 only (``gamma0`` enters as a fixed input).
    """
    if tag == "h1":
        f = h1_design(point["w"], point["m"], point["x"])
        _check(params, f, tag)
        g, batch = f, _is_batch(point["w"], point["x"], m=point["m"])
    elif tag == "h0":
        f = h0_design(point["w"], point["x"])
        _check(params, f, tag)
        g, batch = f, _is_batch(point["w"], point["x"])
    elif tag == "q0":
        f = q0_design(point["z"], point["x"])
        _, e, _ = _q0_parts(params, f)
        g, batch = -e[:, None] * f, _is_batch(point["z"], point["x"])
    elif tag == "q1":
        if gamma0 is None:
            raise ValueError("q1 gradient needs gamma0")
        f1, f0 = q1_design(point["z"], point["m"], point["x"]), q0_design(point["z"], point["x"])
        q1 = _q1_parts(params, gamma0, f1, f0)[0]
        g, batch = q1[:, None] * f1, _is_batch(point["z"], point["x"], m=point["m"])
    else:
        raise ValueError(f"unknown bridge tag {tag!r}; expected one of {BRIDGES}")
    return g if batch else g[0]


@dataclass(frozen=True)
class BridgeSpec:
    """Covariate feature map per bridge; everything else about the families is fixed."""

    h1: FeatureMap
    h0: FeatureMap
    q0: FeatureMap
    q1: FeatureMap
    q1_form: str = "simplified"

    def __post_init__(self):
        if self.q1_form != "simplified":
            raise ValueError(f"unsupported q1 form {self.q1_form!r}")

    @classmethod
    def default(cls, p_x: int) -> "BridgeSpec":
        ident = FeatureMap.identity(p_x)
        return cls(ident, ident, ident, ident)

    @classmethod
    def misspecified(cls, p_x: int, bridges) -> "BridgeSpec":
        """Swap in sqrt_abs covariate features for the named bridges."""
        bridges = set(bridges)
        unknown = bridges - set(BRIDGES)
        if unknown:
            raise ValueError(f"unknown bridge(s) {sorted(unknown)}")
        maps = {b: FeatureMap.sqrt_abs(p_x) if b in bridges else FeatureMap.identity(p_x) for b in BRIDGES}
        return cls(**maps)

    def check(self, data: MediationDataset) -> None:
        for b in BRIDGES:
            fm = getattr(self, b)
            if len(fm.transforms) != data.p_x:
                raise ValueError(f"{b} feature map covers {len(fm.transforms)} covariates, data has {data.p_x}")

    def to_dict(self) -> dict:
        return {b: list(getattr(self, b).transforms) for b in BRIDGES} | {"q1_form": self.q1_form}

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeSpec":
        return cls(*(FeatureMap(tuple(d[b])) for b in BRIDGES), q1_form=d.get("q1_form", "simplified"))


def coef_names(tag: str, data: MediationDataset):
    x = list(data.x_names)
    if tag == "h1":
        return ["(intercept)", *data.w_names, data.m_name, *x]
    if tag == "h0":
        return ["(intercept)", *data.w_names, *x]
    if tag == "q0":
        return ["(intercept)", *data.z_names, *x]
    if tag == "q1":
        return ["(intercept)", *data.z_names, data.m_name, *x]
    raise ValueError(f"unknown bridge tag {tag!r}")


@dataclass
class BridgeParams:
    """Fitted coefficient vectors; a bridge that was not fitted is None."""

    beta1: Optional[np.ndarray] = None
    beta0: Optional[np.ndarray] = None
    gamma0: Optional[np.ndarray] = None
    gamma1: Optional[np.ndarray] = None
    names: Dict[str, list] = field(default_factory=dict)

    _tags = {"beta1": "h1", "beta0": "h0", "gamma0": "q0", "gamma1": "q1"}

    def __post_init__(self):
        for attr in self._tags:
            v = getattr(self, attr)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if not np.isfinite(v).all():
                    raise ValueError(f"{attr} has non-finite entries")
                setattr(self, attr, v)

    def check_dims(self, data: MediationDataset) -> None:
        expected = {
            "beta1": 2 + data.p_w + data.p_x,
            "beta0": 1 + data.p_w + data.p_x,
            "gamma0": 1 + data.p_z + data.p_x,
            "gamma1": 2 + data.p_z + data.p_x,
        }
        for attr, d in expected.items():
            v = getattr(self, attr)
            if v is not None and v.shape != (d,):
                raise ValueError(f"{attr} has shape {v.shape}, dataset implies ({d},)")

    def to_dict(self) -> dict:
        out = {}
        for attr, tag in self._tags.items():
            v = getattr(self, attr)
            if v is None:
                continue
            names = self.names.get(attr) or [f"c{j}" for j in range(len(v))]
            out[attr] = {"bridge": tag, "coefficients": dict(zip(names, map(float, v)))}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeParams":
        kwargs, names = {}, {}
        for attr in cls._tags:
            if attr in d:
                coefs = d[attr]["coefficients"]
                kwargs[attr] = np.array(list(coefs.values()), dtype=float)
                names[attr] = list(coefs)
        return cls(**kwargs, names=names)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "BridgeParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
