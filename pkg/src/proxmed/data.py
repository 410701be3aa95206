"""Mediation datasets with proxy-role schemas: loading, validation, featurization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

ROLES = ("outcome", "treatment", "mediator", "covariate", "treatment_proxy", "outcome_proxy")
TRANSFORMS = ("identity", "sqrt_abs")


class DataError(ValueError):
    """Raised when a dataset or schema violates its contract."""


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ColumnSchema:
    """Column name -> role mapping, in file order."""

    roles: Dict[str, str]

    def __post_init__(self):
        bad = {k: v for k, v in self.roles.items() if v not in ROLES}
        if bad:
            raise DataError(f"unknown role(s): {bad}")
        for role in ("outcome", "treatment", "mediator"):
            k = len(self.columns(role))
            if k != 1:
                extra = " (multivariate mediators are not supported)" if role == "mediator" and k > 1 else ""
                raise DataError(f"schema needs exactly one {role} column, got {k}{extra}")
        for role in ("treatment_proxy", "outcome_proxy"):
            if not self.columns(role):
                raise DataError(f"schema needs at least one {role} column")

    def columns(self, role: str) -> List[str]:
        return [k for k, v in self.roles.items() if v == role]

    @classmethod
    def from_columns(cls, names: Sequence[str]) -> "ColumnSchema":
        """Infer roles from the naming convention y, a, m, x*, z*, w*."""
        roles = {}
        for name in names:
            key = name.strip().lower()
            if key == "y":
                roles[name] = "outcome"
            elif key == "a":
                roles[name] = "treatment"
            elif key == "m" or (key.startswith("m") and key[1:].isdigit()):
                roles[name] = "mediator"
            elif key[:1] == "x" and key[1:].isdigit():
                roles[name] = "covariate"
            elif key[:1] == "z" and key[1:].isdigit():
                roles[name] = "treatment_proxy"
            elif key[:1] == "w" and key[1:].isdigit():
                roles[name] = "outcome_proxy"
            else:
                raise DataError(f"cannot infer a role for column {name!r}; supply a schema")
        return cls(roles)

    @classmethod
    def from_json(cls, path) -> "ColumnSchema":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(dict(raw.get("roles", raw)))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"roles": self.roles}, fh, indent=2)


@dataclass(frozen=True)
class MediationDataset:
    """Observed sample of (Y, A, M, X, Z, W). Arrays are read-only."""

    y: np.ndarray
    a: np.ndarray
    m: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x_names: Tuple[str, ...] = ()
    z_names: Tuple[str, ...] = ()
    w_names: Tuple[str, ...] = ()
    y_name: str = "y"
    a_name: str = "a"
    m_name: str = "m"

    def __post_init__(self):
        y, a, m = (_frozen(np.ravel(v)) for v in (self.y, self.a, self.m))
        blocks = []
        for name, v in zip("xzw", (self.x, self.z, self.w)):
            v = np.asarray(v, dtype=float)
            rows = v.shape[0] if v.ndim else 1
            if rows != len(y):
                raise DataError(f"column block {name} has {rows} rows, expected {len(y)}")
            blocks.append(_frozen(v.reshape(len(y), -1)))
        x, z, w = blocks
        for name, v in zip("yamxzw", (y, a, m, x, z, w)):
            if v.shape[0] != y.shape[0]:
                raise DataError(f"column block {name} has {v.shape[0]} rows, expected {y.shape[0]}")
            object.__setattr__(self, name, v)
        for attr, prefix, v in (("x_names", "x", x), ("z_names", "z", z), ("w_names", "w", w)):
            names = tuple(getattr(self, attr)) or tuple(f"{prefix}{j + 1}" for j in range(v.shape[1]))
            if len(names) != v.shape[1]:
                raise DataError(f"{attr} has {len(names)} names for {v.shape[1]} columns")
            object.__setattr__(self, attr, names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_x(self) -> int:
        return self.x.shape[1]

    @property
    def p_z(self) -> int:
        return self.z.shape[1]

    @property
    def p_w(self) -> int:
        return self.w.shape[1]

    @property
    def param_dim(self) -> int:
        """Total dimension of (beta1, beta0, gamma0, gamma1)."""
        return (2 + self.p_w + self.p_x) + (1 + self.p_w + self.p_x) + (1 + self.p_z + self.p_x) + (2 + self.p_z + self.p_x)

    @property
    def columns(self) -> List[str]:
        return [self.y_name, self.a_name, self.m_name, *self.x_names, *self.z_names, *self.w_names]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix(), columns=self.columns)

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.y, self.a, self.m, self.x, self.z, self.w])

    def take(self, idx) -> "MediationDataset":
        """Row subset (used by resampling)."""
        idx = np.asarray(idx)
        return replace(self, y=self.y[idx], a=self.a[idx], m=self.m[idx], x=self.x[idx], z=self.z[idx], w=self.w[idx])

    def with_outcome(self, y) -> "MediationDataset":
        return replace(self, y=np.asarray(y, dtype=float))

    def flip_treatment(self) -> "MediationDataset":
        """Relabel A -> 1 - A; turns E[Y{1,M(0)}] machinery into E[Y{0,M(1)}]."""
        return replace(self, a=1.0 - self.a)

    def schema(self) -> ColumnSchema:
        roles = {self.y_name: "outcome", self.a_name: "treatment", self.m_name: "mediator"}
        roles.update({k: "covariate" for k in self.x_names})
        roles.update({k: "treatment_proxy" for k in self.z_names})
        roles.update({k: "outcome_proxy" for k in self.w_names})
        return ColumnSchema(roles)


@dataclass
class ValidationReport:
    checks: Dict[str, bool] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)
    n_treated: int = 0
    n_control: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def raise_if_failed(self) -> None:
        if self.failures:
            raise DataError("; ".join(self.failures))


def validate(data: MediationDataset) -> ValidationReport:
    report = ValidationReport()
    finite = all(np.isfinite(v).all() for v in (data.y, data.a, data.m, data.x, data.z, data.w))
    report.checks["finite"] = finite
    if not finite:
        report.failures.append("non-finite entry")

    a = data.a[np.isfinite(data.a)]
    binary = bool(np.isin(a, (0.0, 1.0)).all())
    report.checks["binary_treatment"] = binary
    if not binary:
        report.failures.append("treatment not binary")

    report.n_treated = int(np.sum(a == 1.0))
    report.n_control = int(np.sum(a == 0.0))
    need = max(10, data.param_dim)
    report.checks["treated_arm"] = report.n_treated >= need
    report.checks["control_arm"] = report.n_control >= need
    for arm, count in (("treated", report.n_treated), ("control", report.n_control)):
        if count == 0:
            report.failures.append(f"{arm} arm absent")
        elif count < need:
            report.failures.append(f"{arm} arm has {count} rows, need at least {need}")
    return report


@dataclass(frozen=True)
class FeatureMap:
    """Per-covariate transform tags; 'sqrt_abs' maps x to |x|**0.5."""

    transforms: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        bad = [t for t in self.transforms if t not in TRANSFORMS]
        if bad:
            raise DataError(f"unknown transform(s) {bad}; expected one of {TRANSFORMS}")

    @classmethod
    def identity(cls, p: int) -> "FeatureMap":
        return cls(("identity",) * p)

    @classmethod
    def sqrt_abs(cls, p: int) -> "FeatureMap":
        return cls(("sqrt_abs",) * p)

    @property
    def is_identity(self) -> bool:
        return all(t == "identity" for t in self.transforms)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(self.transforms):
            raise DataError(f"feature map covers {len(self.transforms)} covariates, data has {x.shape[-1]}")
        if self.is_identity:
            return x
        out = np.array(x, copy=True)
        for j, t in enumerate(self.transforms):
            if t == "sqrt_abs":
                out[..., j] = np.sqrt(np.abs(x[..., j]))
        return out


def build_features(data: MediationDataset, fmap: FeatureMap) -> MediationDataset:
    return replace(data, x=fmap.apply(data.x))


def load_csv(path, schema: Optional[ColumnSchema] = None) -> MediationDataset:
    """Read a CSV into a dataset, normalizing column order to (Y, A, M, X, Z, W)."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    if frame.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    frame.columns = [c.strip() for c in frame.columns]
    if schema is None:
        schema = ColumnSchema.from_columns(list(frame.columns))
    missing = [c for c in schema.roles if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s): {missing}")

    values = {}
    for col in schema.roles:
        raw = frame[col].str.strip()
        num = pd.to_numeric(raw, errors="coerce")
        bad = num.isna() & ~raw.str.lower().isin(("nan",))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"non-numeric cell in column {col!r} at data row {row + 1}: {frame[col].iloc[row]!r}")
        # pandas' fast parser can be off by one ulp; numpy parses correctly rounded
        values[col] = raw.to_numpy().astype(np.float64)

    a_col = schema.columns("treatment")[0]
    a = values[a_col]
    if not np.isin(a[np.isfinite(a)], (0.0, 1.0)).all():
        raise DataError("treatment not binary: values outside {0, 1}")

    def block(role):
        cols = schema.columns(role)
        return np.column_stack([values[c] for c in cols]) if cols else np.empty((len(a), 0)), tuple(cols)

    x, x_names = block("covariate")
    z, z_names = block("treatment_proxy")
    w, w_names = block("outcome_proxy")
    y_col, m_col = schema.columns("outcome")[0], schema.columns("mediator")[0]
    return MediationDataset(
        y=values[y_col], a=a, m=values[m_col], x=x, z=z, w=w,
        x_names=x_names, z_names=z_names, w_names=w_names,
        y_name=y_col, a_name=a_col, m_name=m_col,
    )


def write_csv(data: MediationDataset, path) -> None:
    # repr() of a float64 round-trips exactly
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(data.columns)
        for row in data.matrix():
            writer.writerow([repr(float(v)) for v in row])
