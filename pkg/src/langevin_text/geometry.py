"""Geometry over the embedding table: projection, distance-softmax, separation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


def _table_rows(table) -> np.ndarray:
    return table.weight if hasattr(table, "weight") else np.asarray(table, dtype=np.float64)


def _finite_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ad.NonFiniteError("non-finite vector passed to projection")
    return v


def squared_distances(table, v) -> np.ndarray:
    """Squared distance from ``v`` (d,) or (n, d) to every table row."""
    E = _table_rows(table)
    v = _finite_vector(v)
    diff = v[..., None, :] - E
    return np.einsum("...vd,...vd->...v", diff, diff)


def project(table, v) -> tuple[int, np.ndarray]:
    """Nearest table row to ``v``; ties go to the lowest token id."""
    d2 = squared_distances(table, v)
    tok = int(np.argmin(d2))
    return tok, _table_rows(table)[tok].copy()


def project_many(table, vectors) -> np.ndarray:
    """Vectorised :func:`project` over the rows of an (L, d) array; returns ids."""
    d2 = squared_distances(table, vectors)
    return np.argmin(d2, axis=-1)


def token_log_distribution(table, v) -> np.ndarray:
    d2 = squared_distances(table, v)
    z = -d2 - (-d2).max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_distribution(table, v) -> np.ndarray:
    """softmax over negated squared distances from ``v`` to every table row."""
    return np.exp(token_log_distribution(table, v))


def token_log_distribution_t(table: ad.Tensor, vectors: ad.Tensor) -> ad.Tensor:
    """Differentiable log pi for each row of ``vectors``: (L, d) x (V, d) -> (L, V)."""
    return ad.log_softmax(ad.neg(ad.sqdist(vectors, table)))


@dataclass
class SoftSequence:
    """Optimizer state: L continuous vectors plus their nearest-row token ids."""

    vectors: np.ndarray
    projected_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"SoftSequence needs an (L>=1, d) array, got {self.vectors.shape}")
        if self.projected_ids is not None:
            self.projected_ids = np.asarray(self.projected_ids, dtype=np.int64)

    @classmethod
    def from_ids(cls, table, ids) -> "SoftSequence":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(_table_rows(table)[ids].copy(), ids.copy())

    def refresh(self, table) -> "SoftSequence":
        self.projected_ids = project_many(table, self.vectors)
        return self

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def copy(self) -> "SoftSequence":
        return SoftSequence(self.vectors.copy(), None if self.projected_ids is None
                            else self.projected_ids.copy())


@dataclass
class SeparationReport:
    vocab_size: int
    violations: list[dict]
    # min over w, j != w of log pi_w[w] - log pi_j[w]; the keyword threshold
    # slack must stay below this for the absent-keyword direction to hold
    column_margin: float
    row_margin: float
    min_sq_distance: float
    per_token_column_margin: np.ndarray = field(repr=False, default=None)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "ok": self.ok,
            "violation_count": len(self.violations),
            "violations": self.violations,
            "column_margin": self.column_margin,
            "row_margin": self.row_margin,
            "min_sq_distance": self.min_sq_distance,
        }


def pi_matrix(table) -> np.ndarray:
    """Row w is log pi_w, the distance-softmax of table row w."""
    E = _table_rows(table)
    return token_log_distribution(E, E)


def verify_separation(table) -> SeparationReport:
    """Check that log pi_w[w] is the strict maximum of its row and of its column.

    Row maximality (a) follows from zero self-distance whenever rows are
    distinct; column maximality (b) is the property the keyword threshold
    relies on. Each failing token is reported once per failed property.
    """
    E = _table_rows(table)
    V = E.shape[0]
    logpi = pi_matrix(E)
    diag = np.diag(logpi).copy()
    off = ~np.eye(V, dtype=bool)

    row_gap = np.where(off, diag[:, None] - logpi, np.inf)  # gap[w, j] = lp[w,w]-lp[w,j]
    col_gap = np.where(off, diag[None, :] - logpi, np.inf)  # gap[j, w] = lp[w,w]-lp[j,w]
    violations = []
    for w in range(V):
        bad_row = np.flatnonzero(row_gap[w] <= 0)
        if bad_row.size:
            violations.append({"token": w, "property": "row", "competitors": bad_row.tolist()})
        bad_col = np.flatnonzero(col_gap[:, w] <= 0)
        if bad_col.size:
            violations.append({"token": w, "property": "column", "competitors": bad_col.tolist()})

    d2 = squared_distances(E, E)
    per_col = col_gap.min(axis=0) if V > 1 else np.full(V, np.inf)
    return SeparationReport(
        vocab_size=V,
        violations=violations,
        column_margin=float(per_col.min()) if V > 1 else float("inf"),
        row_margin=float(row_gap.min()) if V > 1 else float("inf"),
        min_sq_distance=float(d2[off].min()) if V > 1 else float("inf"),
        per_token_column_margin=per_col,
    )
