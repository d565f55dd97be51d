from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import linalg as sla

from sdeid.errors import EmptyModelError, InvalidArgumentError, RankDeficiencyError


def numerical_rank(r_diag: np.ndarray, shape: tuple[int, int], rtol: float | None = None) -> int:
    if r_diag.size == 0:
        return 0
    scale = abs(float(r_diag[0]))
    if scale == 0.0:
        return 0
    tol = rtol if rtol is not None else max(shape) * np.finfo(np.float64).eps
    return int(np.sum(np.abs(r_diag) > tol * scale))


def restricted_lstsq(
    design: np.ndarray,
    target: np.ndarray,
    support: Sequence[int] | None = None,
    *,
    names: Sequence[str] | None = None,
    rtol: float | None = None,
) -> np.ndarray:
    """Least squares on the support columns only; other coefficients are exactly 0.

    Uses a column-pivoted QR so that a rank-deficient restricted design is
    detected and the dependent columns can be named.
    """
    design = np.asarray(design, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if design.ndim != 2:
        raise InvalidArgumentError("'design' must be a 2-D array")
    n_rows, n_cols = design.shape
    if target.size != n_rows:
        raise InvalidArgumentError(f"'target' has {target.size} rows, design has {n_rows}")
    if names is not None and len(names) != n_cols:
        raise InvalidArgumentError("'names' must name every design column")

    cols = np.arange(n_cols) if support is None else np.asarray(sorted(set(int(i) for i in support)), dtype=np.int64)
    if cols.size == 0:
        raise EmptyModelError("Cannot fit an empty support")
    if np.any(cols < 0) or np.any(cols >= n_cols):
        raise InvalidArgumentError("Support index out of range")

    sub = design[:, cols]
    if n_rows < cols.size:
        raise RankDeficiencyError(
            f"{n_rows} rows cannot determine {cols.size} coefficients",
            columns=_column_names(cols, names),
        )

    q, r, perm = sla.qr(sub, mode="economic", pivoting=True)
    diag = np.diag(r)
    rank = numerical_rank(diag, sub.shape, rtol)
    if rank < cols.size:
        dependent = cols[perm[rank:]]
        labels = _column_names(dependent, names)
        raise RankDeficiencyError(
            f"Restricted design has rank {rank} < {cols.size}; dependent columns: {', '.join(labels)}",
            columns=labels,
        )

    z = sla.solve_triangular(r, q.T @ target, lower=False)
    coef_sub = np.empty(cols.size, dtype=np.float64)
    coef_sub[perm] = z

    coefficients = np.zeros(n_cols, dtype=np.float64)
    coefficients[cols] = coef_sub
    return coefficients


def _column_names(cols: np.ndarray, names: Sequence[str] | None) -> list[str]:
    if names is None:
        return [str(int(c)) for c in cols]
    return [str(names[int(c)]) for c in cols]
