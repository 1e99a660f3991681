"""Column rescaling, standardization and log-ratio transforms.

Every transform returns the new matrix together with a :class:`TransformSpec`
that records what was done to each column, so the change can be inverted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Mode = Literal["none", "minmax_symmetric", "zscore", "logratio"]


@dataclass
class TransformSpec:
    """Per-column record of an applied transform.

    For the affine modes a transformed column is ``(z - shift) / scale``.
    For ``logratio`` the shift/scale are unused and ``reference`` holds the
    index of the denominator column in the input.
    """

    mode: Mode = "none"
    shift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.ones(0))
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    reference: int | None = None
    zero_replacement: float = 0.5

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.constant = np.asarray(self.constant, dtype=bool)
        if np.any(self.scale == 0):
            raise ValueError("recorded scales must be nonzero")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "constant": self.constant.tolist(),
            "reference": self.reference,
            "zero_replacement": self.zero_replacement,
        }


def _as_matrix(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2:
        raise ValueError("expected a two-dimensional matrix")
    return Z


def rescale_minmax(Z) -> tuple[np.ndarray, TransformSpec]:
    """Map every column affinely onto [-1, 1].

    Constant columns are passed through unchanged and flagged in the spec.
    """
    Z = _as_matrix(Z)
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    constant = hi == lo
    shift = np.where(constant, 0.0, 0.5 * (hi + lo))
    scale = np.where(constant, 1.0, 0.5 * (hi - lo))
    out = (Z - shift) / scale
    # pin the endpoints exactly; the affine map can be off by one ulp
    out = np.where((Z == lo) & ~constant, -1.0, out)
    out = np.where((Z == hi) & ~constant, 1.0, out)
    return out, TransformSpec("minmax_symmetric", shift, scale, constant)


def zscore(Z, ddof: int = 0) -> tuple[np.ndarray, TransformSpec]:
    """Center each column and divide by its standard deviation."""
    Z = _as_matrix(Z)
    mean = Z.mean(axis=0)
    sd = Z.std(axis=0, ddof=ddof)
    constant = sd == 0
    scale = np.where(constant, 1.0, sd)
    return (Z - mean) / scale, TransformSpec("zscore", mean, scale, constant)


def replace_zeros(counts, zero_replacement: float = 0.5) -> np.ndarray:
    C = _as_matrix(counts).copy()
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise ValueError("counts must be finite and nonnegative")
    C[C == 0] = zero_replacement
    return C


def logratio_transform(counts, reference: int = -1, zero_replacement: float = 0.5
                       ) -> tuple[np.ndarray, TransformSpec]:
    """Additive log-ratio transform against a reference column.

    Zeros are replaced by ``zero_replacement``, rows are closed to
    proportions, and column ``j`` becomes ``log(z_j / z_ref)``. The reference
    column is dropped, so K columns become K - 1.
    """
    C = replace_zeros(counts, zero_replacement)
    K = C.shape[1]
    if K < 2:
        raise ValueError("need at least two components")
    ref = reference % K if -K <= reference < K else None
    if ref is None:
        raise ValueError(f"reference column {reference} out of range for {K} columns")
    bad = np.flatnonzero(C[:, ref] <= 0)
    if bad.size:
        raise ValueError(f"reference column {ref} is zero in row {int(bad[0])} after zero replacement")
    P = C / C.sum(axis=1, keepdims=True)
    keep = [j for j in range(K) if j != ref]
    out = np.log(P[:, keep] / P[:, [ref]])
    spec = TransformSpec("logratio", np.zeros(K - 1), np.ones(K - 1), np.zeros(K - 1, dtype=bool),
                         reference=ref, zero_replacement=zero_replacement)
    return out, spec


def inverse_transform(Zt, spec: TransformSpec) -> np.ndarray:
    """Undo a transform.

    Log-ratios invert to row proportions (after zero replacement) with the
    reference column restored in its original position.
    """
    Zt = _as_matrix(Zt)
    if spec.mode == "none":
        return Zt.copy()
    if spec.mode in ("minmax_symmetric", "zscore"):
        return Zt * spec.scale + spec.shift
    if spec.mode == "logratio":
        n, km1 = Zt.shape
        E = np.exp(Zt)
        ref_share = 1.0 / (1.0 + E.sum(axis=1))
        out = np.empty((n, km1 + 1))
        keep = [j for j in range(km1 + 1) if j != spec.reference]
        out[:, keep] = E * ref_share[:, None]
        out[:, spec.reference] = ref_share
        return out
    raise ValueError(f"unknown transform mode {spec.mode!r}")


def prevalence_mask(counts, min_prevalence: float) -> np.ndarray:
    """Columns that are nonzero in at least ``min_prevalence`` of the rows."""
    C = _as_matrix(counts)
    if not 0.0 <= min_prevalence <= 1.0:
        raise ValueError("min_prevalence must lie in [0, 1]")
    return (C != 0).mean(axis=0) >= min_prevalence
