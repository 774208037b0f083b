"""One-way multivariate linear model: design construction and OLS residuals.

The model is Y = X B + E with Y an n x q observation matrix, X an n x p
one-way indicator design and B a p x q coefficient matrix.  Fitting an
ordinary least-squares ANOVA to each column of Y yields the residual matrix
used downstream for covariance estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FactorLabels:
    """Condition label per sample plus the ordered distinct levels.

    Levels are recorded in first-appearance order so that reports and design
    columns are reproducible independently of locale or hash ordering.
    """

    labels: tuple[str, ...]
    levels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("label sequence is empty")
        if not self.levels:
            seen: dict[str, None] = {}
            for lab in self.labels:
                seen.setdefault(lab, None)
            object.__setattr__(self, "levels", tuple(seen))
        missing = set(self.labels) - set(self.levels)
        if missing:
            raise ValueError(f"labels not listed in levels: {sorted(missing)}")
        counts = self.counts
        if np.any(counts < 1):
            empty = [lv for lv, c in zip(self.levels, counts) if c < 1]
            raise ValueError(f"levels with zero replicates: {empty}")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def p(self) -> int:
        return len(self.levels)

    @property
    def counts(self) -> np.ndarray:
        """Replicate count per level, in level order."""
        return np.array([sum(lab == lv for lab in self.labels) for lv in self.levels])


def build_design(labels: FactorLabels | Sequence[str]) -> np.ndarray:
    """Build the n x p 0/1 indicator design matrix for a one-way factor.

    Each row has exactly one entry equal to 1, in the column of the sample's
    level; column order follows ``labels.levels``.
    """
    if not isinstance(labels, FactorLabels):
        labels = FactorLabels(tuple(labels))
    index = {lv: j for j, lv in enumerate(labels.levels)}
    X = np.zeros((labels.n, labels.p))
    for i, lab in enumerate(labels.labels):
        X[i, index[lab]] = 1.0
    return X


def standardize(Y: np.ndarray, scale: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Center each column of Y; optionally scale to unit empirical variance.

    Parameters
    ----------
    Y : ndarray of shape (n, q)
        Raw observation matrix.
    scale : bool
        If True, divide each non-constant column by its empirical standard
        deviation (divide-by-n convention) so the column variance is 1.

    Returns
    -------
    values : ndarray of shape (n, q)
        Standardized matrix.
    constant : ndarray of bool, shape (q,)
        Flags for columns with zero variance; those are centered only and
        kept in place so response indices stay aligned.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError("Y must be a 2-d array")
    n = Y.shape[0]
    if scale and n < 2:
        raise ValueError("variance scaling needs at least 2 samples")
    centered = Y - Y.mean(axis=0)
    sd = centered.std(axis=0)
    constant = sd == 0.0
    if scale:
        safe = np.where(constant, 1.0, sd)
        centered = centered / safe
    return centered, constant


def fit_anova(Y: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fit a one-way ANOVA to each column of Y and return (B, E).

    For an indicator design the column-wise OLS solution is the within-level
    mean, computed directly by group means rather than a generic solver.
    E = Y - X B.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    if Y.shape[0] != X.shape[0]:
        raise ValueError("Y and X row counts differ")
    _check_indicator(X)
    n, p = X.shape
    counts = X.sum(axis=0)
    # B[c] = mean of Y over samples at level c; X'X is diag(counts).
    B = (X.T @ Y) / counts[:, None]
    E = Y - X @ B
    return B, E


def _check_indicator(X: np.ndarray) -> None:
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    is_binary = np.all((X == 0.0) | (X == 1.0))
    if not is_binary or not np.all(X.sum(axis=1) == 1.0):
        raise ValueError("X is not a one-way indicator design")
    if np.any(X.sum(axis=0) < 1.0):
        raise ValueError("design is rank deficient: level with zero replicates")
