"""Residual row-covariance estimation, whitening operators and adequacy test.

Each row of the residual matrix is treated as a length-q stationary series.
The whitening operator is a q x q matrix S approximating the inverse square
root of the row covariance, applied on the right (E @ S), so that whitened
rows have (approximately) identity covariance.  Adequacy is judged with a
pooled Portmanteau white-noise test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz
from scipy.linalg.lapack import dpotrf, dtrtri


class CholeskyError(Exception):
    """Cholesky factorization failed; ``pivot`` is the 1-based failing minor."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"Cholesky factorization failed at pivot {pivot}")


@dataclass(frozen=True)
class Ar1Fit:
    """Order-1 autoregressive fit pooled over residual rows."""

    phi1: float
    phi1_rows: np.ndarray
    sigma2: float


@dataclass(frozen=True)
class WhiteningOperator:
    """q x q right-multiplication operator approximating Sigma^{-1/2}.

    ``kind`` is one of ``identity``, ``ar1`` (upper bidiagonal closed form)
    or ``nonparametric`` (transposed inverse Cholesky factor of the Toeplitz
    autocovariance estimate).  ``ridge`` records any diagonal regularization
    added to make the Cholesky factorization succeed.
    """

    kind: str
    matrix: np.ndarray
    phi1: float | None = None
    ridge: float = 0.0

    @property
    def q(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class WhitenessTestResult:
    """Pooled Portmanteau statistic with its chi-squared p-value."""

    statistic: float
    dof: int
    pvalue: float
    per_row_pvalues: np.ndarray = field(repr=False)
    H: int = 0


def _row_autocovariances(E: np.ndarray, max_lag: int) -> np.ndarray:
    """Per-row autocovariances at lags 0..max_lag, divide-by-q convention.

    Rows are used as-is (no per-row demeaning): ANOVA residuals are already
    level-centered column-wise.
    """
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[None, :]
    n, q = E.shape
    if not 0 <= max_lag < q:
        raise ValueError(f"max_lag must be in [0, {q - 1}], got {max_lag}")
    if max_lag <= 8:
        acv = np.empty((n, max_lag + 1))
        for h in range(max_lag + 1):
            acv[:, h] = np.einsum("ij,ij->i", E[:, : q - h], E[:, h:]) / q
        return acv
    # Full-lag case: circular correlation on a zero-padded FFT.
    nfft = 1 << int(np.ceil(np.log2(2 * q)))
    F = np.fft.rfft(E, n=nfft, axis=1)
    acv = np.fft.irfft(F * np.conj(F), n=nfft, axis=1)[:, : max_lag + 1] / q
    return acv


def pooled_autocovariance(E: np.ndarray, max_lag: int) -> np.ndarray:
    """Mean over rows of the per-row autocovariances at lags 0..max_lag."""
    return _row_autocovariances(E, max_lag).mean(axis=0)


def fit_ar1(E: np.ndarray) -> Ar1Fit:
    """Estimate the AR(1) coefficient by row-wise order-1 Yule-Walker.

    phi1_i = gamma_i(1) / gamma_i(0) per row; the pooled estimate is their
    mean, clamped into (-1 + 1e-6, 1 - 1e-6).
    """
    acv = _row_autocovariances(E, 1)
    if np.any(acv[:, 0] == 0.0):
        bad = int(np.flatnonzero(acv[:, 0] == 0.0)[0])
        raise ValueError(f"zero-variance row {bad}: AR(1) fit undefined")
    phi_rows = acv[:, 1] / acv[:, 0]
    eps = 1e-6
    phi1 = float(np.clip(phi_rows.mean(), -1.0 + eps, 1.0 - eps))
    sigma2 = float((1.0 - phi1**2) * acv[:, 0].mean())
    return Ar1Fit(phi1=phi1, phi1_rows=phi_rows, sigma2=sigma2)


def identity_operator(q: int) -> WhiteningOperator:
    return WhiteningOperator(kind="identity", matrix=np.eye(q))


def ar1_inverse_sqrt(phi1: float, q: int) -> WhiteningOperator:
    """Closed-form inverse square root of the unit AR(1) covariance.

    Upper bidiagonal: entry (0,0) = sqrt(1 - phi1^2), remaining diagonal 1,
    superdiagonal -phi1.
    """
    if not abs(phi1) < 1.0:
        raise ValueError(f"|phi1| must be < 1, got {phi1}")
    if q < 1:
        raise ValueError("q must be >= 1")
    S = np.eye(q)
    S[0, 0] = math.sqrt(1.0 - phi1**2)
    idx = np.arange(q - 1)
    S[idx, idx + 1] = -phi1
    return WhiteningOperator(kind="ar1", matrix=S, phi1=float(phi1))


def nonparam_inverse_sqrt(gamma: np.ndarray) -> WhiteningOperator:
    """Whitening operator from the Toeplitz autocovariance estimate.

    Factorizes Sigma = L L' (lower Cholesky) and returns S = (L^{-1})', an
    upper-triangular matrix with S' Sigma S = I.  If the factorization fails,
    a single retry with ridge 1e-8 * gamma[0] on the diagonal is attempted
    and recorded in the result; a second failure raises CholeskyError with
    the failing pivot.
    """
    gamma = np.asarray(gamma, dtype=float)
    Sigma = toeplitz(gamma)
    ridge = 0.0
    L, info = dpotrf(Sigma, lower=1, clean=1)
    if info > 0:
        ridge = 1e-8 * gamma[0]
        L, info = dpotrf(Sigma + ridge * np.eye(len(gamma)), lower=1, clean=1)
        if info > 0:
            raise CholeskyError(int(info))
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    Linv, info = dtrtri(L, lower=1)
    if info != 0:
        raise CholeskyError(int(info), "triangular inversion failed")
    return WhiteningOperator(kind="nonparametric", matrix=Linv.T, ridge=ridge)


def apply_whitening(M: np.ndarray, op: WhiteningOperator) -> np.ndarray:
    """Right-multiply M by the whitening operator, exploiting its structure."""
    M = np.asarray(M, dtype=float)
    if M.shape[-1] != op.q:
        raise ValueError(f"dimension mismatch: M has {M.shape[-1]} columns, operator is {op.q} x {op.q}")
    if op.kind == "identity":
        return M.copy()
    if op.kind == "ar1":
        phi = op.phi1
        out = np.empty_like(M, dtype=float)
        out[..., 0] = math.sqrt(1.0 - phi**2) * M[..., 0]
        out[..., 1:] = M[..., 1:] - phi * M[..., :-1]
        return out
    return M @ op.matrix


def chi_squared_survival(x: float, dof: int) -> float:
    """Upper-tail probability of the chi-squared distribution.

    Evaluated through the regularized incomplete gamma function Q(a, z) with
    a = dof/2 and z = x/2: a power series for z < a + 1, a modified Lentz
    continued fraction otherwise.
    """
    if x < 0:
        raise ValueError("x must be >= 0")
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if x == 0.0:
        return 1.0
    a = 0.5 * dof
    z = 0.5 * x
    if z < a + 1.0:
        return 1.0 - _gamma_p_series(a, z)
    return _gamma_q_contfrac(a, z)


def _gamma_p_series(a: float, z: float) -> float:
    # P(a, z) = z^a e^{-z} / Gamma(a) * sum_k z^k / (a (a+1) ... (a+k))
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= z / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    log_pref = a * math.log(z) - z - math.lgamma(a)
    return total * math.exp(log_pref)


def _gamma_q_contfrac(a: float, z: float) -> float:
    # Q(a, z) = z^a e^{-z} / Gamma(a) * 1/(z+1-a- 1(1-a)/(z+3-a- ...))
    tiny = 1e-300
    b = z + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    log_pref = a * math.log(z) - z - math.lgamma(a)
    return min(1.0, h * math.exp(log_pref))


def portmanteau_test(E: np.ndarray, H: int) -> WhitenessTestResult:
    """Pooled Portmanteau white-noise test across rows.

    Statistic q * sum_i sum_{h<=H} rho_i(h)^2, compared to chi-squared with
    n*H degrees of freedom; per-row statistics use H degrees of freedom.
    """
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[None, :]
    n, q = E.shape
    if not 1 <= H < q:
        raise ValueError(f"H must be in [1, {q - 1}], got {H}")
    acv = _row_autocovariances(E, H)
    if np.any(acv[:, 0] == 0.0):
        bad = int(np.flatnonzero(acv[:, 0] == 0.0)[0])
        raise ValueError(f"zero-variance row {bad}: autocorrelation undefined")
    rho = acv[:, 1:] / acv[:, :1]
    row_stats = q * (rho**2).sum(axis=1)
    statistic = float(row_stats.sum())
    per_row = np.array([chi_squared_survival(s, H) for s in row_stats])
    pvalue = chi_squared_survival(statistic, n * H)
    return WhitenessTestResult(
        statistic=statistic, dof=n * H, pvalue=pvalue, per_row_pvalues=per_row, H=H
    )


def select_whitening(
    E: np.ndarray, H: int = 10
) -> tuple[WhiteningOperator, dict[str, WhitenessTestResult]]:
    """Run the candidate whitening strategies and keep the best one.

    Candidates are identity, AR(1) and nonparametric.  Each is applied to E
    and scored by the pooled Portmanteau p-value of the whitened residuals;
    the operator with the largest p-value wins, ties resolved in favor of the
    simpler model (identity > ar1 > nonparametric).
    """
    E = np.asarray(E, dtype=float)
    q = E.shape[1]
    candidates: list[tuple[str, WhiteningOperator]] = [("identity", identity_operator(q))]
    fit = fit_ar1(E)
    candidates.append(("ar1", ar1_inverse_sqrt(fit.phi1, q)))
    gamma = pooled_autocovariance(E, q - 1)
    candidates.append(("nonparametric", nonparam_inverse_sqrt(gamma)))

    results: dict[str, WhitenessTestResult] = {}
    best: WhiteningOperator | None = None
    best_pvalue = -1.0
    for name, op in candidates:
        res = portmanteau_test(apply_whitening(E, op), H)
        results[name] = res
        if res.pvalue > best_pvalue:
            best, best_pvalue = op, res.pvalue
    assert best is not None
    return best, results
