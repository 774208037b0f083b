"""Whitened vectorized Lasso: solver, cross-validation, stability selection.

The matrix model Y = X B + E, right-whitened by S, vectorizes to
y = (S' kron X) b + e where y = vec(Y S) and b = vec(B).  The Kronecker
design is never materialized: coordinate descent works on the n x q residual
matrix directly, and a column of the design indexed by (level b, response a)
is the outer product of X[:, b] and S'[:, a].

The criterion is the plain ||y - D b||_2^2 + lam * ||b||_1 (no 1/(2n)
rescaling), so the coordinate update is soft(z, lam/2) / ||D_j||^2 and
lambda_max = 2 * ||D' y||_inf.

Because the indicator columns of X are disjoint, design columns belonging to
different factor levels are orthogonal even under element subsampling, and
the Gram matrix restricted to one level is A' diag(w) A with w the masked
sample count per response.  For the bidiagonal AR(1) operator that Gram is
tridiagonal, which enables an exact active-set refinement step whenever
cyclic descent converges slowly (the nearly unpenalized, dense-support tail
of the cross-validation path).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve, solveh_banded, LinAlgError

from whitesel.whitening import WhiteningOperator, apply_whitening, portmanteau_test


class ConvergenceError(Exception):
    """Coordinate descent did not converge within the sweep budget."""

    def __init__(self, sweeps: int, kkt_gap: float, lam: float):
        self.sweeps = sweeps
        self.kkt_gap = kkt_gap
        self.lam = lam
        super().__init__(
            f"no convergence after {sweeps} sweeps (kkt gap {kkt_gap:.3e}, lambda {lam:.6g})"
        )


@dataclass(frozen=True)
class VectorizedProblem:
    """Implicit Kronecker-structured regression vec(Yw) ~ (S' kron X) b."""

    response: np.ndarray  # (n*q,) vec(Yw), column-stacked
    response_matrix: np.ndarray  # (n, q) whitened observations
    X: np.ndarray  # (n, p) design
    A: np.ndarray  # (q, q) transposed whitening operator S' (lower triangular)
    bandwidth: int  # lower bandwidth of A
    n: int
    p: int
    q: int


@dataclass(frozen=True)
class LassoSolution:
    beta: np.ndarray
    lam: float
    objective: float
    iterations: int
    kkt_gap: float
    objective_history: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class StabilityReport:
    """Selection frequencies over random half-subsamples of vec(Yw)."""

    frequencies: np.ndarray  # (p, q) in [0, 1]
    lambda_cv: float
    n_resamples: int
    n_failed: int = 0

    def support(self, threshold: float) -> np.ndarray:
        return self.frequencies >= threshold


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: float
    support: np.ndarray  # (p, q) bool
    pvalues: dict[float, float] | None = None


@dataclass(frozen=True)
class CvResult:
    lambda_cv: float
    grid: np.ndarray
    mean_errors: np.ndarray


def vectorize(Yw: np.ndarray, X: np.ndarray, op: WhiteningOperator) -> VectorizedProblem:
    """Bundle whitened observations and design factors into a lasso problem."""
    Yw = np.asarray(Yw, dtype=float)
    X = np.asarray(X, dtype=float)
    n, q = Yw.shape
    if X.shape[0] != n:
        raise ValueError("X and Yw row counts differ")
    if op.q != q:
        raise ValueError("whitening operator dimension does not match Yw")
    bandwidth = {"identity": 0, "ar1": 1}.get(op.kind, q - 1)
    A = np.ascontiguousarray(op.matrix.T)
    return VectorizedProblem(
        response=Yw.reshape(-1, order="F").copy(),
        response_matrix=Yw,
        X=np.ascontiguousarray(X),
        A=A,
        bandwidth=bandwidth,
        n=n,
        p=X.shape[1],
        q=q,
    )


def kronecker_matvec(problem: VectorizedProblem, v: np.ndarray) -> np.ndarray:
    """Multiply the implicit design (S' kron X) by a length-pq vector.

    Uses (A kron X) vec(V) = vec(X V A'): reshape v to p x q, multiply, and
    restack columns.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (problem.p * problem.q,):
        raise ValueError(f"v must have length {problem.p * problem.q}")
    V = v.reshape(problem.p, problem.q, order="F")
    out = problem.X @ _mul_At(V, problem.A, problem.bandwidth)
    return out.reshape(-1, order="F")


def _mul_A(M: np.ndarray, A: np.ndarray, bw: int) -> np.ndarray:
    """M @ A for lower-triangular A, exploiting small bandwidth."""
    if bw == 0:
        return M * np.diagonal(A)[None, :]
    if bw == 1:
        out = M * np.diagonal(A)[None, :]
        out[:, :-1] += M[:, 1:] * np.diagonal(A, -1)[None, :]
        return out
    return M @ A


def _mul_At(M: np.ndarray, A: np.ndarray, bw: int) -> np.ndarray:
    """M @ A' for lower-triangular A, exploiting small bandwidth."""
    if bw == 0:
        return M * np.diagonal(A)[None, :]
    if bw == 1:
        out = M * np.diagonal(A)[None, :]
        out[:, 1:] += M[:, :-1] * np.diagonal(A, -1)[None, :]
        return out
    return M @ A.T


@njit(cache=True, nogil=True)
def _cd_structured(X, A, mask, Rm, beta, norms2, lam, coords_b, coords_a, bandwidth, tol, max_sweeps):  # pragma: no cover - jitted
    n, _ = X.shape
    q = A.shape[0]
    half = 0.5 * lam
    m = coords_b.shape[0]
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = 0.0
        max_beta = 1.0
        for k in range(m):
            b = coords_b[k]
            a = coords_a[k]
            nrm = norms2[b, a]
            if nrm <= 0.0:
                continue
            t1 = a + bandwidth + 1
            if t1 > q:
                t1 = q
            c = 0.0
            for i in range(n):
                xib = X[i, b]
                if xib == 0.0:
                    continue
                s = 0.0
                for t in range(a, t1):
                    s += Rm[i, t] * A[t, a]
                c += xib * s
            old = beta[b, a]
            z = c + nrm * old
            if z > half:
                new = (z - half) / nrm
            elif z < -half:
                new = (z + half) / nrm
            else:
                new = 0.0
            diff = new - old
            if diff != 0.0:
                beta[b, a] = new
                for i in range(n):
                    xib = X[i, b]
                    if xib == 0.0:
                        continue
                    dx = diff * xib
                    for t in range(a, t1):
                        Rm[i, t] -= dx * A[t, a] * mask[i, t]
                ad = abs(diff)
                if ad > max_change:
                    max_change = ad
            ab = abs(new)
            if ab > max_beta:
                max_beta = ab
        if max_change < tol * max_beta:
            break
    return sweeps


@njit(cache=True, nogil=True)
def _cd_dense(D, r, beta, norms2, lam, tol, max_sweeps):  # pragma: no cover - jitted
    n, p = D.shape
    half = 0.5 * lam
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = 0.0
        max_beta = 1.0
        for j in range(p):
            nrm = norms2[j]
            if nrm <= 0.0:
                continue
            c = 0.0
            for i in range(n):
                c += D[i, j] * r[i]
            old = beta[j]
            z = c + nrm * old
            if z > half:
                new = (z - half) / nrm
            elif z < -half:
                new = (z + half) / nrm
            else:
                new = 0.0
            diff = new - old
            if diff != 0.0:
                beta[j] = new
                for i in range(n):
                    r[i] -= diff * D[i, j]
                ad = abs(diff)
                if ad > max_change:
                    max_change = ad
            ab = abs(new)
            if ab > max_beta:
                max_beta = ab
        if max_change < tol * max_beta:
            break
    return sweeps


def _kkt_gap(C: np.ndarray, beta: np.ndarray, lam: float) -> float:
    """Max KKT violation of ||r||^2 + lam ||b||_1: C is 2 D'r."""
    active = beta != 0.0
    gap = 0.0
    if active.any():
        gap = float(np.abs(C[active] - lam * np.sign(beta[active])).max())
    if (~active).any():
        gap = max(gap, float(np.maximum(np.abs(C[~active]) - lam, 0.0).max()))
    return gap


def _element_mask(n: int, q: int, sample_indices: np.ndarray | None) -> np.ndarray:
    if sample_indices is None:
        return np.ones((n, q))
    mask = np.zeros(n * q)
    mask[np.asarray(sample_indices, dtype=np.intp)] = 1.0
    return mask.reshape(n, q, order="F")


class _SolverState:
    """Per-(problem, mask) workspace shared across penalties.

    Holds the masked residual matrix and the coefficient matrix in place so
    a penalty path or a resample refit can warm-start cheaply.
    """

    def __init__(self, problem: VectorizedProblem, mask: np.ndarray, beta0: np.ndarray | None = None):
        self.pr = problem
        self.mask = mask
        X, A, bw = problem.X, problem.A, problem.bandwidth
        self.W = X.T @ mask  # (p, q) masked sample count per (level, response)
        self.norms2 = _mul_A(self.W, A * A, bw)
        self.c0 = _mul_A(X.T @ (problem.response_matrix * mask), A, bw)
        if beta0 is None:
            self.beta = np.zeros((problem.p, problem.q))
            self.Rm = problem.response_matrix * mask
        else:
            self.beta = np.array(beta0, dtype=float).reshape(problem.p, problem.q, order="F").copy()
            # Coordinates whose column is entirely masked out are
            # unidentifiable; the penalty drives them to zero.
            self.beta[self.norms2 <= 0.0] = 0.0
            self._reset_residual()
        if bw <= 1:
            d = np.diagonal(A).copy()
            s = np.diagonal(A, -1).copy() if bw == 1 else np.zeros(problem.q - 1)
            # Per-level tridiagonal Gram bands of A' diag(w) A.
            self.g_diag = self.W * d[None, :] ** 2
            self.g_diag[:, :-1] += self.W[:, 1:] * s[None, :] ** 2
            self.g_off = self.W[:, 1:] * (d[1:] * s)[None, :]

    def _reset_residual(self) -> None:
        pr = self.pr
        fitted = pr.X @ _mul_At(self.beta, pr.A, pr.bandwidth)
        self.Rm = (pr.response_matrix - fitted) * self.mask

    def correlations(self) -> np.ndarray:
        pr = self.pr
        return 2.0 * _mul_A(pr.X.T @ self.Rm, pr.A, pr.bandwidth)

    def objective(self, lam: float) -> float:
        return float((self.Rm**2).sum() + lam * np.abs(self.beta).sum())

    def _refine_level(self, b: int, lam: float) -> np.ndarray | None:
        """Exact solve of the active-set stationarity system for one level."""
        pr = self.pr
        active = np.flatnonzero(self.beta[b])
        if active.size == 0:
            return np.zeros(pr.q)
        signs = np.sign(self.beta[b, active])
        rhs = self.c0[b, active] - 0.5 * lam * signs
        try:
            if pr.bandwidth <= 1:
                if active.size == 1:
                    g = self.g_diag[b, active[0]]
                    if g <= 0.0:
                        return None
                    out = np.zeros(pr.q)
                    out[active[0]] = rhs[0] / g
                    return out
                ab = np.zeros((2, active.size))
                ab[1] = self.g_diag[b, active]
                adjacent = np.diff(active) == 1
                ab[0, 1:][adjacent] = self.g_off[b, active[:-1][adjacent]]
                x = solveh_banded(ab, rhs, lower=False)
            else:
                Am = pr.A[:, active]
                G = Am.T @ (self.W[b][:, None] * Am)
                x = cho_solve(cho_factor(G), rhs)
        except (LinAlgError, np.linalg.LinAlgError):
            return None
        out = np.zeros(pr.q)
        out[active] = x
        return out

    def try_refine(self, lam: float, kkt_tol: float) -> float | None:
        """Solve the current sign pattern exactly; keep it only if it helps.

        Returns the new KKT gap when the refined point is adopted, else None.
        """
        pr = self.pr
        levels = [self._refine_level(b, lam) for b in range(pr.p)]
        if any(lv is None for lv in levels):
            return None
        beta_new = np.vstack(levels)
        fitted = pr.X @ _mul_At(beta_new, pr.A, pr.bandwidth)
        Rm_new = (pr.response_matrix - fitted) * self.mask
        obj_new = float((Rm_new**2).sum() + lam * np.abs(beta_new).sum())
        if obj_new >= self.objective(lam) - 1e-12:
            return None
        self.beta = beta_new
        self.Rm = Rm_new
        return _kkt_gap(self.correlations(), self.beta, lam)

    def solve(
        self,
        lam: float,
        tol: float = 1e-7,
        kkt_tol: float = 1e-6,
        max_sweeps: int = 100_000,
        collect_history: bool = False,
    ) -> LassoSolution:
        """Run screened coordinate descent at one penalty, warm-started."""
        pr = self.pr
        total_sweeps = 0
        history = [] if collect_history else None
        current_tol = tol
        # A handful of sweeps is enough to settle the sign pattern; the
        # exact refinement step then finishes the magnitudes.
        inner_cap = 5
        while True:
            C = self.correlations()
            gap = _kkt_gap(C, self.beta, lam)
            if history is not None:
                history.append(self.objective(lam))
            if gap <= kkt_tol:
                break
            if total_sweeps >= max_sweeps:
                raise ConvergenceError(total_sweeps, gap, lam)
            work = (self.beta != 0.0) | (np.abs(C) > lam + kkt_tol)
            coords_b, coords_a = np.nonzero(work)
            total_sweeps += _cd_structured(
                pr.X,
                pr.A,
                self.mask,
                self.Rm,
                self.beta,
                self.norms2,
                lam,
                coords_b.astype(np.intp),
                coords_a.astype(np.intp),
                pr.bandwidth,
                current_tol,
                min(inner_cap, max_sweeps - total_sweeps),
            )
            current_tol = max(current_tol * 0.1, 1e-16)
            refined_gap = self.try_refine(lam, kkt_tol)
            if refined_gap is not None and refined_gap <= kkt_tol:
                gap = refined_gap
                if history is not None:
                    history.append(self.objective(lam))
                break
        return LassoSolution(
            beta=self.beta.reshape(-1, order="F").copy(),
            lam=lam,
            objective=self.objective(lam),
            iterations=total_sweeps,
            kkt_gap=gap,
            objective_history=None if history is None else np.array(history),
        )


def _solve_dense(
    D: np.ndarray,
    y: np.ndarray,
    lam: float,
    beta0: np.ndarray | None,
    tol: float,
    kkt_tol: float,
    max_sweeps: int,
) -> LassoSolution:
    D = np.ascontiguousarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.zeros(D.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    norms2 = (D**2).sum(axis=0)
    beta[norms2 <= 0.0] = 0.0
    r = y - D @ beta
    total_sweeps = 0
    history = []
    current_tol = tol
    while True:
        C = 2.0 * (D.T @ r)
        history.append(float(r @ r + lam * np.abs(beta).sum()))
        gap = _kkt_gap(C, beta, lam)
        if gap <= kkt_tol:
            break
        if total_sweeps >= max_sweeps:
            raise ConvergenceError(total_sweeps, gap, lam)
        total_sweeps += _cd_dense(D, r, beta, norms2, lam, current_tol, max_sweeps - total_sweeps)
        current_tol = max(current_tol * 0.1, 1e-16)
    return LassoSolution(
        beta=beta,
        lam=lam,
        objective=history[-1],
        iterations=total_sweeps,
        kkt_gap=gap,
        objective_history=np.array(history),
    )


def lasso_solve(
    design: VectorizedProblem | np.ndarray,
    response: np.ndarray | None = None,
    *,
    lam: float,
    warm_start: np.ndarray | None = None,
    sample_indices: np.ndarray | None = None,
    tol: float = 1e-7,
    kkt_tol: float = 1e-6,
    max_sweeps: int = 100_000,
) -> LassoSolution:
    """Cyclic coordinate descent for ||y - D b||_2^2 + lam ||b||_1.

    ``design`` is either a :class:`VectorizedProblem` (structured Kronecker
    path, ``response`` ignored) or a materialized design matrix with an
    explicit ``response``.  ``sample_indices`` restricts the fit to a subset
    of response elements (rows of the implicit design), as used by
    cross-validation folds and stability resamples.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if isinstance(design, VectorizedProblem):
        mask = _element_mask(design.n, design.q, sample_indices)
        state = _SolverState(design, mask, warm_start)
        return state.solve(lam, tol, kkt_tol, max_sweeps, collect_history=True)
    design = np.asarray(design, dtype=float)
    if response is None:
        raise ValueError("response is required with a materialized design")
    if sample_indices is not None:
        design = design[sample_indices]
        response = np.asarray(response, dtype=float)[sample_indices]
    return _solve_dense(design, response, lam, warm_start, tol, kkt_tol, max_sweeps)


def lambda_max(
    design: VectorizedProblem | np.ndarray,
    response: np.ndarray | None = None,
    sample_indices: np.ndarray | None = None,
) -> float:
    """Smallest penalty with an all-zero solution: 2 ||D' y||_inf."""
    if isinstance(design, VectorizedProblem):
        mask = _element_mask(design.n, design.q, sample_indices)
        C = _mul_A(design.X.T @ (design.response_matrix * mask), design.A, design.bandwidth)
        return 2.0 * float(np.abs(C).max())
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    if sample_indices is not None:
        design = design[sample_indices]
        response = response[sample_indices]
    return 2.0 * float(np.abs(design.T @ response).max())


def default_lambda_grid(lam_max: float, n_grid: int = 100, ratio: float = 1e-3) -> np.ndarray:
    """Log-spaced penalty grid from lam_max down to lam_max * ratio."""
    if n_grid < 1:
        raise ValueError("n_grid must be >= 1")
    return np.geomspace(lam_max, lam_max * ratio, n_grid)


def cross_validate_lambda(
    problem: VectorizedProblem,
    n_folds: int = 10,
    grid: np.ndarray | None = None,
    seed: int = 0,
    n_jobs: int | None = None,
    tol: float = 1e-7,
    kkt_tol: float = 1e-6,
    max_sweeps: int = 100_000,
) -> CvResult:
    """Pick the penalty minimizing mean held-out squared error.

    The nq elements of vec(Yw) are shuffled (seeded) into ``n_folds`` folds;
    each fold is held out in turn while the lasso path is fit on the rest
    with warm starts from large to small penalties.  Ties go to the largest
    penalty.
    """
    N = problem.n * problem.q
    if N < n_folds:
        raise ValueError("need at least n_folds response elements")
    if grid is None:
        grid = default_lambda_grid(lambda_max(problem))
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    order = np.argsort(grid)[::-1]

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    folds = np.array_split(rng.permutation(N), n_folds)

    X, A, bw = problem.X, problem.A, problem.bandwidth
    Yw = problem.response_matrix

    def fold_errors(test_idx: np.ndarray) -> np.ndarray:
        test_mask = _element_mask(problem.n, problem.q, test_idx)
        train_mask = 1.0 - test_mask
        state = _SolverState(problem, train_mask)
        errs = np.empty(grid.size)
        for k in order:
            state.solve(grid[k], tol, kkt_tol, max_sweeps)
            resid = Yw - X @ _mul_At(state.beta, A, bw)
            errs[k] = float(((resid * test_mask) ** 2).sum())
        return errs

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        per_fold = list(pool.map(fold_errors, folds))
    mean_errors = np.mean(per_fold, axis=0)
    best = order[np.argmin(mean_errors[order])]
    return CvResult(lambda_cv=float(grid[best]), grid=grid, mean_errors=mean_errors)


def stability_select(
    problem: VectorizedProblem,
    lambda_cv: float,
    n_resamples: int = 5000,
    seed: int = 0,
    n_jobs: int | None = None,
    tol: float = 1e-7,
    kkt_tol: float = 1e-6,
    max_sweeps: int = 100_000,
) -> StabilityReport:
    """Selection frequencies over random half-subsamples of vec(Yw).

    Each resample draws floor(nq/2) response elements without replacement and
    refits the lasso at ``lambda_cv`` (no per-resample retuning), warm-started
    from the full-data solution.  Resamples whose solver fails to converge are
    dropped; the run aborts if more than 1% fail.
    """
    N = problem.n * problem.q
    if N < 2:
        raise ValueError("need at least 2 response elements")
    half = N // 2
    children = np.random.SeedSequence(seed).spawn(n_resamples)
    full = lasso_solve(problem, lam=lambda_cv, tol=tol, kkt_tol=kkt_tol, max_sweeps=max_sweeps)
    warm = full.beta

    def one(child) -> np.ndarray | None:
        rng = np.random.default_rng(child)
        idx = rng.choice(N, size=half, replace=False)
        try:
            sol = lasso_solve(
                problem,
                lam=lambda_cv,
                warm_start=warm,
                sample_indices=idx,
                tol=tol,
                kkt_tol=kkt_tol,
                max_sweeps=max_sweeps,
            )
        except ConvergenceError:
            return None
        return sol.beta != 0.0

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        supports = list(pool.map(one, children))
    counts = np.zeros(problem.p * problem.q, dtype=np.int64)
    n_failed = 0
    for sup in supports:
        if sup is None:
            n_failed += 1
        else:
            counts += sup
    if n_failed > 0.01 * n_resamples:
        raise RuntimeError(f"{n_failed}/{n_resamples} resamples failed to converge")
    n_ok = n_resamples - n_failed
    frequencies = (counts / n_ok).reshape(problem.p, problem.q, order="F")
    return StabilityReport(
        frequencies=frequencies,
        lambda_cv=float(lambda_cv),
        n_resamples=n_resamples,
        n_failed=n_failed,
    )


def choose_threshold(
    report: StabilityReport,
    mode: str = "fixed-one",
    Y: np.ndarray | None = None,
    X: np.ndarray | None = None,
    operator: WhiteningOperator | None = None,
    H: int = 10,
    grid: np.ndarray | None = None,
) -> ThresholdChoice:
    """Turn stability frequencies into a final support.

    ``fixed-one`` keeps only coefficients selected in every resample.
    ``max-pvalue`` scans a threshold grid, refits the restricted OLS on each
    thresholded support, and keeps the threshold whose whitened residuals get
    the largest pooled Portmanteau p-value (ties favor the larger threshold).
    """
    if mode == "fixed-one":
        return ThresholdChoice(threshold=1.0, support=report.support(1.0))
    if mode != "max-pvalue":
        raise ValueError(f"unknown threshold mode {mode!r}")
    if Y is None or X is None or operator is None:
        raise ValueError("max-pvalue mode needs Y, X and the whitening operator")
    if grid is None:
        grid = np.arange(0.5, 1.0 + 1e-9, 0.05)
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    counts = X.sum(axis=0)
    means = (X.T @ Y) / counts[:, None]
    best_t = None
    best_p = -1.0
    pvalues: dict[float, float] = {}
    for t in grid:
        support = report.support(t)
        B = np.where(support, means, 0.0)
        resid = Y - X @ B
        pv = portmanteau_test(apply_whitening(resid, operator), H).pvalue
        pvalues[float(t)] = pv
        if pv >= best_p:
            best_p, best_t = pv, float(t)
    return ThresholdChoice(threshold=best_t, support=report.support(best_t), pvalues=pvalues)
