"""Dense primal-dual interior-point solver for small moment SDPs, and dual certificates.

Problems are posed in moment form::

    maximize    c @ y + offset
    subject to  const + sum_v y_v F_v  is PSD  (real symmetric or Hermitian)
                y_v = value              for pinned variables
                G @ y <= h

with the F_v given as a coordinate list (rows, cols, var, coef) that lists
both triangles explicitly.  The Lagrange dual supplies a matrix Z >= 0, one
multiplier per pinned variable and w >= 0 for the inequality rows; any such
triple with c_v + <F_v, Z> - (G^T w)_v - lambda_v = 0 bounds the optimum by
offset + <const, Z> + sum lambda_v value_v + h @ w.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

OPTIMAL = "optimal"
NEAR_OPTIMAL = "near-optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass(frozen=True, eq=False)
class ConicProblem:
    dim: int
    hermitian: bool
    rows: np.ndarray
    cols: np.ndarray
    var: np.ndarray
    coef: np.ndarray
    nvars: int
    objective: np.ndarray
    fixed: dict = field(default_factory=dict)
    ineq_G: np.ndarray | None = None
    ineq_h: np.ndarray | None = None
    const: np.ndarray | None = None
    offset: float = 0.0
    stat_vars: dict = field(default_factory=dict)
    trace_bound: float | None = None
    assumed_zero: tuple = ()
    precondition: np.ndarray | None = None

    def __post_init__(self):
        if self.ineq_G is None:
            object.__setattr__(self, "ineq_G", np.zeros((0, self.nvars)))
            object.__setattr__(self, "ineq_h", np.zeros(0))
        if len(self.objective) != self.nvars:
            raise ValueError("objective length does not match nvars")

    def replace(self, **changes) -> ConicProblem:
        return dataclasses.replace(self, **changes)

    @property
    def dtype(self):
        return complex if self.hermitian else float

    def matrix(self, y: np.ndarray) -> np.ndarray:
        """const + sum_v y_v F_v as a dense matrix."""
        M = np.zeros((self.dim, self.dim), dtype=self.dtype)
        if self.const is not None:
            M += self.const
        np.add.at(M, (self.rows, self.cols), self.coef * np.asarray(y)[self.var])
        return M

    def adjoint(self, Z: np.ndarray) -> np.ndarray:
        """Vector of <F_v, Z> = Re tr(F_v Z)."""
        vals = np.real(self.coef * Z[self.cols, self.rows])
        return np.bincount(self.var, weights=vals, minlength=self.nvars)

    def with_fixed(self, updates: dict) -> ConicProblem:
        fixed = dict(self.fixed)
        fixed.update(updates)
        return self.replace(fixed=fixed)

    def scaled(self, factor: float) -> ConicProblem:
        return self.replace(objective=self.objective * factor, offset=self.offset * factor)

    def congruence(self, T: np.ndarray) -> ConicProblem:
        """Same problem with every matrix replaced by T M T^H (T invertible)."""
        d = self.dim
        T = np.asarray(T, dtype=self.dtype)
        Ts = sp.csr_matrix(T)
        stack = sp.csr_matrix((self.coef, (self.rows, self.var * d + self.cols)), shape=(d, self.nvars * d))
        stack = Ts @ stack @ sp.kron(sp.identity(self.nvars, format="csr"), Ts.conj().T, format="csr")
        coo = stack.tocoo()
        keep = coo.data != 0
        var, cols = np.divmod(coo.col[keep], d)
        const = None if self.const is None else T @ self.const @ T.conj().T
        return self.replace(
            rows=coo.row[keep].astype(np.int64), cols=cols.astype(np.int64), var=var.astype(np.int64),
            coef=coo.data[keep], const=const, precondition=None,
        )  # fmt: skip


@dataclass(frozen=True, eq=False)
class DualCertificate:
    """Dual solution certifying p <= K + sum_xy nu[x, y] * p(0|x,y).

    ``Z`` is the dual matrix (the negative of the slack A - sum(multipliers *
    functionals)), ``multipliers`` holds one value per pinned variable and
    ``lp`` the inequality multipliers.
    """

    K: float
    nu: dict
    Z: np.ndarray
    multipliers: dict
    lp: np.ndarray
    slack_max_eig: float
    residual: float
    assumed_zero: tuple = ()

    def bound(self, p0) -> float:
        p0 = np.asarray(p0)
        return self.K + math.fsum(v * p0[key] for key, v in self.nu.items())

    def with_nu(self, key, value) -> DualCertificate:
        nu = dict(self.nu)
        nu[key] = value
        return dataclasses.replace(self, nu=nu)

    def to_text(self) -> str:
        lines = [f"K = {self.K!r}"]
        lines += [f"nu[{x},{y}] = {v!r}" for (x, y), v in sorted(self.nu.items())]
        lines.append(f"slack_max_eig = {self.slack_max_eig!r}")
        lines.append(f"residual = {self.residual!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class Solution:
    value: float
    dual_value: float
    status: str
    y: np.ndarray
    certificate: DualCertificate | None
    iterations: int = 0
    message: str = ""


class _Reduced:
    """Problem restricted to the free variables, with pinned ones folded into C."""

    def __init__(self, P: ConicProblem):
        self.P = P
        fixed_idx = np.array(sorted(P.fixed), dtype=np.int64)
        fixed_val = np.array([P.fixed[v] for v in fixed_idx], dtype=float)
        yfix = np.zeros(P.nvars)
        yfix[fixed_idx] = fixed_val
        self.yfix = yfix
        is_free = np.ones(P.nvars, dtype=bool)
        is_free[fixed_idx] = False
        self.free = np.flatnonzero(is_free)
        self.m = len(self.free)
        newidx = np.full(P.nvars, -1)
        newidx[self.free] = np.arange(self.m)

        d = P.dim
        C = np.zeros((d, d), dtype=P.dtype)
        if P.const is not None:
            C += P.const
        pinned = ~is_free[P.var]
        np.add.at(C, (P.rows[pinned], P.cols[pinned]), P.coef[pinned] * yfix[P.var[pinned]])
        self.C = C

        keep = ~pinned
        order = np.argsort(newidx[P.var[keep]], kind="stable")
        self.ea = P.rows[keep][order]
        self.eb = P.cols[keep][order]
        self.ev = newidx[P.var[keep]][order]
        self.ec = P.coef[keep][order]
        self.starts = np.flatnonzero(np.r_[True, self.ev[1:] != self.ev[:-1]]) if len(self.ev) else np.zeros(0, int)
        present = self.ev[self.starts] if len(self.ev) else np.zeros(0, int)
        if len(present) != self.m:
            raise ValueError("some free variables do not appear in the matrix")

        self.c = P.objective[self.free]
        self.offset = P.offset + float(P.objective @ yfix)
        G = np.asarray(P.ineq_G, dtype=float)
        self.G = G[:, self.free]
        self.h = np.asarray(P.ineq_h, dtype=float) - G @ yfix
        self.k = len(self.h)
        self._stack = None

    def Fop(self, y):
        M = np.zeros((self.P.dim, self.P.dim), dtype=self.P.dtype)
        np.add.at(M, (self.ea, self.eb), self.ec * y[self.ev])
        return M

    def Fadj(self, X):
        vals = np.real(self.ec * X[self.eb, self.ea])
        return np.bincount(self.ev, weights=vals, minlength=self.m)

    def schur(self, X, W, chunk_elems=4_000_000):
        """M[u, v] = Re tr(F_u X F_v W).

        Z_v = X F_v W is formed for a block of variables at a time (one sparse
        product and one batched matmul), then M[u, v] = Re sum_{e in u} c_e Z_v[b_e, a_e].
        """
        d, m = self.P.dim, self.m
        M = np.zeros((m, m))
        if m == 0:
            return M
        if self._stack is None:
            # columns v*d + b hold the entries of F_v in column b
            self._stack = sp.csc_matrix((self.ec, (self.ea, self.ev * d + self.eb)), shape=(d, m * d))
        XT = np.ascontiguousarray(X.T)
        block = max(1, chunk_elems // (d * d))
        for lo in range(0, m, block):
            hi = min(m, lo + block)
            Y = (self._stack[:, lo * d:hi * d].T @ XT).T  # X @ [F_lo .. F_hi)
            Z = Y.reshape(d, hi - lo, d).transpose(1, 0, 2) @ W
            G = Z[:, self.eb, self.ea] * self.ec
            M[lo:hi] = np.add.reduceat(G, self.starts, axis=1).real
        return 0.5 * (M + M.T)


def _herm(A):
    return 0.5 * (A + A.conj().T)


def _max_step(X, dX):
    """Largest alpha in (0, inf] with X + alpha dX PSD, given X > 0."""
    L = np.linalg.cholesky(X)
    Li = sla.solve_triangular(L, np.eye(len(X)), lower=True)
    lam = np.linalg.eigvalsh(_herm(Li @ dX @ Li.conj().T)).min()
    return np.inf if lam >= 0 else -1.0 / lam


def _max_step_lp(x, dx):
    neg = dx < 0
    return np.inf if not neg.any() else float(np.min(-x[neg] / dx[neg]))


CENTRALITY = 1e-3


def _centrality(X, S, x, s) -> float:
    """min eigenvalue of X S (and of x*s) relative to their mean."""
    try:
        L = np.linalg.cholesky(_herm(X))
    except np.linalg.LinAlgError:
        return 0.0
    lam = np.linalg.eigvalsh(_herm(L.conj().T @ S @ L))
    prods = np.concatenate([lam, x * s])
    mean = prods.mean()
    return float(prods.min() / mean) if mean > 0 else 0.0


def solve(
    problem: ConicProblem, tol: float = 1e-8, max_iter: int = 100, verbose: bool = False
) -> Solution:
    """Maximize the moment-form problem; returns value, certificate and status.

    If the problem carries a ``precondition`` matrix T the iteration runs on
    the congruent problem T F T^H and the dual matrix is mapped back, so the
    certificate always refers to ``problem`` itself.
    """
    if problem.precondition is not None:
        T = np.asarray(problem.precondition)
        sol = solve(problem.congruence(T), tol, max_iter, verbose)
        if sol.certificate is None:
            return sol
        Z = _herm(T.conj().T @ sol.certificate.Z @ T)
        cert = _certificate(problem, _Reduced(problem), Z, sol.certificate.lp)
        return dataclasses.replace(sol, certificate=cert)
    R = _Reduced(problem)
    if R.m == 0:
        return _solve_pinned(R, tol)
    d, k, m = problem.dim, R.k, R.m
    dtype = problem.dtype
    I = np.eye(d, dtype=dtype)

    normC = max(1.0, np.linalg.norm(R.C))
    normc = max(1.0, np.linalg.norm(R.c))
    normh = max(1.0, np.linalg.norm(R.h)) if k else 1.0
    xi = max(10.0, math.sqrt(d))
    X, S = xi * I, xi * I
    x, s = np.full(k, xi), np.full(k, xi)
    y = np.zeros(m)
    deg = d + k
    status, msg = NUMERICAL_FAILURE, ""
    best = None

    for it in range(1, max_iter + 1):
        Fy = R.Fop(y)
        Rp = -R.c - R.Fadj(X) + R.G.T @ x
        RS = R.C + Fy - S
        Rs = R.h - R.G @ y - s
        pobj = float(np.real(np.vdot(R.C, X))) + float(R.h @ x) + R.offset
        dobj = float(R.c @ y) + R.offset
        gap = float(np.real(np.vdot(X, S))) + float(x @ s)
        mu = gap / deg
        pinf = np.linalg.norm(Rp) / normc
        dinf = (np.linalg.norm(RS) + np.linalg.norm(Rs)) / (normC + normh)
        relgap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        if verbose:
            print(f"{it:3d} p={pobj:+.10e} d={dobj:+.10e} gap={relgap:.1e} pinf={pinf:.1e} dinf={dinf:.1e}")
        score = max(pinf, dinf, relgap)
        if best is None or score < best[0]:
            best = (score, X.copy(), x.copy(), y.copy(), pobj, dobj)
        if pinf < tol and dinf < tol and relgap < tol:
            status = OPTIMAL
            break
        t = -(pobj - R.offset)
        if t > 0 and np.linalg.norm(R.c + Rp) / t < tol and dinf > 1e-3:
            status, msg = INFEASIBLE, "Farkas certificate found: constraints admit no PSD moment matrix"
            break
        if dobj > 1e10 * normc and dinf < tol:
            status, msg = UNBOUNDED, "objective diverges on the feasible set"
            break

        try:
            cS = sla.cho_factor(S, lower=True)
            W = sla.cho_solve(cS, I)
            W = _herm(W)
            M = R.schur(X, W)
            D = x / s
            M += R.G.T @ (D[:, None] * R.G)
            M += 1e-14 * np.trace(M) / m * np.eye(m)
            cM = sla.cho_factor(M, lower=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            msg = f"factorization failed: {exc}"
            break

        def direction(sigma, corrX=0.0, corrx=0.0):
            # HKM: dX = sigma mu S^-1 - X - X dS S^-1 (minus the corrector term)
            base = sigma * mu * W - X - X @ RS @ W - corrX
            blp = sigma * mu / s - x - D * Rs - corrx
            rhs = R.Fadj(base) - R.G.T @ blp - Rp
            dy = sla.cho_solve(cM, rhs)
            Fdy = R.Fop(dy)
            dS = RS + Fdy
            dX = _herm(base - X @ Fdy @ W)
            ds = Rs - R.G @ dy
            dx = blp + D * (R.G @ dy)
            return dX, dx, dy, dS, ds

        try:
            dXa, dxa, dya, dSa, dsa = direction(0.0)
            ap = min(1.0, _max_step(X, dXa), _max_step_lp(x, dxa))
            ad = min(1.0, _max_step(S, dSa), _max_step_lp(s, dsa))
            gap_a = float(np.real(np.vdot(X + ap * dXa, S + ad * dSa)))
            if k:
                gap_a += float((x + ap * dxa) @ (s + ad * dsa))
            sigma = min(1.0, max(0.0, (gap_a / gap) ** 3))
            corrX = dXa @ dSa @ W
            corrx = dxa * dsa / s
            dX, dx, dy, dS, ds = direction(sigma, corrX, corrx)
            tau = 0.98 if it < 4 else 0.995
            ap = min(1.0, tau * _max_step(X, dX), tau * _max_step_lp(x, dx))
            ad = min(1.0, tau * _max_step(S, dS), tau * _max_step_lp(s, ds))
            # stay in a wide neighbourhood of the central path
            for _ in range(30):
                if _centrality(X + ap * dX, S + ad * dS, x + ap * dx, s + ad * ds) >= CENTRALITY:
                    break
                ap *= 0.8
                ad *= 0.8
        except np.linalg.LinAlgError as exc:
            msg = f"step computation failed: {exc}"
            break
        if verbose:
            print(f"    sigma={sigma:.2e} ap={ap:.2e} ad={ad:.2e} mu={mu:.2e}")
        X = _herm(X + ap * dX)
        S = _herm(S + ad * dS)
        y = y + ad * dy
        if k:
            x = x + ap * dx
            s = s + ad * ds
    else:
        msg = "iteration limit reached"

    if status != OPTIMAL and status not in (INFEASIBLE, UNBOUNDED) and best is not None:
        score, X, x, y, pobj, dobj = best
        if score < max(1e3 * tol, 1e-6):
            status = NEAR_OPTIMAL
            warnings.warn(f"SDP solve stopped short of tolerance ({msg or 'stalled'}); best residual {score:.1e}")
        else:
            status = NUMERICAL_FAILURE
    if status == INFEASIBLE:
        return Solution(math.nan, math.nan, status, y, None, it, msg)
    yfull = R.yfix.copy()
    yfull[R.free] = y
    cert = _certificate(problem, R, X, x)
    return Solution(dobj, pobj, status, yfull, cert, it, msg)


def _solve_pinned(R: _Reduced, tol: float) -> Solution:
    P = R.P
    lam = np.linalg.eigvalsh(_herm(R.C)).min() if P.dim else 0.0
    if lam < -tol or (R.k and R.h.min() < -tol):
        return Solution(math.nan, math.nan, INFEASIBLE, R.yfix, None, 0, "pinned values violate the constraints")
    X = np.zeros((P.dim, P.dim), dtype=P.dtype)
    cert = _certificate(P, R, X, np.zeros(R.k))
    return Solution(R.offset, R.offset, OPTIMAL, R.yfix, cert, 0, "")


def _certificate(P: ConicProblem, R: _Reduced, X: np.ndarray, x: np.ndarray) -> DualCertificate:
    G = np.asarray(P.ineq_G, dtype=float)
    x = np.maximum(x, 0.0)
    grad = P.objective + P.adjoint(X) - (G.T @ x if len(x) else 0.0)
    multipliers = {v: float(grad[v]) for v in P.fixed}
    K = P.offset + (float(np.real(np.vdot(P.const, X))) if P.const is not None else 0.0)
    K += float(np.asarray(P.ineq_h, dtype=float) @ x) if len(x) else 0.0
    stat_keys = {v: key for key, v in P.stat_vars.items()}
    nu = {}
    for v, lam in multipliers.items():
        if v in stat_keys:
            nu[stat_keys[v]] = lam
        else:
            K += lam * P.fixed[v]
    free_resid = np.abs(np.delete(grad, list(P.fixed))) if P.fixed else np.abs(grad)
    resid = float(free_resid.max()) if free_resid.size else 0.0
    lam_min = float(np.linalg.eigvalsh(_herm(X)).min()) if P.dim else 0.0
    return DualCertificate(K, nu, X, multipliers, x, -lam_min, resid, tuple(P.assumed_zero))


def certified_constant(problem: ConicProblem, cert: DualCertificate, margin: float = 1e-8) -> tuple[float, bool, float]:
    """Rebuild a dual-feasible point from ``cert`` and return (K, ok, slack_max_eig).

    The certificate's multipliers are taken as given; Z is corrected within
    each variable's cell pattern so that stationarity holds exactly, then its
    smallest eigenvalue is computed.  Any negativity (plus an eigenvalue
    rounding allowance) is charged against the trace bound of quantum moment
    matrices, so K stays a valid bound whenever the multipliers are finite.
    """
    P = problem
    Z = _herm(np.array(cert.Z, dtype=P.dtype))
    w = np.maximum(np.asarray(cert.lp, dtype=float), 0.0)
    G = np.asarray(P.ineq_G, dtype=float)
    lam = np.zeros(P.nvars)
    stat_keys = {v: key for key, v in P.stat_vars.items()}
    for v in P.fixed:
        lam[v] = cert.nu[stat_keys[v]] if v in stat_keys else cert.multipliers[v]
    target = lam - P.objective + (G.T @ w if len(w) else 0.0)
    resid = target - P.adjoint(Z)
    norms = np.bincount(P.var, weights=np.abs(P.coef) ** 2, minlength=P.nvars)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(norms > 0, resid / norms, 0.0)
    corr = np.zeros_like(Z)
    # F_v is Hermitian with entries coef at (row, col); <F_v, F_v> = norms[v]
    np.add.at(corr, (P.rows, P.cols), np.conj(P.coef) * delta[P.var])
    Z = _herm(Z + corr)
    unreachable = np.abs(resid[norms == 0]).max(initial=0.0)
    lam_min = float(np.linalg.eigvalsh(Z).min())
    eig_err = 10 * P.dim * np.finfo(float).eps * max(1.0, np.linalg.norm(Z, 2))
    trace_bound = P.trace_bound if P.trace_bound is not None else float(P.dim)
    penalty = max(0.0, eig_err - lam_min) * trace_bound
    terms = [P.offset, penalty]
    if P.const is not None:
        terms.append(float(np.real(np.vdot(P.const, Z))))
    if len(w):
        terms.append(float(np.asarray(P.ineq_h, dtype=float) @ w))
    terms += [lam[v] * P.fixed[v] for v in P.fixed if v not in stat_keys]
    K = math.fsum(terms)
    ok = bool(np.isfinite(K) and -lam_min <= margin and unreachable == 0.0)
    return K, ok, -lam_min


def verify_certificate(problem: ConicProblem, cert: DualCertificate, margin: float = 1e-8) -> tuple[float, bool]:
    """Independently recheck ``cert``; returns (certified bound, verified)."""
    K, ok, _ = certified_constant(problem, cert, margin)
    stat_keys = {v: key for key, v in problem.stat_vars.items()}
    bound = math.fsum([K] + [cert.nu[stat_keys[v]] * problem.fixed[v] for v in stat_keys])
    return bound, ok
