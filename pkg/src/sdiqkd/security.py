"""Key rates from certified guessing-probability bounds, asymptotic and finite-size."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import betaincinv, rel_entr

from .moments import build_problem
from .protocol import DegenerateProtocolError, GramConstraint, ProtocolSpec, StatTable, sift
from .sdp import NEAR_OPTIMAL, OPTIMAL, ConicProblem, DualCertificate, certified_constant, solve


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def asymptotic_keyrate(p_g_conditional: float, qber: float, p_succ: float) -> tuple[float, float]:
    """(max(0, R), R) with R = (-log2 p_g - H2(qber)) p_succ."""
    raw = (-math.log2(p_g_conditional) - binary_entropy(qber)) * p_succ
    return max(0.0, raw), raw


@dataclass(frozen=True)
class TailBound:
    successes: int
    trials: int
    confidence: float
    direction: str
    bound: float


def clopper_pearson(s: int, N: int, a: float, direction: str) -> TailBound:
    """One-sided Clopper-Pearson bound failing with probability at most ``a``.

    upper: the p with P(Bin(N, p) <= s) = a, i.e. I^{-1}_{1-a}(s + 1, N - s);
    lower: the p with P(Bin(N, p) >= s) = a, i.e. I^{-1}_a(s, N - s + 1).
    """
    if int(s) != s or int(N) != N or not 0 <= s <= N or N < 1:
        raise ValueError(f"need integers 0 <= s <= N, N >= 1; got s={s}, N={N}")
    if not 0.0 < a < 1.0:
        raise ValueError(f"confidence parameter must lie in (0, 1), got {a}")
    s, N = int(s), int(N)
    # the edge counts have closed forms, (1 - p)^N = a and p^N = a, which are more accurate
    if direction == "upper":
        bound = 1.0 if s == N else -math.expm1(math.log(a) / N) if s == 0 else float(betaincinv(s + 1, N - s, 1 - a))
    elif direction == "lower":
        bound = 0.0 if s == 0 else math.exp(math.log(a) / N) if s == N else float(betaincinv(s, N - s + 1, a))
    else:
        raise ValueError(f"direction must be 'upper' or 'lower', got {direction!r}")
    if not math.isfinite(bound):
        # the inverse beta loses convergence around N ~ 1e13
        bound = _chernoff_bound(s, N, a, direction)
    return TailBound(s, N, a, direction, bound)


def _chernoff_bound(s: int, N: int, a: float, direction: str) -> float:
    """Root of N * KL(s/N || p) = ln(1/a) on the requested side of s/N.

    The Chernoff tail bound exp(-N KL) dominates the exact binomial tail, so
    this is looser than Clopper-Pearson but still valid.
    """
    q, target = s / N, -math.log(a)
    hi, lo = math.nextafter(1.0, 0.0), math.nextafter(0.0, 1.0)

    def excess(p):
        return N * (rel_entr(q, p) + rel_entr(1 - q, 1 - p)) - target

    if direction == "upper":
        return 1.0 if excess(hi) <= 0 else float(brentq(excess, q, hi, xtol=1e-300, rtol=1e-15))
    return 0.0 if excess(lo) <= 0 else float(brentq(excess, lo, q, xtol=1e-300, rtol=1e-15))


def _require_counts(counts: StatTable, spec: ProtocolSpec) -> None:
    if not counts.is_counts:
        raise ValueError("finite-size bounds need a count-mode table")
    if counts.n != spec.n:
        raise ValueError("statistics and protocol disagree on n")


def finite_size_pg_bound(
    problem: ConicProblem,
    cert: DualCertificate,
    counts: StatTable,
    spec: ProtocolSpec,
    a1: float,
    margin: float = 1e-8,
) -> float:
    """Upper bound on the joint guessing probability holding with prob. >= 1 - a1.

    The certificate reads p_g <= K + sum nu[x,y] p(0|x,y) = K + sum g[x,y] q[x,y]
    with q the per-round probability of (b=0, x, y) and g = nu / (p(x) p(y)).
    Every q is replaced by its Clopper-Pearson bound on the side that can only
    raise the total.  Since nu was fitted to the same data, each cell gets a
    two-sided budget a1/m (m = cells with nonzero nu), so the bound holds for
    whatever signs the multipliers take.
    """
    _require_counts(counts, spec)
    if cert.assumed_zero or problem.assumed_zero:
        raise ValueError("certificate assumes exactly-zero statistics; it cannot be used for finite-size bounds")
    K, ok, _ = certified_constant(problem, cert, margin)
    if not ok:
        raise ValueError("certificate failed verification; refusing to use it")
    px, py = spec.p_x(), np.asarray(spec.p_y)
    active = {key: v for key, v in cert.nu.items() if v != 0.0}
    if not active:
        return K
    N = counts.N
    a_cell = a1 / (2 * len(active))
    terms = [K]
    for (x, y), v in sorted(active.items()):
        g = v / (px[x] * py[y])
        tb = clopper_pearson(int(counts.counts[0, x, y]), N, a_cell, "upper" if g > 0 else "lower")
        terms.append(g * tb.bound)
    return math.fsum(terms)


def _psucc_cells(spec: ProtocolSpec):
    succ_w, _ = spec.sifting_weights()
    px, py = spec.p_x(), np.asarray(spec.p_y)
    return [((x, y), succ_w[x, y] / (px[x] * py[y])) for x, y in np.argwhere(succ_w > 0)]


def finite_size_psucc_bound(counts: StatTable, spec: ProtocolSpec, a2: float) -> float:
    """Lower bound on p(succ) holding with prob. >= 1 - a2 (union bound over cells)."""
    _require_counts(counts, spec)
    cells = _psucc_cells(spec)
    if sum(int(counts.counts[0, x, y]) for (x, y), _ in cells) == 0:
        return 0.0
    N = counts.N
    a_cell = a2 / len(cells)
    return math.fsum(g * clopper_pearson(int(counts.counts[0, x, y]), N, a_cell, "lower").bound for (x, y), g in cells)


def finite_size_error_bound(counts: StatTable, spec: ProtocolSpec, a: float) -> float:
    """Upper bound on P(conclusive and k' != k).

    An error occurs exactly when b = 0 and y = x; that is a single per-round
    event with weight 1 under any input distribution, so one Clopper-Pearson
    bound on the pooled count suffices.
    """
    _require_counts(counts, spec)
    s = int(np.trace(counts.counts[0]))
    return clopper_pearson(s, counts.N, a, "upper").bound


@dataclass(frozen=True, eq=False)
class KeyRateReport:
    """Certified key-rate summary.

    In asymptotic mode (N == 0) the finite-size fields repeat the asymptotic ones.
    """

    p_g_joint: float
    p_succ: float
    p_g_conditional: float
    qber: float
    h_min: float
    R: float
    R_raw: float
    R_asymptotic: float
    level: str
    status: str
    N: int = 0
    a1: float = 0.0
    a2: float = 0.0
    p_g_joint_asymptotic: float = math.nan
    p_succ_asymptotic: float = math.nan
    qber_asymptotic: float = math.nan
    verified: bool = False
    degenerate: bool = False
    certificate: DualCertificate | None = None
    params: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return self.a1 + self.a2

    @property
    def finite(self) -> bool:
        return self.N > 0

    SUMMARY_FIELDS = (
        "N", "level", "status", "verified", "p_g_joint", "p_succ", "p_g_conditional",
        "qber", "h_min", "R", "R_asymptotic", "a1", "a2",
    )  # fmt: skip

    def csv_header(self) -> str:
        return ",".join(self.SUMMARY_FIELDS)

    def csv_row(self) -> str:
        vals = []
        for name in self.SUMMARY_FIELDS:
            v = getattr(self, name)
            vals.append(repr(float(v)) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v))
        return ",".join(vals)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("[report]\n")
        buf.write(f"mode = {'finite-size' if self.finite else 'asymptotic'}\n")
        for name in (
            "status", "verified", "degenerate", "level", "N", "a1", "a2", "alpha",
            "p_g_joint", "p_succ", "p_g_conditional", "qber", "h_min", "R", "R_raw", "R_asymptotic",
            "p_g_joint_asymptotic", "p_succ_asymptotic", "qber_asymptotic",
        ):  # fmt: skip
            v = getattr(self, name)
            buf.write(f"{name} = {v!r}\n" if isinstance(v, float) else f"{name} = {v}\n")
        if self.certificate is not None:
            buf.write("[certificate]\n")
            buf.write(self.certificate.to_text())
        if self.params:
            buf.write("[config]\n")
            for k in sorted(self.params):
                buf.write(f"{k} = {self.params[k]}\n")
        return buf.getvalue()


def _conditional(p_g_joint: float, p_succ: float) -> float:
    return min(1.0, max(0.5, p_g_joint / p_succ))


def asymptotic_report(
    spec: ProtocolSpec,
    gram: GramConstraint,
    stats: StatTable,
    level: str = "S1+AB",
    tol: float = 1e-8,
    params: dict | None = None,
) -> KeyRateReport:
    """Solve the relaxation at the given probabilities and apply the key-rate formula."""
    try:
        p_succ, qber = sift(spec, stats)
    except DegenerateProtocolError:
        return KeyRateReport(
            math.nan, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0, level, "degenerate", degenerate=True, params=params or {}
        )
    problem = build_problem(spec, gram, stats, level).to_conic()
    sol = solve(problem, tol=tol)
    if sol.certificate is None:
        raise RuntimeError(f"SDP solve failed: {sol.status} ({sol.message})")
    K, ok, _ = certified_constant(problem, sol.certificate)
    # an unconverged solve is still usable when its dual point verifies: the bound is sound, only looser
    if sol.status not in (OPTIMAL, NEAR_OPTIMAL) and not ok:
        raise RuntimeError(f"SDP solve failed: {sol.status} ({sol.message})")
    stat_keys = {v: key for key, v in problem.stat_vars.items()}
    pg = math.fsum([K] + [sol.certificate.nu[stat_keys[v]] * problem.fixed[v] for v in stat_keys])
    pg_cond = _conditional(pg, p_succ)
    R, raw = asymptotic_keyrate(pg_cond, qber, p_succ)
    return KeyRateReport(
        pg, p_succ, pg_cond, qber, -math.log2(pg_cond), R, raw, R, level, sol.status,
        p_g_joint_asymptotic=pg, p_succ_asymptotic=p_succ, qber_asymptotic=qber,
        verified=ok, certificate=sol.certificate, params=params or {},
    )  # fmt: skip


def _evaluation_point(freq: np.ndarray) -> list[np.ndarray]:
    """Points at which to fit the certificate, nearest to the data first.

    Any dual-feasible certificate is valid for all statistics, so the fit
    point only affects tightness.  Clipping away exact 0/1 keeps an interior;
    mixing toward 1/2 recovers from sampling noise that leaves the quantum set.
    """
    base = np.clip(freq, 1e-7, 1 - 1e-7)
    return [base] + [(1 - lam) * base + lam * 0.5 for lam in (1e-3, 1e-2, 0.1)]


def fit_certificate(spec, gram, counts: StatTable, level: str = "S1+AB", tol: float = 1e-8):
    """Certificate fitted to the observed frequencies (no zero-cell assumptions)."""
    last = None
    for p0 in _evaluation_point(counts.conditional()):
        mp = build_problem(spec, gram, StatTable.from_probabilities(p0), level, facial_reduction=False)
        problem = mp.to_conic()
        sol = solve(problem, tol=tol)
        last = sol
        if sol.status in (OPTIMAL, NEAR_OPTIMAL) and certified_constant(problem, sol.certificate)[1]:
            return problem, sol
    raise RuntimeError(f"could not fit a certificate to the observed statistics: {last.status} ({last.message})")


def finite_size_report(
    problem: ConicProblem,
    cert: DualCertificate,
    counts: StatTable,
    spec: ProtocolSpec,
    a1: float,
    a2: float,
    level: str = "S1+AB",
    status: str = OPTIMAL,
    params: dict | None = None,
) -> KeyRateReport:
    """Finite-size rate with confidence 1 - (a1 + a2).

    a2 is split uniformly over the p(succ) cells plus one event for the error
    rate.  A probability-mode table yields the asymptotic report.
    """
    if not counts.is_counts:
        K, ok, _ = certified_constant(problem, cert)
        pg = _bound_with(cert, K, counts.conditional())
        p_succ, qber = sift(spec, counts)
        pg_cond = _conditional(pg, p_succ)
        R, raw = asymptotic_keyrate(pg_cond, qber, p_succ)
        return KeyRateReport(
            pg, p_succ, pg_cond, qber, -math.log2(pg_cond), R, raw, R, level, status,
            p_g_joint_asymptotic=pg, p_succ_asymptotic=p_succ, qber_asymptotic=qber,
            verified=ok, certificate=cert, params=params or {},
        )  # fmt: skip
    _require_counts(counts, spec)
    freq = counts.conditional()
    K, ok, _ = certified_constant(problem, cert)
    pg_asym = _bound_with(cert, K, freq)
    try:
        ps_asym, q_asym = sift(spec, StatTable.from_probabilities(freq))
        _, raw_asym = asymptotic_keyrate(_conditional(pg_asym, ps_asym), q_asym, ps_asym)
        R_asym = max(0.0, raw_asym)
    except DegenerateProtocolError:
        ps_asym, q_asym, R_asym = 0.0, 0.5, 0.0

    pg = finite_size_pg_bound(problem, cert, counts, spec, a1)
    m = len(_psucc_cells(spec))
    p_star = finite_size_psucc_bound(counts, spec, a2 * m / (m + 1))
    common = dict(
        N=counts.N, a1=a1, a2=a2, p_g_joint_asymptotic=pg_asym, p_succ_asymptotic=ps_asym,
        qber_asymptotic=q_asym, verified=ok, certificate=cert, params=params or {},
    )  # fmt: skip
    if p_star <= 0:
        return KeyRateReport(pg, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0, R_asym, level, status, degenerate=True, **common)
    err = finite_size_error_bound(counts, spec, a2 / (m + 1))
    qber = min(0.5, err / p_star)
    pg_cond = _conditional(pg, p_star)
    R, raw = asymptotic_keyrate(pg_cond, qber, p_star)
    return KeyRateReport(pg, p_star, pg_cond, qber, -math.log2(pg_cond), R, raw, R_asym, level, status, **common)


def _bound_with(cert: DualCertificate, K: float, p0: np.ndarray) -> float:
    return math.fsum([K] + [v * p0[key] for key, v in cert.nu.items()])


def certify_counts(
    spec: ProtocolSpec,
    counts: StatTable,
    level: str = "S1+AB",
    epsilon: float = 0.0,
    a1: float = 1e-9,
    a2: float = 1e-9,
    tol: float = 1e-8,
    params: dict | None = None,
) -> KeyRateReport:
    """End-to-end finite-size certification of a block of counts."""
    gram = GramConstraint.from_spec(spec, epsilon)
    problem, sol = fit_certificate(spec, gram, counts, level, tol)
    return finite_size_report(problem, sol.certificate, counts, spec, a1, a2, level, sol.status, params)
