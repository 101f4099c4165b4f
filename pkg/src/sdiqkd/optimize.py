"""Key-rate evaluation over channel and source parameters: mu optimization,
eta sweeps and the transmission threshold."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .channel import ChannelModel, noisy_statistics
from .protocol import GramConstraint, ProtocolSpec
from .security import KeyRateReport, asymptotic_report

R_POSITIVE = 1e-6
DEFAULT_MU_GRID = tuple(np.geomspace(0.05, 200.0, 25))


def keyrate_at(
    spec: ProtocolSpec,
    channel: ChannelModel,
    level: str = "S1+AB",
    epsilon: float = 0.0,
    tol: float = 1e-8,
) -> KeyRateReport:
    """Asymptotic certified report for the noise-averaged channel statistics."""
    stats = noisy_statistics(spec, channel)
    params = {
        "protocol.n": spec.n, "protocol.theta": spec.theta, "protocol.mu": spec.mu,
        "protocol.phase_step": spec.phase_step, "channel.eta": channel.eta, "channel.p_dc": channel.p_dc,
        "channel.sigma": channel.sigma, "channel.delta_theta": channel.delta_theta,
        "channel.delta_xy": channel.delta_xy, "analysis.epsilon": epsilon, "analysis.tol": tol,
    }  # fmt: skip
    return asymptotic_report(spec, GramConstraint.from_spec(spec, epsilon), stats, level, tol, params)


@dataclass(frozen=True)
class MuOptimum:
    eta: float
    mu: float | None
    R: float
    status: str
    grid: tuple = ()

    @property
    def positive(self) -> bool:
        return self.R > R_POSITIVE


def _rate(spec, channel, mu, level, epsilon, tol) -> tuple[float, str]:
    try:
        rep = keyrate_at(spec.with_mu(mu), channel, level, epsilon, tol)
    except RuntimeError:
        # no certified bound at this mu: claiming zero key is always safe
        return 0.0, "numerical-failure"
    return float(rep.R), rep.status


def optimize_mu(
    spec: ProtocolSpec,
    channel: ChannelModel,
    mu_grid=DEFAULT_MU_GRID,
    level: str = "S1+AB",
    epsilon: float = 0.0,
    tol: float = 1e-8,
    xtol: float = 1e-3,
    mu_of_eta=None,
) -> MuOptimum:
    """Grid search over mu, then golden-section refinement in log(mu) on the
    bracket around the best grid point.

    ``mu_of_eta`` pins mu as a function of the transmission instead (no search).
    """
    if mu_of_eta is not None:
        mu = float(mu_of_eta(channel.eta))
        R, status = _rate(spec, channel, mu, level, epsilon, tol)
        return MuOptimum(channel.eta, mu if R > R_POSITIVE else None, R, status, ((mu, R),))
    grid = sorted(float(m) for m in mu_grid)
    if not grid or grid[0] <= 0:
        raise ValueError("mu grid must be nonempty and positive")
    rows = [(mu, *_rate(spec, channel, mu, level, epsilon, tol)) for mu in grid]
    values = [r for _, r, _ in rows]
    i = int(np.argmax(values))
    best_mu, best_R, best_status = rows[i]
    table = tuple((mu, r) for mu, r, _ in rows)
    if best_R <= R_POSITIVE:
        return MuOptimum(channel.eta, None, max(0.0, best_R), best_status, table)
    if 0 < i < len(grid) - 1 and values[i - 1] < best_R and values[i + 1] < best_R:
        cache = {}

        def neg_rate(t):
            if t not in cache:
                cache[t] = _rate(spec, channel, math.exp(t), level, epsilon, tol)
            return -cache[t][0]

        lo, mid, hi = (math.log(grid[j]) for j in (i - 1, i, i + 1))
        res = minimize_scalar(neg_rate, bracket=(lo, mid, hi), method="golden", options={"xtol": xtol})
        if -res.fun > best_R:
            best_mu, best_R, best_status = math.exp(res.x), float(-res.fun), cache[res.x][1]
    return MuOptimum(channel.eta, best_mu, best_R, best_status, table)


def _with_eta(channel: ChannelModel, eta: float) -> ChannelModel:
    return ChannelModel(eta, channel.p_dc, channel.sigma, channel.delta_theta, channel.delta_xy)


@dataclass(frozen=True)
class SweepRow:
    eta: float
    mu: float | None
    R: float
    level: str
    status: str

    def csv(self) -> str:
        mu = "" if self.mu is None else repr(self.mu)
        return f"{self.eta!r},{mu},{self.R!r},{self.level},{self.status}"


SWEEP_HEADER = "eta,mu,R,level,status"


def sweep(
    spec: ProtocolSpec,
    channel: ChannelModel,
    etas,
    mu_grid=DEFAULT_MU_GRID,
    level: str = "S1+AB",
    epsilon: float = 0.0,
    tol: float = 1e-8,
    mu_of_eta=None,
) -> list[SweepRow]:
    """Optimized key rate for each transmission in ``etas`` (in the given order)."""
    rows = []
    for eta in etas:
        opt = optimize_mu(spec, _with_eta(channel, float(eta)), mu_grid, level, epsilon, tol, mu_of_eta=mu_of_eta)
        rows.append(SweepRow(float(eta), opt.mu, opt.R, level, opt.status))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_HEADER + "\n")
    for r in rows:
        buf.write(r.csv() + "\n")
    return buf.getvalue()


def is_nondecreasing(rows, slack: float = 1e-7) -> bool:
    """R(eta) never drops by more than ``slack`` as eta grows."""
    ordered = sorted(rows, key=lambda r: r.eta)
    return all(b.R >= a.R - slack for a, b in zip(ordered, ordered[1:]))


def positive_islands(values, threshold: float = R_POSITIVE) -> int:
    """Number of maximal runs of consecutive entries above ``threshold``."""
    runs, inside = 0, False
    for v in values:
        if v > threshold and not inside:
            runs += 1
        inside = v > threshold
    return runs


def threshold_eta(
    spec: ProtocolSpec,
    channel: ChannelModel,
    level: str = "S1+AB",
    mu_grid=DEFAULT_MU_GRID,
    lo: float = 0.0,
    hi: float = 1.0,
    tol: float = 1e-3,
    epsilon: float = 0.0,
    sdp_tol: float = 1e-8,
    mu_of_eta=None,
) -> float | None:
    """Smallest eta (to ``tol``) with optimized R > 1e-6, by bisection.

    Returns None when R is not positive at ``hi``.  Assumes R(eta) is
    nondecreasing on [lo, hi].
    """

    def positive(eta):
        return optimize_mu(
            spec, _with_eta(channel, eta), mu_grid, level, epsilon, sdp_tol, mu_of_eta=mu_of_eta
        ).positive

    if not positive(hi):
        return None
    if lo > 0 and positive(lo):
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            hi = mid
        else:
            lo = mid
    return hi
