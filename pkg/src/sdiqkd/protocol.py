"""n-state coherent polarization protocol: states, overlaps, statistics, sifting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np


class DegenerateProtocolError(ValueError):
    """Raised when no round can ever be conclusive (p_succ = 0)."""


def _uniform(k: int) -> tuple[float, ...]:
    return tuple([1.0 / k] * k)


def _check_distribution(name: str, p, size: int) -> tuple[float, ...]:
    p = tuple(float(v) for v in p)
    if len(p) != size:
        raise ValueError(f"{name} must have {size} entries, got {len(p)}")
    if any(v < 0 for v in p) or not math.isclose(sum(p), 1.0, abs_tol=1e-12):
        raise ValueError(f"{name} must be a probability distribution: {p}")
    return p


def encoding_pairs(n: int) -> list[tuple[int, int]]:
    """All pairs r = (r0, r1) with 0 <= r0 < r1 <= n-1, in lexicographic order."""
    return list(combinations(range(n), 2))


@dataclass(frozen=True)
class ProtocolSpec:
    """Alice's n polarized coherent states and the parties' input distributions.

    State x has Jones vector cos(theta/2)|H> + sin(theta/2) e^{i x phase_step}|V>
    and mean photon number ``mu``.  ``p_k``, ``p_y`` and ``p_r`` default to
    uniform over key bits, Bob's settings and encoding pairs.
    """

    n: int
    theta: float
    mu: float
    phase_step: float | None = None
    p_k: tuple[float, ...] | None = None
    p_y: tuple[float, ...] | None = None
    p_r: tuple[float, ...] | None = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n}")
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        n = int(self.n)
        object.__setattr__(self, "n", n)
        if self.phase_step is None:
            object.__setattr__(self, "phase_step", 2 * math.pi / n)
        npairs = n * (n - 1) // 2
        object.__setattr__(self, "p_k", _check_distribution("p_k", self.p_k or _uniform(2), 2))
        object.__setattr__(self, "p_y", _check_distribution("p_y", self.p_y or _uniform(n), n))
        object.__setattr__(self, "p_r", _check_distribution("p_r", self.p_r or _uniform(npairs), npairs))

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return encoding_pairs(self.n)

    def with_mu(self, mu: float) -> ProtocolSpec:
        return ProtocolSpec(self.n, self.theta, mu, self.phase_step, self.p_k, self.p_y, self.p_r)

    def p_x(self) -> np.ndarray:
        """Marginal probability that Alice prepares state x (x = r_k)."""
        px = np.zeros(self.n)
        for pr, r in zip(self.p_r, self.pairs):
            for k in (0, 1):
                px[r[k]] += pr * self.p_k[k]
        return px

    def sifting_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Weights ``(succ, err)`` with p_succ = sum(succ * p0) and
        P(conclusive, k' != k) = sum(err * p0), where p0[x, y] = p(b=0|x,y).

        Bob's bit on a conclusive round with pair r and setting y is 1 if
        y == r0 and 0 if y == r1, so the round is an error exactly when y == x.
        """
        succ = np.zeros((self.n, self.n))
        err = np.zeros((self.n, self.n))
        for pr, r in zip(self.p_r, self.pairs):
            for k in (0, 1):
                x = r[k]
                for y in r:
                    w = pr * self.p_k[k] * self.p_y[y]
                    succ[x, y] += w
                    if y == x:
                        err[x, y] += w
        return succ, err


def polarization(theta: float, azimuth: float) -> np.ndarray:
    """Jones vector cos(theta/2)|H> + sin(theta/2) e^{i azimuth}|V>."""
    return np.array([math.cos(theta / 2), math.sin(theta / 2) * np.exp(1j * azimuth)])


def orthogonal(v: np.ndarray) -> np.ndarray:
    """Unit Jones vector orthogonal to ``v``."""
    return np.array([-np.conj(v[1]), np.conj(v[0])])


def gram_matrix(spec: ProtocolSpec) -> np.ndarray:
    """Overlaps gamma_ij = <psi_i|psi_j> of the n coherent states."""
    idx = np.arange(spec.n)
    diff = idx[None, :] - idx[:, None]
    s2 = math.sin(spec.theta / 2) ** 2
    return np.exp(-spec.mu * s2 * (1 - np.exp(1j * spec.phase_step * diff)))


def conclusive_overlap(spec: ProtocolSpec) -> np.ndarray:
    """|<phi_y^perp|phi_x>|^2 = sin^2(theta) sin^2((x - y) phase_step / 2).

    The closed form keeps the diagonal exactly zero.
    """
    k = np.arange(spec.n)
    delta = (k[:, None] - k[None, :]) * spec.phase_step
    return np.sin(spec.theta) ** 2 * np.sin(delta / 2) ** 2


def ideal_statistics(spec: ProtocolSpec, eta: float = 1.0) -> StatTable:
    """Loss-only statistics p(b=0|x,y) = 1 - exp(-eta mu |<phi_y^perp|phi_x>|^2)."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    p0 = -np.expm1(-eta * spec.mu * conclusive_overlap(spec))
    return StatTable.from_probabilities(p0)


@dataclass(frozen=True)
class GramConstraint:
    """Target overlaps plus the tolerance defining the overlap assumption.

    In ``box`` mode the real and imaginary parts of every off-diagonal overlap
    may deviate from ``gamma`` by at most ``epsilon``.
    """

    gamma: np.ndarray
    epsilon: float = 0.0
    mode: str = "exact"

    def __post_init__(self):
        g = np.array(self.gamma, dtype=complex)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("gamma must be a square matrix")
        if not np.allclose(g, g.conj().T, atol=1e-12):
            raise ValueError("gamma must be Hermitian")
        if not np.allclose(np.diag(g), 1.0, atol=1e-12):
            raise ValueError("gamma must have unit diagonal")
        if np.linalg.eigvalsh(g).min() < -1e-10:
            raise ValueError("gamma is not positive semidefinite")
        if self.mode not in ("exact", "box"):
            raise ValueError(f"unknown Gram mode {self.mode!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.mode == "exact" and self.epsilon != 0:
            raise ValueError("epsilon must be 0 in exact mode")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def from_spec(cls, spec: ProtocolSpec, epsilon: float = 0.0) -> GramConstraint:
        mode = "box" if epsilon > 0 else "exact"
        return cls(gram_matrix(spec), epsilon, mode)

    @property
    def n(self) -> int:
        return self.gamma.shape[0]

    @property
    def is_real(self) -> bool:
        return bool(np.all(np.abs(self.gamma.imag) < 1e-15))


@dataclass(frozen=True, eq=False)
class StatTable:
    """Bob's statistics indexed by (b, x, y).

    Count mode keeps raw integers ``counts[b, x, y]`` (total rounds ``N``);
    probability mode keeps ``p0[x, y] = p(b=0|x,y)`` and has ``N == 0``.
    """

    n: int
    counts: np.ndarray | None = None
    p0: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if (self.counts is None) == (self.p0 is None):
            raise ValueError("exactly one of counts or p0 must be given")
        if self.counts is not None:
            c = np.array(self.counts, dtype=np.int64)
            if c.shape != (2, self.n, self.n) or (c < 0).any():
                raise ValueError("counts must be a nonnegative (2, n, n) integer array")
            c.setflags(write=False)
            object.__setattr__(self, "counts", c)
        else:
            p = np.array(self.p0, dtype=float)
            if p.shape != (self.n, self.n):
                raise ValueError("p0 must be an (n, n) array")
            if (p < 0).any() or (p > 1).any():
                raise ValueError("probabilities must lie in [0, 1]")
            p.setflags(write=False)
            object.__setattr__(self, "p0", p)

    @classmethod
    def from_probabilities(cls, p0) -> StatTable:
        p0 = np.asarray(p0, dtype=float)
        return cls(p0.shape[0], p0=p0)

    @classmethod
    def from_counts(cls, counts) -> StatTable:
        counts = np.asarray(counts)
        return cls(counts.shape[1], counts=counts)

    @property
    def is_counts(self) -> bool:
        return self.counts is not None

    @property
    def N(self) -> int:
        return int(self.counts.sum()) if self.is_counts else 0

    def cell_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def conditional(self) -> np.ndarray:
        """p(b=0|x,y); in count mode the observed conditional frequencies."""
        if not self.is_counts:
            return np.array(self.p0)
        tot = self.cell_totals()
        if (tot == 0).any():
            missing = [tuple(int(v) for v in c) for c in np.argwhere(tot == 0)]
            raise ValueError(f"no rounds recorded for (x, y) cells {missing}")
        return self.counts[0] / tot

    def __add__(self, other: StatTable) -> StatTable:
        if not (self.is_counts and other.is_counts) or self.n != other.n:
            raise ValueError("only count tables of equal n can be merged")
        return StatTable.from_counts(self.counts + other.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.is_counts:
            w.writerow(["b", "x", "y", "count"])
            for b in (0, 1):
                for x in range(self.n):
                    for y in range(self.n):
                        w.writerow([b, x, y, int(self.counts[b, x, y])])
        else:
            w.writerow(["b", "x", "y", "prob"])
            for b in (0, 1):
                for x in range(self.n):
                    for y in range(self.n):
                        p = self.p0[x, y] if b == 0 else 1.0 - self.p0[x, y]
                        w.writerow([b, x, y, repr(float(p))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> StatTable:
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty statistics file")
        header = [h.strip() for h in rows[0]]
        if header not in (["b", "x", "y", "count"], ["b", "x", "y", "prob"]):
            raise ValueError(f"unexpected header {header}")
        body = [r for r in rows[1:] if r]
        idx = [(int(r[0]), int(r[1]), int(r[2])) for r in body]
        n = max(max(i[1], i[2]) for i in idx) + 1
        if header[3] == "count":
            counts = np.zeros((2, n, n), dtype=np.int64)
            for (b, x, y), r in zip(idx, body):
                counts[b, x, y] = int(r[3])
            return cls(n, counts=counts)
        p0 = np.full((n, n), np.nan)
        for (b, x, y), r in zip(idx, body):
            if b == 0:
                p0[x, y] = float(r[3])
        if np.isnan(p0).any():
            raise ValueError("probability file is missing b=0 rows")
        return cls(n, p0=p0)

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> StatTable:
        return cls.from_csv(Path(path).read_text())


def sift(spec: ProtocolSpec, stats: StatTable) -> tuple[float, float]:
    """Probability of a conclusive round and the QBER of the sifted key."""
    if stats.n != spec.n:
        raise ValueError("statistics and protocol disagree on n")
    succ_w, err_w = spec.sifting_weights()
    p0 = stats.conditional()
    p_succ = float(np.sum(succ_w * p0))
    if p_succ <= 0:
        raise DegenerateProtocolError("p_succ = 0: no conclusive rounds, QBER undefined")
    return p_succ, float(np.sum(err_w * p0)) / p_succ
