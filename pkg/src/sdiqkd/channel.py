"""Lossy, noisy channel with dark counts, and Monte Carlo round simulation.

A round's polarization noise is a Jones-space rotation: the prepared vector
phi_x becomes cos(delta) phi_x + sin(delta) e^{i phi} phi_x^perp with
delta ~ N(0, sigma^2) and phi ~ U[0, 2 pi).  Systematic errors tilt the polar
angle of both the prepared states and Bob's analyzers by ``delta_theta`` and
rotate Bob's analyzer azimuth by ``delta_xy``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .protocol import ProtocolSpec, StatTable, orthogonal, polarization

MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class ChannelModel:
    eta: float = 1.0
    p_dc: float = 0.0
    sigma: float = 0.0
    delta_theta: float = 0.0
    delta_xy: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 <= self.p_dc < 1.0:
            raise ValueError(f"p_dc must lie in [0, 1), got {self.p_dc}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def scaled(self, efficiency_scale: float) -> ChannelModel:
        """Same channel with the transmission multiplied by ``efficiency_scale``."""
        return ChannelModel(self.eta * efficiency_scale, self.p_dc, self.sigma, self.delta_theta, self.delta_xy)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    r0: int
    r1: int
    k: int
    y: int
    b: int

    @property
    def x(self) -> int:
        return self.r1 if self.k else self.r0

    @property
    def conclusive(self) -> bool:
        return self.b == 0 and self.y in (self.r0, self.r1)


ROUND_HEADER = ("round", "r0", "r1", "k", "y", "b")


@dataclass(frozen=True, eq=False)
class RoundLog:
    """Column store of simulated rounds; iterating yields :class:`RoundRecord`."""

    r0: np.ndarray
    r1: np.ndarray
    k: np.ndarray
    y: np.ndarray
    b: np.ndarray
    first_round: int = 0

    def __len__(self) -> int:
        return len(self.b)

    def __getitem__(self, i: int) -> RoundRecord:
        return RoundRecord(
            self.first_round + i, int(self.r0[i]), int(self.r1[i]), int(self.k[i]), int(self.y[i]), int(self.b[i])
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def x(self) -> np.ndarray:
        return np.where(self.k == 1, self.r1, self.r0)

    @property
    def conclusive(self) -> np.ndarray:
        return (self.b == 0) & ((self.y == self.r0) | (self.y == self.r1))

    def stat_table(self, n: int) -> StatTable:
        counts = np.zeros((2, n, n), dtype=np.int64)
        np.add.at(counts, (self.b, self.x, self.y), 1)
        return StatTable.from_counts(counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(ROUND_HEADER) + "\n")
        idx = np.arange(self.first_round, self.first_round + len(self))
        table = np.column_stack([idx, self.r0, self.r1, self.k, self.y, self.b])
        np.savetxt(buf, table, fmt="%d", delimiter=",")
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> RoundLog:
        reader = csv.reader(io.StringIO(text))
        header = tuple(h.strip() for h in next(reader))
        if header != ROUND_HEADER:
            raise ValueError(f"unexpected header {header}")
        data = np.array([[int(v) for v in row] for row in reader if row], dtype=np.int64).reshape(-1, 6)
        first = int(data[0, 0]) if len(data) else 0
        return cls(*(data[:, c] for c in range(1, 6)), first_round=first)


def _port_amplitude(spec: ProtocolSpec, model: ChannelModel, x, y, delta, phi):
    """Amplitude (per unit coherent amplitude) in Bob's conclusive port."""
    theta = spec.theta + model.delta_theta
    ax = np.asarray(x) * spec.phase_step
    ay = np.asarray(y) * spec.phase_step + model.delta_xy
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    # <phi_y^perp| = (-s e^{-i ay}, c) in the conjugated row convention
    vx = (c, s * np.exp(1j * ax))
    vx_perp = (-s * np.exp(-1j * ax), c)
    cd, sd = np.cos(delta), np.sin(delta) * np.exp(1j * np.asarray(phi))
    h = cd * vx[0] + sd * vx_perp[0]
    v = cd * vx[1] + sd * vx_perp[1]
    return -s * np.exp(1j * ay) * h + c * v


def detected_mean_photons(spec: ProtocolSpec, model: ChannelModel, x, y, fluct=(0.0, 0.0)):
    """eta * |beta_0|^2 for one realization ``fluct = (delta, phi)`` of the noise."""
    delta, phi = fluct
    amp = _port_amplitude(spec, model, x, y, delta, phi)
    return model.eta * spec.mu * np.abs(amp) ** 2


def detected_mean_photons_reference(spec: ProtocolSpec, model: ChannelModel, x: int, y: int, fluct=(0.0, 0.0)) -> float:
    """Same quantity from explicit Jones vectors (slow; used to cross-check)."""
    delta, phi = fluct
    theta = spec.theta + model.delta_theta
    vx = polarization(theta, x * spec.phase_step)
    sent = math.cos(delta) * vx + math.sin(delta) * np.exp(1j * phi) * orthogonal(vx)
    port = orthogonal(polarization(theta, y * spec.phase_step + model.delta_xy))
    return model.eta * spec.mu * abs(np.vdot(port, sent)) ** 2


def averaged_mean_photons(spec: ProtocolSpec, model: ChannelModel, x, y):
    """Noise-averaged detected mean photon number.

    eta * mu * [c * 2rt(1 - cos D) + (1 - c)(r^2 + t^2 + 2rt cos D)] with
    c = (1 + exp(-2 sigma^2)) / 2 the weight left in the prepared polarization,
    r = sin^2(theta/2), t = cos^2(theta/2) and D the azimuth difference.
    """
    theta = spec.theta + model.delta_theta
    r, t = math.sin(theta / 2) ** 2, math.cos(theta / 2) ** 2
    d = (np.asarray(x) - np.asarray(y)) * spec.phase_step - model.delta_xy
    c = 0.5 * (1 + math.exp(-2 * model.sigma**2))
    # 1 - cos(d) as 2 sin^2(d/2) keeps aligned cells exactly zero
    one_minus_cos = 2 * np.sin(d / 2) ** 2
    signal = 2 * r * t * one_minus_cos
    leak = r * r + t * t + 2 * r * t * (1 - one_minus_cos)
    return model.eta * spec.mu * (c * signal + (1 - c) * leak)


def click_probability(mean_photons, model: ChannelModel):
    """1 - (1 - p_dc) exp(-mean_photons): photon click OR independent dark count."""
    return -np.expm1(np.log1p(-model.p_dc) - np.asarray(mean_photons, dtype=float))


def noisy_statistics(spec: ProtocolSpec, model: ChannelModel) -> StatTable:
    """Asymptotic p(b=0|x,y) under the noise-averaged channel."""
    idx = np.arange(spec.n)
    mean = averaged_mean_photons(spec, model, idx[:, None], idx[None, :])
    return StatTable.from_probabilities(click_probability(mean, model))


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def _simulate_block(spec, model, N, rng, first_round=0) -> RoundLog:
    pairs = np.array(spec.pairs, dtype=np.int64)
    z = rng.choice(len(pairs), size=N, p=spec.p_r)
    k = rng.choice(2, size=N, p=spec.p_k)
    y = rng.choice(spec.n, size=N, p=spec.p_y)
    delta = rng.normal(0.0, model.sigma, size=N) if model.sigma > 0 else np.zeros(N)
    phi = rng.uniform(0.0, 2 * math.pi, size=N)
    r0, r1 = pairs[z, 0], pairs[z, 1]
    x = np.where(k == 1, r1, r0)
    p_click = click_probability(detected_mean_photons(spec, model, x, y, (delta, phi)), model)
    b = np.where(rng.random(N) < p_click, 0, 1).astype(np.int64)
    return RoundLog(r0, r1, k.astype(np.int64), y.astype(np.int64), b, first_round)


def simulate(spec: ProtocolSpec, model: ChannelModel, N: int, seed: int) -> tuple[RoundLog, StatTable]:
    """Sample N rounds; bit-for-bit reproducible given (spec, model, N, seed)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng(_check_seed(seed))
    log = _simulate_block(spec, model, int(N), rng)
    return log, log.stat_table(spec.n)


def blinding_scenario(spec: ProtocolSpec, model: ChannelModel, schedule, seed: int) -> list[StatTable]:
    """Consecutive blocks with the transmission scaled per block.

    ``schedule`` is a list of ``(rounds, efficiency_scale)``.  One random
    stream runs through all blocks, so a one-block schedule reproduces
    :func:`simulate` exactly.
    """
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must be nonempty")
    rng = np.random.default_rng(_check_seed(seed))
    blocks, start = [], 0
    for rounds, scale in schedule:
        if rounds < 1 or scale < 0:
            raise ValueError(f"invalid schedule entry {(rounds, scale)}")
        log = _simulate_block(spec, model.scaled(scale), int(rounds), rng, start)
        blocks.append(log.stat_table(spec.n))
        start += int(rounds)
    return blocks
