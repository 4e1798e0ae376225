"""Link-level radio abstraction: geometry and transmitter settings to KPIs.

Everything here is a pure function of its arguments (and an explicit
``numpy.random.Generator`` where randomness is involved), and accepts numpy
arrays wherever a scalar makes sense so the simulator can evaluate all links
of a TTI in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

N_MCS = 12
REPETITIONS = (1, 2, 3, 4, 6, 8, 16, 32)
N_REP = len(REPETITIONS)
MAX_HARQ_RETX = 5
N_HARQ = MAX_HARQ_RETX + 1
N_ACTIONS = N_MCS * N_REP * N_HARQ

KMH = 1000.0 / 3600.0
DEFAULT_SPEED = 3.0 * KMH


@dataclass(frozen=True)
class TxConfig:
    mcs: int = 0
    repetition: int = 1
    harq_max_retx: int = MAX_HARQ_RETX

    def __post_init__(self):
        if not 0 <= self.mcs < N_MCS:
            raise ValueError(f"mcs must be in [0, {N_MCS - 1}], got {self.mcs}")
        if self.repetition not in REPETITIONS:
            raise ValueError(f"repetition must be one of {REPETITIONS}, got {self.repetition}")
        if not 0 <= self.harq_max_retx <= MAX_HARQ_RETX:
            raise ValueError(f"harq_max_retx must be in [0, {MAX_HARQ_RETX}], got {self.harq_max_retx}")

    @property
    def indices(self) -> tuple[int, int, int]:
        """(mcs, repetition index, harq) as used by the per-dimension tables."""
        return self.mcs, REPETITIONS.index(self.repetition), self.harq_max_retx

    @classmethod
    def from_indices(cls, mcs: int, rep_idx: int, harq: int) -> "TxConfig":
        return cls(int(mcs), REPETITIONS[int(rep_idx)], int(harq))

    @property
    def flat_index(self) -> int:
        m, r, h = self.indices
        return (m * N_REP + r) * N_HARQ + h

    @classmethod
    def from_flat(cls, index: int) -> "TxConfig":
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"joint action index out of range: {index}")
        m, rest = divmod(int(index), N_REP * N_HARQ)
        r, h = divmod(rest, N_HARQ)
        return cls.from_indices(m, r, h)


def all_tx_configs() -> list[TxConfig]:
    return [TxConfig.from_flat(i) for i in range(N_ACTIONS)]


@dataclass(frozen=True)
class LinkKpi:
    snr_db: float
    bler: float
    latency_ms: float
    throughput_kbps: float

    def __post_init__(self):
        vals = (self.snr_db, self.bler, self.latency_ms, self.throughput_kbps)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite KPI: {vals}")
        if not 0.0 <= self.bler <= 1.0:
            raise ValueError(f"bler must be in [0, 1], got {self.bler}")
        if self.latency_ms < 0 or self.throughput_kbps < 0:
            raise ValueError("latency and throughput must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.snr_db, self.bler, self.latency_ms, self.throughput_kbps])


def default_thresholds() -> tuple[float, ...]:
    return tuple(-5.0 + 2.0 * m for m in range(N_MCS))


def default_rate_table() -> tuple[float, ...]:
    """Per-PRB rate in kbps for each MCS."""
    return tuple(25.0 * (m + 1) for m in range(N_MCS))


@dataclass(frozen=True)
class BlerModel:
    slope: float = 1.0
    thresholds: tuple[float, ...] = field(default_factory=default_thresholds)
    shadowing_sigma: float = 3.0
    shadowing_rho: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if len(self.thresholds) != N_MCS:
            raise ValueError(f"need {N_MCS} thresholds, got {len(self.thresholds)}")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing in MCS index")
        if not self.slope > 0:
            raise ValueError("slope must be positive")
        if self.shadowing_sigma < 0:
            raise ValueError("shadowing_sigma must be non-negative")
        if not 0.0 <= self.shadowing_rho < 1.0:
            raise ValueError("shadowing_rho must be in [0, 1)")


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0
    speed: float = DEFAULT_SPEED

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")


def path_loss_db(distance):
    """Log-distance path loss with exponent 3, clamped at 1 m."""
    d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    out = 40.0 + 30.0 * np.log10(d)
    return float(out) if out.ndim == 0 else out


def snr_db(tx_power_dbm, pl, shadow, noise_floor_dbm):
    return tx_power_dbm - pl - shadow - noise_floor_dbm


def effective_snr_db(snr, repetition):
    """Ideal energy combining over ``repetition`` copies."""
    rep = np.asarray(repetition, dtype=float)
    if np.any(rep < 1):
        raise ValueError("repetition must be >= 1")
    out = snr + 10.0 * np.log10(rep)
    return float(out) if np.ndim(out) == 0 else out


def bler(eff_snr, mcs, model: BlerModel):
    """Per-attempt block error probability (logistic in dB)."""
    t = np.asarray(model.thresholds)[np.asarray(mcs)]
    # 1 / (1 + exp(a)) == expit(-a), stable for large |a|
    out = expit(-model.slope * (np.asarray(eff_snr, dtype=float) - t))
    return float(out) if np.ndim(out) == 0 else out


def harq_stats(p, max_retx):
    """Expected transmissions and residual error for up to ``max_retx`` retries.

    Attempts are independent, each failing with probability ``p``.
    """
    p = np.asarray(p, dtype=float)
    k = np.asarray(max_retx)
    residual = p ** (k + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        expected = np.where(p < 1.0, (1.0 - residual) / (1.0 - p), k + 1.0)
    if expected.ndim == 0:
        return float(expected), float(residual)
    return expected, residual


def link_throughput_kbps(mcs, repetition, residual_bler, prbs, rate_table=None):
    rates = np.asarray(default_rate_table() if rate_table is None else rate_table, dtype=float)
    out = np.asarray(prbs) * (rates[np.asarray(mcs)] / np.asarray(repetition)) * (1.0 - np.asarray(residual_bler))
    return float(out) if np.ndim(out) == 0 else out


def _reflect(pos, size):
    """Fold positions into [0, size]; also returns which entries were mirrored."""
    period = 2.0 * size
    m = np.mod(pos, period)
    flipped = m > size
    return np.where(flipped, period - m, m), flipped


def advance(x, y, heading, speed, dt, turn_draw, new_heading, field_size, turn_rate):
    """Vectorized random-direction step shared by :func:`step_pose` and the engine.

    ``turn_draw`` and ``new_heading`` are pre-drawn uniforms so rng consumption is
    fixed regardless of which links turn.
    """
    width, height = field_size
    x = x + speed * dt * np.cos(heading)
    y = y + speed * dt * np.sin(heading)
    x, fx = _reflect(x, width)
    y, fy = _reflect(y, height)
    # mirror heading across the wall that was hit
    heading = np.where(fx, np.pi - heading, heading)
    heading = np.where(fy, -heading, heading)
    turn = turn_draw < min(1.0, turn_rate * dt)
    heading = np.where(turn, new_heading, heading)
    return x, y, np.mod(heading, 2.0 * np.pi)


def step_pose(pose: Pose, dt: float, rng: np.random.Generator,
              field_size=(50.0, 50.0), turn_rate: float = 0.2) -> Pose:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    u, h = rng.random(2)
    if dt == 0:
        return pose
    x, y, heading = advance(pose.x, pose.y, pose.heading, pose.speed, dt,
                            u, 2.0 * np.pi * h, field_size, turn_rate)
    return Pose(float(x), float(y), float(heading), pose.speed)


def sample_shadowing(prev, model: BlerModel, rng: np.random.Generator):
    """One AR(1) step of log-normal shadowing; stationary std is ``shadowing_sigma``."""
    prev = np.asarray(prev, dtype=float)
    z = rng.standard_normal(prev.shape)
    rho = model.shadowing_rho
    out = rho * prev + math.sqrt(1.0 - rho * rho) * model.shadowing_sigma * z
    return float(out) if out.ndim == 0 else out
