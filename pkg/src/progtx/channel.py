"""Rayleigh fading traces and per-slot bit budgets.

Fading uses the improved sum-of-sinusoids construction for Clarke's flat
fading model: real and imaginary parts are each a sum of ``M`` cosines whose
arrival angles are jittered inside equal sectors of a quarter circle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

LOG2E = 1.0 / math.log(2.0)


@dataclass(frozen=True)
class FadingConfig:
    doppler_hz: float = 10.0
    slot_s: float = 1e-3
    bandwidth_hz: float = 100e3
    avg_snr_db: float = 0.0
    num_sinusoids: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.doppler_hz > 0:
            raise ValueError(f"doppler_hz must be > 0, got {self.doppler_hz}")
        if not self.slot_s > 0:
            raise ValueError(f"slot_s must be > 0, got {self.slot_s}")
        if not self.bandwidth_hz > 0:
            raise ValueError(f"bandwidth_hz must be > 0, got {self.bandwidth_hz}")
        if self.num_sinusoids < 8:
            raise ValueError(f"num_sinusoids must be >= 8, got {self.num_sinusoids}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def channel_uses(self) -> int:
        """Channel uses per slot at Nyquist signalling."""
        return max(1, round(self.bandwidth_hz * self.slot_s))


@dataclass(frozen=True)
class FadingTrace:
    gains: np.ndarray  # complex128, one coefficient per slot

    def __len__(self):
        return len(self.gains)

    @property
    def gain_power(self) -> np.ndarray:
        return np.abs(self.gains) ** 2


@dataclass(frozen=True)
class RateModel:
    kind: str = "shannon"
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("shannon", "finite_blocklength"):
            raise ValueError(f"unknown rate model kind {self.kind!r}")
        if not 0 < self.epsilon <= 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5], got {self.epsilon}")


@dataclass(frozen=True)
class SlotBudget:
    slot_index: int
    gain_power: float
    rate_bps: float
    n_bits: int


def generate_fading(config: FadingConfig, n_slots: int) -> FadingTrace:
    """Sample ``n_slots`` unit-power complex gains spaced ``slot_s`` apart."""
    if n_slots < 1:
        raise ValueError(f"n_slots must be >= 1, got {n_slots}")
    m = config.num_sinusoids
    rng = np.random.default_rng(int(config.seed))
    theta = rng.uniform(-np.pi, np.pi, m)
    phi_re = rng.uniform(-np.pi, np.pi, m)
    phi_im = rng.uniform(-np.pi, np.pi, m)
    n = np.arange(1, m + 1)
    alpha = (2 * np.pi * n - np.pi + theta) / (4 * m)
    wd = 2 * np.pi * config.doppler_hz

    t = np.arange(n_slots, dtype=np.float64) * config.slot_s
    re = np.zeros(n_slots)
    im = np.zeros(n_slots)
    # one sinusoid at a time keeps memory at O(n_slots)
    for k in range(m):
        re += np.cos(wd * np.cos(alpha[k]) * t + phi_re[k])
        im += np.cos(wd * np.sin(alpha[k]) * t + phi_im[k])
    # each part has unit variance before the 1/sqrt(2) split of power
    scale = math.sqrt(2.0 / m) / math.sqrt(2.0)
    return FadingTrace(gains=(re + 1j * im) * scale)


def shannon_capacity(snr_linear, bandwidth_hz):
    """B * log2(1 + SNR) in bits per second (scalar or array)."""
    snr = np.asarray(snr_linear, dtype=np.float64)
    if np.any(snr < 0):
        raise ValueError("snr_linear must be non-negative")
    out = bandwidth_hz * np.log2(1.0 + snr)
    return float(out) if out.ndim == 0 else out


def q_function(x: float) -> float:
    """Gaussian tail probability Q(x) = P[N(0,1) > x]."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


# Acklam's rational approximation of the standard normal quantile.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _normal_quantile(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
        return num / den
    if p > 1 - _P_LOW:
        return -_normal_quantile(1 - p)
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
    return num / den


def inverse_q(epsilon: float) -> float:
    """Solve Q(x) = epsilon; rational start refined by one Newton step."""
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if epsilon == 0.5:
        return 0.0
    x = -_normal_quantile(epsilon)
    # Newton on Q(x) - eps, with Q'(x) = -pdf(x)
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    return x + (q_function(x) - epsilon) / pdf


def dispersion(snr_linear):
    """Complex AWGN channel dispersion in bits^2 per channel use."""
    snr = np.asarray(snr_linear, dtype=np.float64)
    return (1.0 - (1.0 + snr) ** -2) * LOG2E**2


def achievable_rate(model: RateModel, snr_linear, bandwidth_hz: float, slot_s: float):
    """Rate in bits/s under ``model``; vectorised over ``snr_linear``."""
    snr = np.asarray(snr_linear, dtype=np.float64)
    if np.any(snr < 0):
        raise ValueError("snr_linear must be non-negative")
    per_use = np.log2(1.0 + snr)
    if model.kind == "finite_blocklength":
        n = max(1, round(bandwidth_hz * slot_s))
        per_use = per_use - np.sqrt(dispersion(snr) / n) * inverse_q(model.epsilon)
    out = np.maximum(per_use, 0.0) * bandwidth_hz
    return float(out) if out.ndim == 0 else out


def budget_bits(gain_power, config: FadingConfig, model: RateModel) -> np.ndarray:
    """Vectorised n_bits per slot for an array of |h|^2 values."""
    snr = np.asarray(gain_power, dtype=np.float64) * 10 ** (config.avg_snr_db / 10)
    rate = np.atleast_1d(achievable_rate(model, snr, config.bandwidth_hz, config.slot_s))
    # the tiny guard keeps exact products such as 1e5 * 1e-3 from landing at 99.999...
    return np.floor(rate * config.slot_s + 1e-9).astype(np.int64)


def slot_budgets(trace: FadingTrace, config: FadingConfig, model: RateModel) -> list[SlotBudget]:
    power = trace.gain_power
    snr = power * 10 ** (config.avg_snr_db / 10)
    rate = np.atleast_1d(achievable_rate(model, snr, config.bandwidth_hz, config.slot_s))
    bits = budget_bits(power, config, model)
    return [SlotBudget(i, float(power[i]), float(rate[i]), int(bits[i]))
            for i in range(len(trace))]


def write_trace_csv(path, trace: FadingTrace, budgets: Sequence[SlotBudget] | Iterable[int]):
    """Export ``slot_index, re, im, gain_power, n_bits`` rows."""
    bits = [b.n_bits if isinstance(b, SlotBudget) else int(b) for b in budgets]
    if len(bits) != len(trace):
        raise ValueError("budget count does not match trace length")
    power = trace.gain_power
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot_index", "re", "im", "gain_power", "n_bits"])
        for i, g in enumerate(trace.gains):
            w.writerow([i, repr(float(g.real)), repr(float(g.imag)), repr(float(power[i])), bits[i]])
