"""Time- and frequency-domain feature vectors from receiver waveforms."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .sigsim import N_RECEIVERS, ChirpSpec, RecordSet

TIME_DIM = 1000
FREQ_DIM = 392
N_FREQ_BINS = 49


class Domain(Enum):
    TIME = "time"
    FREQUENCY = "freq"

    @classmethod
    def parse(cls, text: str) -> "Domain":
        text = text.strip().lower()
        if text in ("time", "t"):
            return cls.TIME
        if text in ("freq", "frequency", "f"):
            return cls.FREQUENCY
        raise ValueError(f"unknown feature domain {text!r}")

    @property
    def dim(self) -> int:
        return TIME_DIM if self is Domain.TIME else FREQ_DIM


@dataclass(frozen=True, eq=False)
class FeatureVector:
    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.domain.dim,):
            raise ValueError(f"{self.domain.value} features must have length {self.domain.dim}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector contains non-finite values")


def hann_window(n: int) -> np.ndarray:
    """Symmetric Hann window, zero at both ends."""
    if n < 2:
        raise ValueError("Hann window needs at least 2 points")
    i = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (n - 1)))


def dft(x) -> np.ndarray:
    """Forward DFT ``X[k] = sum_m x[m] exp(-2j*pi*k*m/n)`` along the last axis."""
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ValueError("dft needs at least one sample")
    return np.fft.fft(x, axis=-1)


def band_bins(spec: ChirpSpec) -> np.ndarray:
    """DFT bins strictly inside (f0, f1); must be exactly 49 of them."""
    n = spec.acquire_samples
    df = spec.acquire_rate_hz / n
    k = np.arange(n // 2 + 1)
    f = k * df
    eps = 1e-9 * df
    sel = k[(f > spec.f0_hz + eps) & (f < spec.f1_hz - eps)]
    if sel.size != N_FREQ_BINS:
        raise ValueError(
            f"chirp band ({spec.f0_hz:g}, {spec.f1_hz:g}) Hz at {df:g} Hz bin spacing "
            f"gives {sel.size} bins, need {N_FREQ_BINS}"
        )
    return sel


def _check(record: RecordSet, samples: int):
    w = record.waveforms
    if w.shape != (N_RECEIVERS, samples):
        raise ValueError(f"expected {N_RECEIVERS} x {samples} waveforms, got {w.shape}")


def time_features(waveforms: np.ndarray) -> np.ndarray:
    """Batched: (..., 4, 250) -> (..., 1000)."""
    w = np.asarray(waveforms, dtype=float)
    return w.reshape(*w.shape[:-2], -1)


def freq_features(waveforms: np.ndarray, spec: ChirpSpec = ChirpSpec()) -> np.ndarray:
    """Batched: (..., 4, 250) -> (..., 392), bins interleaved Re/Im per receiver."""
    w = np.asarray(waveforms, dtype=float)
    bins = band_bins(spec)
    X = dft(w * hann_window(w.shape[-1]))[..., bins]
    out = np.empty(X.shape[:-1] + (2 * bins.size,))
    out[..., 0::2] = X.real
    out[..., 1::2] = X.imag
    return out.reshape(*w.shape[:-2], -1)


def extract_time_features(record: RecordSet) -> FeatureVector:
    _check(record, TIME_DIM // N_RECEIVERS)
    return FeatureVector(Domain.TIME, time_features(record.waveforms))


def extract_freq_features(record: RecordSet, spec: ChirpSpec = ChirpSpec()) -> FeatureVector:
    _check(record, spec.acquire_samples)
    return FeatureVector(Domain.FREQUENCY, freq_features(record.waveforms, spec))


def extract(record: RecordSet, domain: Domain, spec: ChirpSpec = ChirpSpec()) -> FeatureVector:
    if domain is Domain.TIME:
        return extract_time_features(record)
    return extract_freq_features(record, spec)


def feature_matrix(records, domain: Domain, spec: ChirpSpec = ChirpSpec()) -> np.ndarray:
    """Stack features of many records into an (n, dim) float64 array."""
    if not records:
        return np.empty((0, domain.dim))
    for r in records:
        _check(r, spec.acquire_samples)
    w = np.stack([r.waveforms for r in records])
    if domain is Domain.TIME:
        return time_features(w)
    return freq_features(w, spec)
