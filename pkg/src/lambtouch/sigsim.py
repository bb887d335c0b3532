"""Synthetic receiver waveforms for a touch on a guided-wave glass plate.

The model is a single-scatterer ray picture: every receiver sees the direct
emitter-to-receiver chirp plus a weaker copy re-radiated from the touch point,
delayed by the emitter-touch-receiver path and scaled by the contact pressure.
It is a stand-in for the acquisition rig, not a Lamb-wave solver.

Every record is a pure function of ``(master_seed, seed_index)`` so datasets
can be regenerated bit-for-bit and synthesised out of order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

N_RECEIVERS = 4
PROXIMITY_GUARD_CM = 0.1
DATASET_MARGIN_CM = 0.5
PRESSURE_RANGE = (0.2, 1.0)
DIRECT_AMPLITUDE = 1.0

# independent RNG streams derived from (master_seed, index)
_STREAM_EVENT = 0
_STREAM_NOISE = 1
_STREAM_HUMAN = 2


class Finger(Enum):
    ROBOT = 0
    HUMAN = 1


def _default_receivers() -> list[tuple[float, float]]:
    return [(1.0, 1.0), (19.0, 1.0), (1.0, 19.0), (19.0, 19.0)]


@dataclass(frozen=True)
class PlateConfig:
    width_cm: float = 20.0
    height_cm: float = 20.0
    emitter_pos: tuple[float, float] = (10.0, 1.0)
    receiver_pos: list[tuple[float, float]] = field(default_factory=_default_receivers)
    group_velocity_cm_per_s: float = 3.0e5
    scatter_gain: float = 0.35
    snr_db: float = 30.0
    # cm/s per Hz, relative to the 75 kHz band centre; 0 disables dispersion
    dispersion_slope: float = 0.0
    edge_reflections: bool = False

    def __post_init__(self):
        object.__setattr__(self, "emitter_pos", tuple(float(v) for v in self.emitter_pos))
        object.__setattr__(
            self, "receiver_pos", [tuple(float(v) for v in p) for p in self.receiver_pos]
        )
        if self.width_cm <= 0 or self.height_cm <= 0:
            raise ValueError("plate dimensions must be positive")
        if self.group_velocity_cm_per_s <= 0:
            raise ValueError("group velocity must be positive")
        if len(self.receiver_pos) != N_RECEIVERS:
            raise ValueError(f"exactly {N_RECEIVERS} receivers required, got {len(self.receiver_pos)}")
        for name, p in [("emitter", self.emitter_pos)] + [
            (f"receiver{i + 1}", p) for i, p in enumerate(self.receiver_pos)
        ]:
            if not self.contains(p):
                raise ValueError(f"{name} position {p} lies outside the plate")

    def contains(self, p) -> bool:
        return 0.0 <= p[0] <= self.width_cm and 0.0 <= p[1] <= self.height_cm


@dataclass(frozen=True)
class ChirpSpec:
    f0_hz: float = 50e3
    f1_hz: float = 100e3
    duration_s: float = 1e-3
    emit_rate_hz: float = 500e3
    acquire_rate_hz: float = 250e3
    acquire_samples: int = 250

    def __post_init__(self):
        if not self.f1_hz > self.f0_hz:
            raise ValueError("chirp end frequency must exceed start frequency")
        if self.duration_s <= 0:
            raise ValueError("chirp duration must be positive")
        if self.emit_rate_hz < 2 * self.f1_hz:
            raise ValueError("emission rate must be at least twice the chirp end frequency")
        if round(self.duration_s * self.acquire_rate_hz) != self.acquire_samples:
            raise ValueError("acquire_samples must equal duration_s * acquire_rate_hz")
        ratio = self.emit_rate_hz / self.acquire_rate_hz
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("emission rate must be an integer multiple of the acquisition rate")

    @property
    def decimation(self) -> int:
        return int(round(self.emit_rate_hz / self.acquire_rate_hz))

    @property
    def sweep_rate(self) -> float:
        return (self.f1_hz - self.f0_hz) / self.duration_s


@dataclass(frozen=True)
class TouchEvent:
    x_cm: float
    y_cm: float
    pressure: float
    finger: Finger = Finger.ROBOT
    seed_index: int = 0

    def __post_init__(self):
        # 0 is accepted as "no contact scattering", the direct-path-only baseline;
        # generated touches always fall in PRESSURE_RANGE
        hi = PRESSURE_RANGE[1]
        if not (0.0 <= self.pressure <= hi + 1e-6):
            raise ValueError(f"pressure {self.pressure} outside [0, {hi}]")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x_cm, self.y_cm])


@dataclass(frozen=True, eq=False)
class RecordSet:
    """One touch: its label and the 4 x 250 receiver waveforms (float32)."""

    event: TouchEvent
    waveforms: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waveforms)
        if w.ndim != 2 or w.shape[0] != N_RECEIVERS:
            raise ValueError(f"waveforms must be {N_RECEIVERS} x samples, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("waveforms contain non-finite samples")

    def __eq__(self, other):
        if not isinstance(other, RecordSet):
            return NotImplemented
        return (
            self.event == other.event
            and self.waveforms.shape == other.waveforms.shape
            and self.waveforms.dtype == other.waveforms.dtype
            and self.waveforms.tobytes() == other.waveforms.tobytes()
        )


@dataclass(frozen=True)
class HumanPerturbation:
    """Robot-to-human mismatch: pressure scatter and scattered-path timing jitter."""

    pressure_sigma: float = 0.15
    pressure_clamp: tuple[float, float] = (0.5, 1.5)
    # standard deviation of the extra delay, in acquisition samples
    delay_jitter_samples: float = 0.2


def chirp_phase(spec: ChirpSpec, t):
    t = np.asarray(t, dtype=float)
    return 2.0 * np.pi * (spec.f0_hz * t + 0.5 * spec.sweep_rate * t * t)


def chirp(spec: ChirpSpec, t):
    """Linear chirp ``sin(2*pi*(f0*t + k/2*t**2))`` on ``[0, T]``, zero elsewhere.

    Accepts a scalar or an array of times in seconds.
    """
    t = np.asarray(t, dtype=float)
    phase = chirp_phase(spec, t)
    out = np.where((t >= 0.0) & (t <= spec.duration_s), np.sin(phase), 0.0)
    return float(out) if out.ndim == 0 else out


def instantaneous_frequency(spec: ChirpSpec, t: float) -> float:
    return spec.f0_hz + spec.sweep_rate * t


def _rng(master_seed: int, index: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), stream))
    return np.random.default_rng(ss)


def _delayed_chirp(spec: ChirpSpec, emitted: np.ndarray, delay_s, plate: PlateConfig, dist_cm: float):
    """Delay the emit-rate chirp by linear interpolation between emitted samples."""
    n = emitted.size
    fs = spec.emit_rate_hz
    t = np.arange(n) / fs
    if plate.dispersion_slope:
        # delay follows the frequency the chirp carries when that part was emitted
        f = instantaneous_frequency(spec, t - delay_s)
        c = plate.group_velocity_cm_per_s + plate.dispersion_slope * (f - 0.5 * (spec.f0_hz + spec.f1_hz))
        delay_s = dist_cm / np.maximum(c, 1e-3 * plate.group_velocity_cm_per_s)
    pos = (t - delay_s) * fs
    i0 = np.floor(pos).astype(int)
    frac = pos - i0

    def tap(i):
        # the emitter is silent outside its n samples
        return np.where((i >= 0) & (i < n), emitted[np.clip(i, 0, n - 1)], 0.0)

    return (1.0 - frac) * tap(i0) + frac * tap(i0 + 1)


def _image_sources(plate: PlateConfig, p) -> list[tuple[float, float]]:
    x, y = p
    w, h = plate.width_cm, plate.height_cm
    return [(-x, y), (2 * w - x, y), (x, -y), (x, 2 * h - y)]


def _check_event(plate: PlateConfig, event: TouchEvent):
    p = (event.x_cm, event.y_cm)
    if not plate.contains(p):
        raise ValueError(f"touch at {p} lies outside the {plate.width_cm} x {plate.height_cm} cm plate")
    for name, q in [("emitter", plate.emitter_pos)] + [
        (f"receiver{i + 1}", r) for i, r in enumerate(plate.receiver_pos)
    ]:
        if math.dist(p, q) < PROXIMITY_GUARD_CM:
            raise ValueError(f"touch at {p} coincides with the {name} at {q}")


def _synthesize(plate, spec, event, master_seed, pressure_factor=1.0, extra_delay_s=0.0):
    _check_event(plate, event)
    fs = spec.emit_rate_hz
    n_emit = spec.acquire_samples * spec.decimation
    emitted = chirp(spec, np.arange(n_emit) / fs)
    c = plate.group_velocity_cm_per_s
    e = plate.emitter_pos
    p = (event.x_cm, event.y_cm)
    rho = event.pressure * pressure_factor
    d_et = math.dist(e, p)

    clean = np.empty((N_RECEIVERS, spec.acquire_samples))
    for r, rx in enumerate(plate.receiver_pos):
        d_er = math.dist(e, rx)
        d_tr = math.dist(p, rx)
        y = DIRECT_AMPLITUDE / math.sqrt(d_er) * _delayed_chirp(spec, emitted, d_er / c, plate, d_er)
        if rho != 0.0:
            path = d_et + d_tr
            amp = rho * plate.scatter_gain * DIRECT_AMPLITUDE / math.sqrt(d_et * d_tr)
            y = y + amp * _delayed_chirp(spec, emitted, path / c + extra_delay_s, plate, path)
        if plate.edge_reflections:
            for img in _image_sources(plate, e):
                d = math.dist(img, rx)
                y = y + DIRECT_AMPLITUDE / math.sqrt(d) * _delayed_chirp(spec, emitted, d / c, plate, d)
        clean[r] = y[:: spec.decimation]

    if math.isfinite(plate.snr_db):
        noise_rng = _rng(master_seed, event.seed_index, _STREAM_NOISE)
        power = np.mean(clean**2, axis=1, keepdims=True)
        sigma = np.sqrt(power / 10.0 ** (plate.snr_db / 10.0))
        clean = clean + sigma * noise_rng.standard_normal(clean.shape)
    return RecordSet(event=event, waveforms=clean.astype(np.float32))


def synth_touch(plate: PlateConfig, spec: ChirpSpec, event: TouchEvent, master_seed: int) -> RecordSet:
    """Receiver waveforms for one touch.

    Each channel is the direct chirp ``A/sqrt(d_er)`` delayed by ``d_er/c`` plus
    the scattered chirp ``rho*g*A/sqrt(d_et*d_tr)`` delayed by ``(d_et+d_tr)/c``,
    both built at the emission rate and decimated to the acquisition rate, then
    white Gaussian noise scaled per channel to ``plate.snr_db`` (``inf`` disables
    it). Noise is drawn from a stream keyed on ``(master_seed, event.seed_index)``.
    """
    return _synthesize(plate, spec, event, master_seed)


def _quantize(v: float) -> float:
    # labels are kept at float32 precision so they survive the dataset file unchanged
    return float(np.float32(v))


def random_event(plate: PlateConfig, master_seed: int, index: int, finger: Finger = Finger.ROBOT) -> TouchEvent:
    rng = _rng(master_seed, index, _STREAM_EVENT)
    m = DATASET_MARGIN_CM
    x = rng.uniform(m, plate.width_cm - m)
    y = rng.uniform(m, plate.height_cm - m)
    pressure = rng.uniform(*PRESSURE_RANGE)
    return TouchEvent(_quantize(x), _quantize(y), _quantize(pressure), finger, index)


def gen_record(plate: PlateConfig, spec: ChirpSpec, index: int, master_seed: int) -> RecordSet:
    """Record ``index`` of the dataset seeded by ``master_seed``.

    Positions within a 0.5 cm margin are redrawn if they land on a transducer.
    """
    event = random_event(plate, master_seed, index)
    attempt = 0
    while True:
        try:
            _check_event(plate, event)
            break
        except ValueError:
            attempt += 1
            event = random_event(plate, master_seed + attempt * 7919, index)
    return synth_touch(plate, spec, event, master_seed)


def gen_dataset(plate: PlateConfig, spec: ChirpSpec, n: int, master_seed: int) -> list[RecordSet]:
    if n < 0:
        raise ValueError("record count must be non-negative")
    return [gen_record(plate, spec, i, master_seed) for i in range(n)]


def draw_human_factors(perturbation: HumanPerturbation, spec: ChirpSpec, master_seed: int, index: int):
    """Per-touch (pressure multiplier, extra scattered delay in seconds)."""
    rng = _rng(master_seed, index, _STREAM_HUMAN)
    lo, hi = perturbation.pressure_clamp
    factor = float(np.clip(1.0 + perturbation.pressure_sigma * rng.standard_normal(), lo, hi))
    jitter = perturbation.delay_jitter_samples * rng.standard_normal() / spec.acquire_rate_hz
    return factor, float(jitter)


def human_perturb(
    plate: PlateConfig,
    spec: ChirpSpec,
    event: TouchEvent,
    master_seed: int,
    perturbation: HumanPerturbation = HumanPerturbation(),
) -> RecordSet:
    if event.finger is not Finger.HUMAN:
        raise ValueError("human_perturb expects a human-finger event")
    factor, jitter = draw_human_factors(perturbation, spec, master_seed, event.seed_index)
    return _synthesize(plate, spec, event, master_seed, pressure_factor=factor, extra_delay_s=jitter)


def gen_circle_trajectory(
    plate: PlateConfig,
    spec: ChirpSpec,
    center,
    radius_cm: float,
    count: int,
    master_seed: int,
    perturbation: HumanPerturbation = HumanPerturbation(),
) -> list[RecordSet]:
    """Human-finger touches at ``count`` equally spaced angles, counter-clockwise from +x."""
    cx, cy = float(center[0]), float(center[1])
    if radius_cm <= 0:
        raise ValueError("radius must be positive")
    if cx - radius_cm < 0 or cy - radius_cm < 0 or cx + radius_cm > plate.width_cm or cy + radius_cm > plate.height_cm:
        raise ValueError(f"circle at ({cx}, {cy}) with radius {radius_cm} crosses the plate boundary")
    records = []
    for k in range(count):
        theta = 2.0 * math.pi * k / count
        x = cx + radius_cm * math.cos(theta)
        y = cy + radius_cm * math.sin(theta)
        pressure = _rng(master_seed, k, _STREAM_EVENT).uniform(*PRESSURE_RANGE)
        event = TouchEvent(x, y, pressure, Finger.HUMAN, k)
        records.append(human_perturb(plate, spec, event, master_seed, perturbation))
    return records


def with_noise_disabled(plate: PlateConfig) -> PlateConfig:
    return replace(plate, snr_db=math.inf)
