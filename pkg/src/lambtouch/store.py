"""Binary dataset/checkpoint files and the text configuration format.

All multi-byte fields are little-endian. Floating-point payloads are float32;
loaders widen them to float64 for computation.

Dataset file ("LWTD")::

    magic[4] version:u16 count:u32 channels:u8 samples:u16
    count * ( x:f32 y:f32 pressure:f32 finger:u8 waveforms:f32[channels*samples] )

Checkpoint file ("LWTM")::

    magic[4] version:u16 head:u8 dropout:f64 input_dim:u32 n_hidden:u32
    hidden_dims:u32[n_hidden] output_dim:u32
    per stage: gamma beta running_mean running_var (f32[in] each) weight:f32[out*in] bias:f32[out]
    head weight:f32[out*in] head bias:f32[out]
    seed:i64 epochs:u32 best_epoch:u32 train_loss:f64 val_loss:f64
    meta_len:u32 meta:utf-8 JSON[meta_len]
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .locmodel import KEY_LABELS, Key, KeypadLayout
from .neural import Head, ModelCheckpoint, NetSpec, StageParams, TrainConfig
from .sigsim import N_RECEIVERS, ChirpSpec, Finger, PlateConfig, RecordSet, TouchEvent

DATASET_MAGIC = b"LWTD"
CHECKPOINT_MAGIC = b"LWTM"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

_DS_HEADER = struct.Struct("<4sHIBH")
_DS_RECORD_HEAD = struct.Struct("<fffB")
_CK_HEADER = struct.Struct("<4sHBdII")
_CK_META = struct.Struct("<qIIdd")

_HEADS = {Head.SOFTMAX_CLASSIFIER: 0, Head.LINEAR_REGRESSOR: 1}
_FINGERS = {Finger.ROBOT: 0, Finger.HUMAN: 1}


class FormatError(ValueError):
    """Base class for unreadable files."""


class MagicMismatch(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ShapeMismatch(FormatError):
    pass


class ConfigError(ValueError):
    pass


def atomic_write(path, data: bytes):
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- datasets


def save_dataset(records) -> bytes:
    records = list(records)
    samples = records[0].waveforms.shape[1] if records else 250
    parts = [_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(records), N_RECEIVERS, samples)]
    for r in records:
        if r.waveforms.shape != (N_RECEIVERS, samples):
            raise ShapeMismatch(f"record {r.event.seed_index} has waveforms {r.waveforms.shape}")
        e = r.event
        parts.append(_DS_RECORD_HEAD.pack(e.x_cm, e.y_cm, e.pressure, _FINGERS[e.finger]))
        parts.append(np.ascontiguousarray(r.waveforms, dtype="<f4").tobytes())
    return b"".join(parts)


def dataset_size(count: int, channels: int = N_RECEIVERS, samples: int = 250) -> int:
    return _DS_HEADER.size + count * (_DS_RECORD_HEAD.size + 4 * channels * samples)


def _read_dataset_header(buf: bytes):
    if len(buf) < _DS_HEADER.size:
        raise TruncatedPayload(f"dataset header needs {_DS_HEADER.size} bytes, file has {len(buf)}")
    magic, version, count, channels, samples = _DS_HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise MagicMismatch(f"not a dataset file (magic {magic!r}, expected {DATASET_MAGIC!r})")
    if version != DATASET_VERSION:
        raise UnsupportedVersion(f"dataset format version {version} is not supported (expected {DATASET_VERSION})")
    if channels != N_RECEIVERS:
        raise ShapeMismatch(f"dataset declares {channels} channels, expected {N_RECEIVERS}")
    expected = dataset_size(count, channels, samples)
    if len(buf) < expected:
        raise TruncatedPayload(f"dataset declares {count} records ({expected} bytes) but file has {len(buf)} bytes")
    if len(buf) > expected:
        raise FormatError(f"dataset has {len(buf) - expected} trailing bytes after {count} records")
    return count, channels, samples


def load_dataset(buf: bytes) -> list[RecordSet]:
    """Inverse of :func:`save_dataset`; record ``i`` gets ``seed_index = i``."""
    buf = bytes(buf)
    count, channels, samples = _read_dataset_header(buf)
    inv_fingers = {v: k for k, v in _FINGERS.items()}
    rec_size = _DS_RECORD_HEAD.size + 4 * channels * samples
    out = []
    off = _DS_HEADER.size
    for i in range(count):
        x, y, p, flag = _DS_RECORD_HEAD.unpack_from(buf, off)
        if flag not in inv_fingers:
            raise FormatError(f"record {i}: unknown finger flag {flag}")
        w = np.frombuffer(buf, dtype="<f4", count=channels * samples, offset=off + _DS_RECORD_HEAD.size)
        w = w.astype(np.float32).reshape(channels, samples)
        out.append(RecordSet(TouchEvent(x, y, p, inv_fingers[flag], i), w))
        off += rec_size
    return out


def load_dataset_arrays(buf: bytes):
    """Fast path: (waveforms (n,4,s) float32, labels (n,3) float64, finger flags (n,))."""
    buf = bytes(buf)
    count, channels, samples = _read_dataset_header(buf)
    dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("p", "<f4"), ("finger", "u1"), ("w", "<f4", (channels, samples))])
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=_DS_HEADER.size)
    labels = np.stack([arr["x"], arr["y"], arr["p"]], axis=1).astype(np.float64)
    return arr["w"].astype(np.float32), labels, arr["finger"].copy()


def write_dataset(path, records):
    atomic_write(path, save_dataset(records))


def read_dataset(path) -> list[RecordSet]:
    return load_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoints


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(model: ModelCheckpoint) -> bytes:
    spec = model.spec
    model.validate()
    parts = [
        _CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _HEADS[spec.head], spec.dropout_p,
                        spec.input_dim, len(spec.hidden_dims)),
        struct.pack(f"<{len(spec.hidden_dims)}I", *spec.hidden_dims),
        struct.pack("<I", spec.output_dim),
    ]
    for st in model.stages:
        for a in (st.bn_gamma, st.bn_beta, st.bn_running_mean, st.bn_running_var, st.weight, st.bias):
            parts.append(_f32(a))
    parts += [_f32(model.head_weight), _f32(model.head_bias)]
    meta = dict(model.train_meta)
    core = (
        int(meta.pop("seed", 0)),
        int(meta.pop("epochs", 0)),
        int(meta.pop("best_epoch", 0)),
        float(meta.pop("train_loss", math.nan)),
        float(meta.pop("val_loss", math.nan)),
    )
    extra = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [_CK_META.pack(*core), struct.pack("<I", len(extra)), extra]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedPayload(f"checkpoint ends inside {what} (needs {n} bytes at offset {self.off})")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def floats(self, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def load_checkpoint(buf: bytes) -> ModelCheckpoint:
    buf = bytes(buf)
    rd = _Reader(buf)
    if len(buf) < _CK_HEADER.size:
        raise TruncatedPayload("checkpoint header is incomplete")
    magic, version, head_code, dropout, input_dim, n_hidden = rd.unpack(_CK_HEADER, "header")
    if magic != CHECKPOINT_MAGIC:
        raise MagicMismatch(f"not a checkpoint file (magic {magic!r}, expected {CHECKPOINT_MAGIC!r})")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"checkpoint format version {version} is not supported")
    heads = {v: k for k, v in _HEADS.items()}
    if head_code not in heads:
        raise FormatError(f"unknown head kind {head_code}")
    hidden = struct.unpack(f"<{n_hidden}I", rd.take(4 * n_hidden, "hidden widths"))
    (output_dim,) = struct.unpack("<I", rd.take(4, "output width"))
    try:
        spec = NetSpec(input_dim, hidden, output_dim, heads[head_code], dropout)
    except ValueError as exc:
        raise ShapeMismatch(f"invalid architecture descriptor: {exc}") from exc

    widths = spec.widths
    stages = []
    for s, (n_in, n_out) in enumerate(zip(widths[:-2], widths[1:-1])):
        what = f"stage {s} ({n_in}→{n_out})"
        vecs = [rd.floats((n_in,), what) for _ in range(4)]
        stages.append(StageParams(*vecs, rd.floats((n_out, n_in), what), rd.floats((n_out,), what)))
    what = f"head ({widths[-2]}→{widths[-1]})"
    head_w = rd.floats((widths[-1], widths[-2]), what)
    head_b = rd.floats((widths[-1],), what)
    seed, epochs, best, tr_loss, va_loss = rd.unpack(_CK_META, "training metadata")
    (n_extra,) = struct.unpack("<I", rd.take(4, "metadata length"))
    extra = json.loads(rd.take(n_extra, "metadata").decode("utf-8")) if n_extra else {}
    if rd.off != len(buf):
        raise ShapeMismatch(f"{len(buf) - rd.off} bytes left over after the descriptor's payload")
    meta = {"seed": seed, "epochs": epochs, "best_epoch": best, "train_loss": tr_loss, "val_loss": va_loss, **extra}
    return ModelCheckpoint(spec, stages, head_w, head_b, meta)


def write_checkpoint(path, model: ModelCheckpoint):
    atomic_write(path, save_checkpoint(model))


def read_checkpoint(path) -> ModelCheckpoint:
    return load_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- config


@dataclass
class Config:
    plate: PlateConfig = field(default_factory=PlateConfig)
    chirp: ChirpSpec = field(default_factory=ChirpSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    keypad: KeypadLayout = field(default_factory=KeypadLayout.default)


def _vec2(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected 'x, y'")
    return (float(parts[0]), float(parts[1]))


_PLATE_KEYS = {
    "width": ("width_cm", float),
    "height": ("height_cm", float),
    "emitter": ("emitter_pos", _vec2),
    "velocity": ("group_velocity_cm_per_s", float),
    "scatter_gain": ("scatter_gain", float),
    "snr_db": ("snr_db", float),
    "dispersion_slope": ("dispersion_slope", float),
    "edge_reflections": ("edge_reflections", lambda s: {"true": True, "false": False, "1": True, "0": False}[s.lower()]),
}
_CHIRP_KEYS = {
    "f0": ("f0_hz", float),
    "f1": ("f1_hz", float),
    "duration": ("duration_s", float),
    "emit_rate": ("emit_rate_hz", float),
    "acquire_rate": ("acquire_rate_hz", float),
    "samples": ("acquire_samples", int),
}
_TRAIN_KEYS = {f.name: (f.name, int if f.type in (int, "int") else float) for f in fields(TrainConfig)}
_SECTIONS = ("plate", "chirp", "training", "key")
# a comment starts at a "#" opening the line or following whitespace, so "key.#" stays a key
_COMMENT = re.compile(r"(^|\s)#.*$")


def load_config(text: str) -> Config:
    """Parse ``key = value`` lines into a :class:`Config`, defaults for anything omitted.

    Keys are ``plate.*``, ``chirp.*``, ``training.*`` and ``key.<label>``;
    a ``[section]`` line prefixes the keys that follow it.
    """
    plate_kw, chirp_kw, train_kw = {}, {}, {}
    receivers = [None] * N_RECEIVERS
    key_lines = {}
    origin = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        m = re.fullmatch(r"\[(\w+)\]", line)
        if m:
            if m.group(1) not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{m.group(1)}]")
            section = m.group(1)
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        if section and not key.startswith(section + "."):
            key = f"{section}.{key}"
        head, _, name = key.partition(".")
        try:
            if head == "plate" and name in _PLATE_KEYS:
                attr, conv = _PLATE_KEYS[name]
                plate_kw[attr] = conv(value)
            elif head == "plate" and re.fullmatch(r"receiver[1-4]", name):
                receivers[int(name[-1]) - 1] = _vec2(value)
            elif head == "chirp" and name in _CHIRP_KEYS:
                attr, conv = _CHIRP_KEYS[name]
                chirp_kw[attr] = conv(value)
            elif head == "training" and name in _TRAIN_KEYS:
                attr, conv = _TRAIN_KEYS[name]
                train_kw[attr] = conv(float(value)) if conv is int else conv(value)
            elif head == "key" and name in KEY_LABELS:
                parts = [float(p) for p in value.split(",")]
                if len(parts) != 3:
                    raise ValueError("expected 'x, y, half_size'")
                key_lines[name] = parts
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        origin[key] = lineno

    defaults = PlateConfig()
    width = plate_kw.get("width_cm", defaults.width_cm)
    height = plate_kw.get("height_cm", defaults.height_cm)
    positions = [("plate.emitter", plate_kw.get("emitter_pos"))]
    positions += [(f"plate.receiver{i + 1}", r) for i, r in enumerate(receivers)]
    for key, pos in positions:
        if pos is not None and not (0 <= pos[0] <= width and 0 <= pos[1] <= height):
            raise ConfigError(f"line {origin[key]}: {key} = {pos} lies outside the {width} x {height} cm plate")
    if any(r is not None for r in receivers):
        plate_kw["receiver_pos"] = [r if r is not None else d for r, d in zip(receivers, defaults.receiver_pos)]
    try:
        plate = PlateConfig(**plate_kw)
    except ValueError as exc:
        raise ConfigError(f"plate: {exc}") from exc
    try:
        chirp = ChirpSpec(**chirp_kw)
    except ValueError as exc:
        raise ConfigError(f"chirp: {exc}") from exc
    try:
        training = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from exc

    keys = list(KeypadLayout.default().keys)
    for label, (x, y, h) in key_lines.items():
        if h <= 0 or x - h < 0 or y - h < 0 or x + h > plate.width_cm or y + h > plate.height_cm:
            raise ConfigError(f"line {origin['key.' + label]}: key.{label} lies outside the plate")
        keys[KEY_LABELS.index(label)] = Key(label, (x, y), h)
    try:
        layout = KeypadLayout(tuple(keys), plate.width_cm, plate.height_cm)
    except ValueError as exc:
        raise ConfigError(f"keypad: {exc}") from exc
    return Config(plate, chirp, training, layout)


def read_config(path) -> Config:
    return load_config(Path(path).read_text(encoding="utf-8"))
