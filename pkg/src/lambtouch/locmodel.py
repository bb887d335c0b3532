"""Localization heads: grid zones, direct regression, keypad keys, and a kNN baseline.

Coordinates are in cm with the origin at the plate's lower-left corner, x to
the right and y upward. Grid row ``i`` grows with y, column ``j`` with x, both
1-based; the flat class index is ``(i-1)*n + (j-1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import FREQ_DIM, Domain
from .neural import Head, NetSpec

GRID_HIDDEN = (400, 300, 200, 100)
KEYPAD_HIDDEN = (100, 50)
KEY_LABELS = ("1", "2", "3", "4", "5", "6", "7", "8", "9", "*", "0", "#")
BACKGROUND_CLASS = 13
BACKGROUND_LABEL = "L"


@dataclass(frozen=True)
class GridSpec:
    n: int
    plate_width_cm: float = 20.0
    plate_height_cm: float = 20.0

    def __post_init__(self):
        if not 2 <= self.n <= 10:
            raise ValueError(f"grid resolution must lie in [2, 10], got {self.n}")

    @property
    def n_classes(self) -> int:
        return self.n * self.n

    @property
    def zone_width(self) -> float:
        return self.plate_width_cm / self.n

    @property
    def zone_height(self) -> float:
        return self.plate_height_cm / self.n

    @property
    def zone_area(self) -> float:
        return self.zone_width * self.zone_height


@dataclass(frozen=True)
class ZoneIndex:
    i: int
    j: int

    def flat(self, n: int) -> int:
        return (self.i - 1) * n + (self.j - 1)

    @classmethod
    def from_flat(cls, k: int, n: int) -> "ZoneIndex":
        if not 0 <= k < n * n:
            raise ValueError(f"flat zone index {k} out of range for n={n}")
        return cls(k // n + 1, k % n + 1)


def _inside(t, width, height) -> bool:
    return 0.0 <= t[0] <= width and 0.0 <= t[1] <= height


def zone_of(t, grid: GridSpec) -> ZoneIndex:
    """Zone containing ``t``; interior edges go to the higher index, far edges to the last zone."""
    if not _inside(t, grid.plate_width_cm, grid.plate_height_cm):
        raise ValueError(f"position {tuple(t)} lies outside the plate")
    n = grid.n
    i = min(max(math.floor(t[1] / grid.zone_height) + 1, 1), n)
    j = min(max(math.floor(t[0] / grid.zone_width) + 1, 1), n)
    return ZoneIndex(i, j)


def zone_labels(positions, grid: GridSpec) -> np.ndarray:
    """Flat class indices for an (m, 2) array of positions."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    return np.array([zone_of(t, grid).flat(grid.n) for t in p], dtype=np.int64)


def center_of_mass(z: ZoneIndex, grid: GridSpec) -> np.ndarray:
    if not (1 <= z.i <= grid.n and 1 <= z.j <= grid.n):
        raise ValueError(f"zone {z} outside a {grid.n}x{grid.n} grid")
    return np.array([(z.j - 0.5) * grid.zone_width, (z.i - 0.5) * grid.zone_height])


def decode_classification(probs, grid: GridSpec) -> np.ndarray:
    """Centre of the most probable zone; ties go to the lowest flat index.

    Accepts one probability vector or an (m, n*n) batch.
    """
    p = np.asarray(probs, dtype=float)
    if p.size == 0 or p.shape[-1] != grid.n_classes:
        raise ValueError(f"expected {grid.n_classes} class scores")
    if np.any(np.isnan(p)):
        raise ValueError("class scores contain NaN")
    k = np.argmax(p, axis=-1)  # first maximum wins
    n = grid.n
    i = k // n + 1
    j = k % n + 1
    return np.stack([(j - 0.5) * grid.zone_width, (i - 0.5) * grid.zone_height], axis=-1)


def build_grid_classifier(grid: GridSpec, domain: Domain, dropout_p: float = 0.3) -> NetSpec:
    domain = Domain.parse(domain) if isinstance(domain, str) else domain
    return NetSpec(domain.dim, GRID_HIDDEN, grid.n_classes, Head.SOFTMAX_CLASSIFIER, dropout_p)


def build_regressor(domain: Domain, dropout_p: float = 0.3) -> NetSpec:
    domain = Domain.parse(domain) if isinstance(domain, str) else domain
    return NetSpec(domain.dim, GRID_HIDDEN, 2, Head.LINEAR_REGRESSOR, dropout_p)


# ---------------------------------------------------------------- keypad


@dataclass(frozen=True)
class Key:
    label: str
    center: tuple[float, float]
    half_size_cm: float

    def contains(self, t) -> bool:
        return (
            abs(t[0] - self.center[0]) <= self.half_size_cm
            and abs(t[1] - self.center[1]) <= self.half_size_cm
        )


@dataclass(frozen=True)
class KeypadLayout:
    keys: tuple[Key, ...]
    plate_width_cm: float = 20.0
    plate_height_cm: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(self.keys))
        if tuple(k.label for k in self.keys) != KEY_LABELS:
            raise ValueError(f"keys must be labelled {' '.join(KEY_LABELS)} in that order")
        for k in self.keys:
            if k.half_size_cm <= 0:
                raise ValueError(f"key {k.label}: half size must be positive")
            cx, cy = k.center
            h = k.half_size_cm
            if cx - h < 0 or cy - h < 0 or cx + h > self.plate_width_cm or cy + h > self.plate_height_cm:
                raise ValueError(f"key {k.label} extends outside the plate")
        for a_idx, a in enumerate(self.keys):
            for b in self.keys[a_idx + 1 :]:
                gap_x = abs(a.center[0] - b.center[0]) - (a.half_size_cm + b.half_size_cm)
                gap_y = abs(a.center[1] - b.center[1]) - (a.half_size_cm + b.half_size_cm)
                if gap_x <= 0 and gap_y <= 0:
                    raise ValueError(f"keys {a.label} and {b.label} overlap")

    @classmethod
    def default(cls, pitch_cm=4.0, half_size_cm=1.25, center=(10.0, 10.0)) -> "KeypadLayout":
        """3 x 4 access keypad, rows 1-2-3 / 4-5-6 / 7-8-9 / *-0-# from the top."""
        keys = []
        for idx, label in enumerate(KEY_LABELS):
            row, col = divmod(idx, 3)
            x = center[0] + (col - 1) * pitch_cm
            y = center[1] + (1.5 - row) * pitch_cm
            keys.append(Key(label, (x, y), half_size_cm))
        return cls(tuple(keys))

    def key(self, label: str) -> Key:
        return self.keys[KEY_LABELS.index(label)]

    def replace_key(self, label: str, center, half_size_cm: float) -> "KeypadLayout":
        keys = list(self.keys)
        keys[KEY_LABELS.index(label)] = Key(label, (float(center[0]), float(center[1])), float(half_size_cm))
        return KeypadLayout(tuple(keys), self.plate_width_cm, self.plate_height_cm)


def class_name(c: int) -> str:
    """Printable label for a 1-based keypad class."""
    return BACKGROUND_LABEL if c == BACKGROUND_CLASS else KEY_LABELS[c - 1]


def keypad_label(t, layout: KeypadLayout) -> int:
    """1-based class: the key whose square contains ``t`` (edges inclusive), else 13."""
    if not _inside(t, layout.plate_width_cm, layout.plate_height_cm):
        raise ValueError(f"position {tuple(t)} lies outside the plate")
    for c, key in enumerate(layout.keys, start=1):
        if key.contains(t):
            return c
    return BACKGROUND_CLASS


def keypad_labels(positions, layout: KeypadLayout) -> np.ndarray:
    """0-based class indices (key 1 -> 0, L -> 12) for network training."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    return np.array([keypad_label(t, layout) - 1 for t in p], dtype=np.int64)


def build_keypad_classifier(layout: KeypadLayout, dropout_p: float = 0.3) -> NetSpec:
    del layout  # any valid layout has 12 keys plus background
    return NetSpec(FREQ_DIM, KEYPAD_HIDDEN, BACKGROUND_CLASS, Head.SOFTMAX_CLASSIFIER, dropout_p)


# ---------------------------------------------------------------- kNN


class NearestNeighbors:
    """Exhaustive Euclidean k-nearest-neighbour classifier.

    Majority vote among the k nearest; vote ties go to the label of the
    nearest tied candidate, distance ties to the lowest reference index.
    """

    def __init__(self, features, labels, k: int = 1):
        self.features = np.ascontiguousarray(features, dtype=float)
        self.labels = np.asarray(labels)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ValueError("reference set must be a non-empty (n, d) array")
        if len(self.labels) != len(self.features):
            raise ValueError("one label per reference vector required")
        if k < 1 or k > len(self.features):
            raise ValueError(f"k={k} must lie in [1, {len(self.features)}]")
        self.k = k

    def __len__(self):
        return len(self.features)

    def _sq_distances(self, q: np.ndarray) -> np.ndarray:
        d = self.features - q
        return np.einsum("ij,ij->i", d, d)

    def classify(self, query):
        q = np.asarray(getattr(query, "values", query), dtype=float)
        d2 = self._sq_distances(q)
        if self.k == 1:
            return self.labels[int(np.argmin(d2))]
        order = np.argsort(d2, kind="stable")[: self.k]
        votes: dict = {}
        for rank, idx in enumerate(order):
            lab = self.labels[idx].item()
            count, first = votes.get(lab, (0, rank))
            votes[lab] = (count + 1, first)
        return max(votes.items(), key=lambda kv: (kv[1][0], -kv[1][1]))[0]

    def classify_batch(self, queries) -> np.ndarray:
        return np.array([self.classify(q) for q in np.asarray(queries, dtype=float)])


def knn_classify(query, ref_features, ref_labels, k: int = 1):
    return NearestNeighbors(ref_features, ref_labels, k).classify(query)
