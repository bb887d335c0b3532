"""Touch localization on ultrasonic guided-wave glass with small fully connected networks."""

from .dsp import Domain, FeatureVector
from .locmodel import GridSpec, KeypadLayout, ZoneIndex
from .neural import ModelCheckpoint, NetSpec, TrainConfig
from .sigsim import ChirpSpec, Finger, PlateConfig, RecordSet, TouchEvent

__all__ = [
    "ChirpSpec",
    "Domain",
    "FeatureVector",
    "Finger",
    "GridSpec",
    "KeypadLayout",
    "ModelCheckpoint",
    "NetSpec",
    "PlateConfig",
    "RecordSet",
    "TouchEvent",
    "TrainConfig",
    "ZoneIndex",
]
