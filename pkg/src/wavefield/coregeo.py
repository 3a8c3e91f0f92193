"""Geometric and spectral primitives shared by the rest of the package.

Directions are always stored as *arrival* directions, i.e. the unit vector
pointing from the array towards the (far-field) source. A plane wave arriving
from ``u`` propagates along ``-u``, so its spatial phase term is
``exp(-1j * k * (-u) . r) = exp(+1j * k * u . r)``. The time convention is
``exp(+1j * omega * t)``, hence a positive phase is a phase lead: microphones
closer to the source lead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SPEED_OF_SOUND = 343.0  # m/s

_TWO_PI = 2.0 * math.pi


def _check_finite(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return arr


@dataclass(frozen=True)
class Direction:
    """Arrival direction in polar coordinates.

    ``elevation`` is the polar angle measured from +z, in ``[0, pi]``.
    Azimuth values outside ``[0, 2*pi)`` are wrapped.
    """

    azimuth: float
    elevation: float

    def __post_init__(self):
        az = float(_check_finite("azimuth", self.azimuth))
        el = float(_check_finite("elevation", self.elevation))
        if not 0.0 <= el <= math.pi:
            raise ValueError(f"elevation must lie in [0, pi], got {el}")
        az = az % _TWO_PI
        if az >= _TWO_PI:  # -tiny % 2pi can round up to 2pi
            az = 0.0
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)

    @property
    def unit(self) -> np.ndarray:
        se = math.sin(self.elevation)
        return np.array(
            [se * math.cos(self.azimuth), se * math.sin(self.azimuth), math.cos(self.elevation)]
        )

    @classmethod
    def from_vector(cls, v) -> "Direction":
        v = _check_finite("vector", v).reshape(3)
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ValueError("cannot take the direction of a zero vector")
        x, y, z = v / n
        return cls(math.atan2(y, x), math.acos(max(-1.0, min(1.0, z))))

    @classmethod
    def from_degrees(cls, azimuth: float, elevation: float) -> "Direction":
        return cls(math.radians(azimuth), math.radians(elevation))


def unit_vectors(directions: Sequence[Direction]) -> np.ndarray:
    """Stack the unit vectors of ``directions`` into an ``(L, 3)`` array."""
    az = np.array([d.azimuth for d in directions], dtype=float)
    el = np.array([d.elevation for d in directions], dtype=float)
    return np.stack([np.sin(el) * np.cos(az), np.sin(el) * np.sin(az), np.cos(el)], axis=-1)


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in meters relative to the array origin."""

    positions: np.ndarray
    labels: Optional[tuple] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1 and pos.size == 3:
            pos = pos.reshape(1, 3)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be an (M, 3) array with M >= 1, got shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if pos.shape[0] > 1:
            d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
            d[np.diag_indices_from(d)] = np.inf
            if d.min() <= 1e-9:
                raise ValueError("microphone positions must be pairwise distinct")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != pos.shape[0]:
                raise ValueError("labels must have one entry per microphone")
            object.__setattr__(self, "labels", labels)

    @property
    def num_mics(self) -> int:
        return self.positions.shape[0]

    def to_json(self) -> dict:
        out = {"positions_m": self.positions.tolist()}
        if self.labels is not None:
            out["labels"] = list(self.labels)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ArrayGeometry":
        try:
            positions = obj["positions_m"]
        except (KeyError, TypeError):
            raise ValueError("geometry JSON needs a 'positions_m' list") from None
        return cls(np.asarray(positions, dtype=float), obj.get("labels"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "ArrayGeometry":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class FrequencyGrid:
    """One-sided DFT bin grid, ``f_k = k * sample_rate / fft_size``."""

    sample_rate: float
    fft_size: int
    speed_of_sound: float = SPEED_OF_SOUND
    bins: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.sample_rate) and self.sample_rate > 0):
            raise ValueError("sample_rate must be positive")
        if int(self.fft_size) != self.fft_size or self.fft_size < 2 or self.fft_size % 2:
            raise ValueError(f"fft_size must be an even integer >= 2, got {self.fft_size}")
        if not (math.isfinite(self.speed_of_sound) and self.speed_of_sound > 0):
            raise ValueError("speed_of_sound must be positive")
        object.__setattr__(self, "fft_size", int(self.fft_size))
        bins = np.arange(self.num_bins) * (self.sample_rate / self.fft_size)
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def wavenumber(self, freq):
        return _TWO_PI * np.asarray(freq, dtype=float) / self.speed_of_sound

    def bin_of(self, freq: float) -> int:
        """Nearest bin index for ``freq`` in Hz."""
        return int(round(freq * self.fft_size / self.sample_rate))


def plane_wave_pressure(p0: float, freq: float, grid: FrequencyGrid, direction: Direction, pos) -> complex:
    """Complex pressure of a unit plane wave arriving from ``direction`` at ``pos``."""
    p0 = float(_check_finite("p0", p0))
    freq = float(_check_finite("freq", freq))
    if freq < 0:
        raise ValueError("freq must be non-negative")
    pos = _check_finite("pos", pos).reshape(3)
    k = float(grid.wavenumber(freq))
    return complex(p0 * np.exp(1j * k * float(direction.unit @ pos)))


def steering_vector(geom: ArrayGeometry, freq: float, grid: FrequencyGrid, direction: Direction, p0: float = 1.0) -> np.ndarray:
    """Free-field array response, one entry per microphone."""
    p0 = float(_check_finite("p0", p0))
    freq = float(_check_finite("freq", freq))
    if freq < 0:
        raise ValueError("freq must be non-negative")
    k = float(grid.wavenumber(freq))
    return p0 * np.exp(1j * k * (geom.positions @ direction.unit))


def steering_tensor(positions: np.ndarray, freqs: np.ndarray, units: np.ndarray, speed_of_sound: float) -> np.ndarray:
    """Vectorized steering vectors with shape ``(F, L, M)``."""
    k = _TWO_PI * np.asarray(freqs, dtype=float) / speed_of_sound
    proj = units @ np.asarray(positions, dtype=float).T  # (L, M)
    return np.exp(1j * k[:, None, None] * proj[None, :, :])
