"""Reference captures for testing: shoebox image sources and exact scenes.

The image-source simulator is deliberately simple (frequency-independent real
reflection coefficients, point microphones). It serves as ground truth for the
decomposition and RIR pipelines, not as a room model in its own right.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .coregeo import ArrayGeometry, SPEED_OF_SOUND, unit_vectors
from .dictionary import (DeviceDictionary, DirectionGrid, SphereSpec, spherical_hankel, default_num_terms,
                         legendre_table, point_source_coefficients)
from .stft import SpectralTensor, StftConfig

SINC_TAPS = 32
MIN_DISTANCE = 1e-3


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room with walls ordered ``x=0, x=Lx, y=0, y=Ly, z=0, z=Lz``."""

    dimensions: tuple
    reflection: tuple
    max_order: int
    source_pos: tuple
    receiver_origin: tuple
    sample_rate: float = 16000.0
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=float).reshape(-1)
        refl = np.asarray(self.reflection, dtype=float).reshape(-1)
        if refl.size == 1:
            refl = np.repeat(refl, 6)
        src = np.asarray(self.source_pos, dtype=float).reshape(-1)
        rcv = np.asarray(self.receiver_origin, dtype=float).reshape(-1)
        if dims.size != 3 or np.any(dims <= 0):
            raise ValueError("dimensions must be three positive lengths")
        if refl.size != 6 or np.any(refl < 0) or np.any(refl > 1):
            raise ValueError("need six reflection coefficients in [0, 1]")
        if int(self.max_order) != self.max_order or self.max_order < 0:
            raise ValueError("max_order must be a non-negative integer")
        for name, p in (("source", src), ("receiver", rcv)):
            if p.size != 3 or not np.all((p > 0) & (p < dims)):
                raise ValueError(f"{name} must lie strictly inside the room")
        if not (self.sample_rate > 0 and self.speed_of_sound > 0):
            raise ValueError("sample_rate and speed_of_sound must be positive")
        object.__setattr__(self, "dimensions", tuple(dims))
        object.__setattr__(self, "reflection", tuple(refl))
        object.__setattr__(self, "max_order", int(self.max_order))
        object.__setattr__(self, "source_pos", tuple(src))
        object.__setattr__(self, "receiver_origin", tuple(rcv))

    def to_json(self) -> dict:
        return {"dimensions_m": list(self.dimensions), "reflection": list(self.reflection),
                "max_order": self.max_order, "source_m": list(self.source_pos),
                "receiver_m": list(self.receiver_origin), "sample_rate": self.sample_rate,
                "speed_of_sound": self.speed_of_sound}

    @classmethod
    def from_json(cls, obj: dict) -> "RoomSpec":
        try:
            return cls(tuple(obj["dimensions_m"]), tuple(np.atleast_1d(obj["reflection"])), obj["max_order"],
                       tuple(obj["source_m"]), tuple(obj["receiver_m"]),
                       float(obj.get("sample_rate", 16000.0)), float(obj.get("speed_of_sound", SPEED_OF_SOUND)))
        except KeyError as exc:
            raise ValueError(f"room JSON is missing {exc}") from None

    @classmethod
    def load(cls, path) -> "RoomSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass(frozen=True)
class ImageSources:
    positions: np.ndarray   # (N, 3)
    amplitudes: np.ndarray  # (N,)
    orders: np.ndarray      # (N,)

    def __len__(self):
        return self.positions.shape[0]


def image_sources(room: RoomSpec) -> ImageSources:
    """All shoebox images up to ``room.max_order`` reflections.

    Along each axis an image is labelled by ``(n, q)``: its coordinate is
    ``(1 - 2q) s + 2 n L``, having hit the wall at 0 ``|n - q|`` times and the
    wall at ``L`` ``|n|`` times. Sorted by order, then by lattice label.
    """
    N = room.max_order
    src = np.asarray(room.source_pos)
    dims = np.asarray(room.dimensions)
    beta = np.asarray(room.reflection).reshape(3, 2)
    per_axis = []
    for ax in range(3):
        opts = []
        for n in range(-N, N + 1):
            for q in (0, 1):
                hits0, hits1 = abs(n - q), abs(n)
                if hits0 + hits1 <= N:
                    coord = (1 - 2 * q) * src[ax] + 2 * n * dims[ax]
                    amp = beta[ax, 0] ** hits0 * beta[ax, 1] ** hits1
                    opts.append((hits0 + hits1, (n, q), coord, amp))
        per_axis.append(opts)
    rows = []
    for combo in itertools.product(*per_axis):
        order = sum(c[0] for c in combo)
        if order <= N:
            label = tuple(c[1] for c in combo)
            rows.append((order, label, [c[2] for c in combo], math.prod(c[3] for c in combo)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return ImageSources(np.array([r[2] for r in rows], dtype=float), np.array([r[3] for r in rows], dtype=float),
                        np.array([r[0] for r in rows], dtype=np.int64))


def fractional_delay_kernel(delay: float, taps: int = SINC_TAPS):
    """Hann-windowed sinc for a delay in samples.

    Returns ``(start, kernel)``: the kernel's first tap sits at sample ``start``.
    """
    base = int(math.floor(delay))
    half = taps // 2
    m = np.arange(base - half + 1, base + half + 1)
    x = m - delay
    win = 0.5 * (1.0 + np.cos(np.pi * x / half))
    win[np.abs(x) > half] = 0.0
    return int(m[0]), np.sinc(x) * win


def _mic_positions(room: RoomSpec, positions: np.ndarray) -> np.ndarray:
    mics = np.asarray(room.receiver_origin) + positions
    dims = np.asarray(room.dimensions)
    if not np.all((mics > 0) & (mics < dims)):
        raise ValueError("array extends outside the room")
    return mics


def room_impulse_responses(room: RoomSpec, geom: ArrayGeometry, length: Optional[int] = None) -> np.ndarray:
    """Free-field image-source impulse responses, shape ``(length, M)``."""
    imgs = image_sources(room)
    mics = _mic_positions(room, geom.positions)
    dist = np.linalg.norm(imgs.positions[:, None, :] - mics[None, :, :], axis=-1)  # (N, M)
    if dist.min() < MIN_DISTANCE:
        raise ValueError("an image source coincides with a microphone")
    delays = dist / room.speed_of_sound * room.sample_rate
    if length is None:
        length = int(math.ceil(delays.max())) + SINC_TAPS
    ir = np.zeros((length, geom.num_mics))
    gains = imgs.amplitudes[:, None] / (4 * math.pi * dist)
    for i, m in itertools.product(range(len(imgs)), range(geom.num_mics)):
        start, kern = fractional_delay_kernel(delays[i, m])
        lo, hi = max(start, 0), min(start + kern.size, length)
        if lo < hi:
            ir[lo:hi, m] += gains[i, m] * kern[lo - start:hi - start]
    return ir


def simulate_capture(room: RoomSpec, geom: ArrayGeometry, source, length: Optional[int] = None) -> np.ndarray:
    """Free-field array capture ``(samples, M)`` of ``source`` played in ``room``.

    Each image contributes ``amplitude / (4 pi d)`` times the source delayed by
    ``d / c`` (band-limited fractional delay). The output has
    ``len(source) + len(ir) - 1`` samples unless ``length`` is given.
    """
    src = np.asarray(source, dtype=float).reshape(-1)
    ir = room_impulse_responses(room, geom)
    out = fftconvolve(src[:, None], ir, axes=0)
    if length is not None:
        out = out[:length] if out.shape[0] >= length else np.pad(out, ((0, length - out.shape[0]), (0, 0)))
    return out


def sphere_transfer_functions(room: RoomSpec, sphere: SphereSpec, n_fft: int) -> np.ndarray:
    """Exact rigid-sphere responses to every image source, shape ``(n_fft//2+1, M)``.

    Each image is a monopole of strength ``amplitude``; scattering by the
    sphere is the full modal series for a point source, so curvature of
    nearby image wavefronts is included.
    """
    imgs = image_sources(room)
    center = np.asarray(room.receiver_origin)
    _mic_positions(room, sphere.positions)
    mic_units = unit_vectors(sphere.mic_directions)
    k = 2 * math.pi * np.fft.rfftfreq(n_fft, 1.0 / room.sample_rate) / room.speed_of_sound
    H = np.zeros((k.size, len(sphere.mic_directions)), dtype=complex)
    n_terms = default_num_terms(float(k.max()) * sphere.radius)
    with np.errstate(all="ignore"):
        hp = spherical_hankel(np.arange(n_terms), k[:, None] * sphere.radius, derivative=True)
    for pos, amp in zip(imgs.positions, imgs.amplitudes):
        if amp == 0.0:
            continue
        rel = pos - center
        rs = float(np.linalg.norm(rel))
        if rs - sphere.radius < MIN_DISTANCE:
            raise ValueError("an image source touches the sphere")
        coef = point_source_coefficients(k, sphere.radius, rs, n_terms, hp)
        H += amp * (coef @ legendre_table(n_terms, mic_units @ (rel / rs)))
    return H


def simulate_sphere_capture(room: RoomSpec, sphere: SphereSpec, source, length: Optional[int] = None) -> np.ndarray:
    """Capture of a rigid-sphere array centred at ``room.receiver_origin``.

    Computed in the frequency domain with enough zero padding for the
    convolution to be linear.
    """
    src = np.asarray(source, dtype=float).reshape(-1)
    imgs = image_sources(room)
    far = np.linalg.norm(imgs.positions - np.asarray(room.receiver_origin), axis=1).max()
    tail = int(math.ceil(far / room.speed_of_sound * room.sample_rate)) + SINC_TAPS
    full = src.size + tail
    n_fft = 1 << int(math.ceil(math.log2(full)))
    H = sphere_transfer_functions(room, sphere, n_fft)
    out = np.fft.irfft(np.fft.rfft(src, n_fft)[:, None] * H, n=n_fft, axis=0)[:full]
    if length is not None:
        out = out[:length] if out.shape[0] >= length else np.pad(out, ((0, length - out.shape[0]), (0, 0)))
    return out


# ---------------------------------------------------------------------------
# Dictionary-exact scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthScene:
    """Known plane-wave content per cell: ``indices``/``weights`` are (T, F, K), -1 padded."""

    indices: np.ndarray
    weights: np.ndarray
    grid_size: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=complex)
        if idx.ndim != 3 or idx.shape != w.shape:
            raise ValueError("indices and weights must share a (T, F, K) shape")
        if np.any(idx >= self.grid_size) or np.any(idx < -1):
            raise ValueError("direction index out of range")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    def cell(self, t: int, f: int):
        sel = self.indices[t, f] >= 0
        return self.indices[t, f][sel], self.weights[t, f][sel]


def generate_scene(truth: GroundTruthScene, d: DeviceDictionary, cfg: StftConfig) -> SpectralTensor:
    """Spectra whose exact decomposition is ``truth``."""
    if truth.grid_size != len(d.grid):
        raise ValueError("scene and dictionary grids differ in size")
    T, F, _ = truth.indices.shape
    if F != cfg.num_bins:
        raise ValueError("scene bin count does not match the STFT config")
    out = np.zeros((T, F, d.num_mics), dtype=complex)
    for f in np.flatnonzero((truth.indices >= 0).any(axis=(0, 2))):
        slot = d.bin_slot(int(f))
        if slot < 0:
            raise ValueError(f"dictionary has no atoms for bin {f}")
        atoms = d.tensor[slot].astype(complex)  # (L, M)
        for t in range(T):
            idx, w = truth.cell(t, f)
            if idx.size:
                out[t, f] = w @ atoms[idx]
    return SpectralTensor(out, cfg)


def sample_support(rng: np.random.Generator, grid: DirectionGrid, k: int, min_separation_deg: float,
                   max_tries: int = 1000) -> np.ndarray:
    """Draw ``k`` distinct grid indices with pairwise separation >= ``min_separation_deg``."""
    units = grid.units
    cos_max = math.cos(math.radians(min_separation_deg))
    for _ in range(max_tries):
        chosen = []
        for cand in rng.permutation(len(grid)):
            if all(units[cand] @ units[c] <= cos_max + 1e-12 for c in chosen):
                chosen.append(int(cand))
                if len(chosen) == k:
                    return np.array(chosen)
    raise ValueError(f"could not place {k} directions {min_separation_deg} degrees apart")


def random_scene(rng: np.random.Generator, grid: DirectionGrid, num_frames: int, num_bins: int, bins: Sequence[int],
                 k_range=(1, 10), min_separation_deg: float = 30.0, magnitude_range=(0.5, 1.0),
                 shared_support: bool = True) -> GroundTruthScene:
    """Random sparse scene on the given FFT ``bins``.

    With ``shared_support`` one support (of random size in ``k_range``) is
    drawn per scene and reused in every cell; weights are drawn per cell with
    uniform magnitude in ``magnitude_range`` and uniform phase.
    """
    kmax = k_range[1]
    idx = np.full((num_frames, num_bins, kmax), -1, dtype=np.int64)
    w = np.zeros(idx.shape, dtype=complex)
    support = None
    if shared_support:
        support = sample_support(rng, grid, int(rng.integers(k_range[0], k_range[1] + 1)), min_separation_deg)
    for t in range(num_frames):
        for f in bins:
            s = support if shared_support else sample_support(
                rng, grid, int(rng.integers(k_range[0], k_range[1] + 1)), min_separation_deg)
            mag = rng.uniform(*magnitude_range, size=s.size)
            idx[t, f, :s.size] = s
            w[t, f, :s.size] = mag * np.exp(2j * np.pi * rng.uniform(size=s.size))
    return GroundTruthScene(idx, w, len(grid))
