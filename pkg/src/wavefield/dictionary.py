"""Device acoustic dictionaries.

A dictionary holds the total-field response of a microphone array to unit
plane waves, indexed ``[frequency][direction][microphone]``. Three sources are
supported: free-field steering vectors, the closed-form rigid-sphere
scattering solution, and externally computed tensors imported from ``.npz``.

Rigid-sphere convention
-----------------------
Spatial phase follows ``exp(-1j k . r)`` with time dependence
``exp(+1j omega t)``. An outgoing scattered wave then behaves as
``exp(-1j k r) / r``, which is the spherical Hankel function of the second
kind, ``h_n = j_n - 1j * y_n``. Swapping to the first kind would produce an
incoming scattered wave (see ``HANKEL_KIND``).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import special

from .coregeo import ArrayGeometry, Direction, FrequencyGrid, steering_tensor, unit_vectors

# 2 -> outgoing scattered field under exp(-jk.r); pinned by the radiation tests.
HANKEL_KIND = 2

MAX_KA = 40.0
TERM_TOLERANCE = 1e-10

BUILDER_IDS = {"free-field": 0, "rigid-sphere": 1, "imported": 2}
_BUILDER_NAMES = {v: k for k, v in BUILDER_IDS.items()}


class ConvergenceError(RuntimeError):
    """The truncated modal series has not converged."""


class DictionaryFileError(ValueError):
    """Base class for ``.wfd`` read failures."""


class DictionaryFormatError(DictionaryFileError):
    """Bad magic bytes or unparseable metadata."""


class DictionaryVersionError(DictionaryFileError):
    """File written by an unsupported format version."""


class DictionaryTruncatedError(DictionaryFileError):
    """File ends before the declared header, metadata or payload."""


class DictionaryDimensionError(DictionaryFileError):
    """Declared dimensions disagree with the metadata or payload."""


# ---------------------------------------------------------------------------
# Direction grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionGrid:
    directions: tuple
    scheme: str = "custom"

    def __post_init__(self):
        dirs = tuple(self.directions)
        if len(dirs) < 1:
            raise ValueError("a direction grid needs at least one direction")
        if not all(isinstance(d, Direction) for d in dirs):
            raise TypeError("directions must be Direction instances")
        object.__setattr__(self, "directions", dirs)
        if len(dirs) > 1:
            u = unit_vectors(dirs)
            # angle via atan2 of cross/dot, exact near 0
            cross = np.linalg.norm(np.cross(u[:, None, :], u[None, :, :]), axis=-1)
            dot = u @ u.T
            ang = np.arctan2(cross, dot)
            ang[np.diag_indices_from(ang)] = np.inf
            if ang.min() <= 1e-6:
                i, j = np.unravel_index(np.argmin(ang), ang.shape)
                raise ValueError(f"grid directions {i} and {j} coincide")

    def __len__(self):
        return len(self.directions)

    @property
    def units(self) -> np.ndarray:
        return unit_vectors(self.directions)

    @property
    def angles(self) -> np.ndarray:
        """``(L, 2)`` array of (azimuth, elevation) in radians."""
        return np.array([[d.azimuth, d.elevation] for d in self.directions], dtype=float)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.angles, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "azimuth_rad": self.angles[:, 0].tolist(),
                "elevation_rad": self.angles[:, 1].tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "DirectionGrid":
        dirs = [Direction(a, e) for a, e in zip(obj["azimuth_rad"], obj["elevation_rad"])]
        return cls(tuple(dirs), obj.get("scheme", "custom"))

    def nearest(self, direction: Direction) -> int:
        return int(np.argmax(self.units @ direction.unit))


def equiangular_grid(step_deg: float = 10.0) -> DirectionGrid:
    """Rings of constant elevation at ``step_deg`` spacing plus both poles.

    The default 10 degree step yields 17 rings of 36 directions and the two
    poles, 614 directions in total.
    """
    if step_deg <= 0 or 180.0 % step_deg or 360.0 % step_deg:
        raise ValueError("step_deg must divide both 180 and 360")
    n_el = int(round(180.0 / step_deg))
    n_az = int(round(360.0 / step_deg))
    dirs = [Direction(0.0, 0.0)]
    for i in range(1, n_el):
        el = math.radians(i * step_deg)
        dirs.extend(Direction(math.radians(j * step_deg), el) for j in range(n_az))
    dirs.append(Direction(0.0, math.pi))
    return DirectionGrid(tuple(dirs), "equiangular")


# ---------------------------------------------------------------------------
# Rigid-sphere modal solution
# ---------------------------------------------------------------------------


def default_num_terms(ka: float) -> int:
    """Series length ``ceil(ka + 10 ka^(1/3)) + 10``."""
    ka = float(ka)
    return int(math.ceil(ka + 10.0 * ka ** (1.0 / 3.0))) + 10


def spherical_hankel(n: np.ndarray, x: float, derivative: bool = False) -> np.ndarray:
    """Spherical Hankel function of kind ``HANKEL_KIND`` (or its derivative)."""
    j = special.spherical_jn(n, x, derivative=derivative)
    y = special.spherical_yn(n, x, derivative=derivative)
    if HANKEL_KIND == 2:
        return j - 1j * y
    return j + 1j * y


def legendre_table(n_terms: int, x) -> np.ndarray:
    """``P_0 .. P_{n_terms-1}`` evaluated at ``x``; shape ``(n_terms,) + x.shape``."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n_terms,) + x.shape)
    out[0] = 1.0
    if n_terms > 1:
        out[1] = x
    for n in range(1, n_terms - 1):
        out[n + 1] = ((2 * n + 1) * x * out[n] - n * out[n - 1]) / (n + 1)
    return out


def modal_coefficients(ka: float, n_terms: int) -> np.ndarray:
    """Surface-pressure coefficients of a unit plane wave on a rigid sphere.

    Uses the Wronskian form ``j_n - j_n'/h_n' h_n = -1j / (ka^2 h_n')`` (for
    the second-kind Hankel), which avoids the cancellation of the direct form.
    Orders where ``h_n'`` overflows contribute exactly zero.
    """
    n = np.arange(n_terms)
    with np.errstate(all="ignore"):
        hp = spherical_hankel(n, ka, derivative=True)
        wronskian = -1j if HANKEL_KIND == 2 else 1j
        bracket = wronskian / (ka * ka * hp)
    bracket[~np.isfinite(bracket)] = 0.0
    return (1j ** n) * (2 * n + 1) * bracket


def sphere_surface_pressure(ka: float, cos_gamma, n_terms: Optional[int] = None, p0: float = 1.0):
    """Total pressure on a rigid sphere for a plane wave.

    Parameters
    ----------
    ka : float
        Wavenumber times sphere radius.
    cos_gamma : float or ndarray
        Cosine of the angle between the observation point and the arrival
        direction of the wave.
    n_terms : int, optional
        Series length; defaults to :func:`default_num_terms`.
    p0 : float
        Incident amplitude.

    Raises
    ------
    ConvergenceError
        If the last retained term is not below ``TERM_TOLERANCE``.
    """
    ka = float(ka)
    if not math.isfinite(ka) or ka < 0:
        raise ValueError(f"ka must be finite and non-negative, got {ka}")
    cg = np.asarray(cos_gamma, dtype=float)
    if np.any(np.abs(cg) > 1.0 + 1e-12) or not np.all(np.isfinite(cg)):
        raise ValueError("cos_gamma must lie in [-1, 1]")
    cg = np.clip(cg, -1.0, 1.0)
    if ka == 0.0:
        out = np.full(cg.shape, complex(p0))
        return complex(out) if out.ndim == 0 else out
    if n_terms is None:
        n_terms = default_num_terms(ka)
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    coef = modal_coefficients(ka, n_terms)
    if abs(coef[-1]) >= TERM_TOLERANCE:
        raise ConvergenceError(
            f"series not converged at ka={ka:g}: |term {n_terms - 1}| = {abs(coef[-1]):.3g}; "
            f"use at least default_num_terms(ka)={default_num_terms(ka)} terms"
        )
    out = p0 * np.tensordot(coef, legendre_table(n_terms, cg), axes=1)
    return complex(out) if out.ndim == 0 else out


def point_source_coefficients(k, radius: float, source_distance: float, n_terms: int, hankel_deriv=None) -> np.ndarray:
    """Legendre coefficients ``(len(k), n_terms)`` of a monopole on a rigid sphere.

    ``hankel_deriv`` may carry precomputed ``h_n'(k * radius)`` of shape
    ``(len(k), n_terms)`` when many sources share one frequency grid.
    """
    k = np.asarray(k, dtype=float).reshape(-1, 1)
    a, rs = float(radius), float(source_distance)
    if rs <= a:
        raise ValueError("source must lie outside the sphere")
    n = np.arange(n_terms)
    with np.errstate(all="ignore"):
        if hankel_deriv is None:
            hankel_deriv = spherical_hankel(n, k * a, derivative=True)
        coef = -k / (4 * math.pi * (k * a) ** 2) * (2 * n + 1) * spherical_hankel(n, k * rs) / hankel_deriv
    coef[~np.isfinite(coef)] = 0.0
    static = k[:, 0] == 0.0
    if np.any(static):
        coef[static] = (2 * n + 1) / (n + 1) * a ** n / (4 * math.pi * rs ** (n + 1))
    return coef


def sphere_point_source_pressure(k, radius: float, source_distance: float, cos_gamma, n_terms: Optional[int] = None):
    """Total pressure on a rigid sphere due to a unit monopole.

    The monopole has free-field pressure ``exp(-1j k R) / (4 pi R)``. ``k`` may
    be an array of wavenumbers; the result then has shape
    ``k.shape + cos_gamma.shape``.
    """
    k = np.asarray(k, dtype=float)
    cg = np.clip(np.asarray(cos_gamma, dtype=float), -1.0, 1.0)
    if n_terms is None:
        n_terms = default_num_terms(float(k.max(initial=0.0)) * radius)
    coef = point_source_coefficients(k, radius, source_distance, n_terms)
    out = np.tensordot(coef, legendre_table(n_terms, cg), axes=1)
    return out.reshape(k.shape + cg.shape)


@dataclass(frozen=True)
class SphereSpec:
    radius: float
    mic_directions: tuple
    truncation_rule: Callable[[float], int] = field(default=default_num_terms, compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ValueError("radius must be positive")
        dirs = tuple(self.mic_directions)
        if not dirs:
            raise ValueError("at least one microphone direction is required")
        object.__setattr__(self, "mic_directions", dirs)

    @property
    def positions(self) -> np.ndarray:
        return self.radius * unit_vectors(self.mic_directions)

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.positions)

    @classmethod
    def from_geometry(cls, geom: ArrayGeometry, radius: Optional[float] = None) -> "SphereSpec":
        """Project microphone positions radially onto a sphere."""
        norms = np.linalg.norm(geom.positions, axis=1)
        if np.any(norms == 0):
            raise ValueError("a microphone at the sphere center has no surface direction")
        if radius is None:
            radius = float(np.mean(norms))
        return cls(radius, tuple(Direction.from_vector(p) for p in geom.positions))


# Capsule layout of a 32-channel spherical array (colatitude, azimuth in degrees).
EM32_ANGLES_DEG = (
    (69, 0), (90, 32), (111, 0), (90, 328), (32, 0), (55, 45), (90, 69), (125, 45),
    (148, 0), (125, 315), (90, 291), (55, 315), (21, 91), (58, 90), (121, 90), (159, 89),
    (69, 180), (90, 212), (111, 180), (90, 148), (32, 180), (55, 225), (90, 249), (125, 225),
    (148, 180), (125, 135), (90, 111), (55, 135), (21, 269), (58, 270), (122, 270), (159, 271),
)


def em32_sphere(radius: float = 0.042) -> SphereSpec:
    """32-microphone rigid sphere with the common em32 capsule layout."""
    dirs = tuple(Direction.from_degrees(az, el) for el, az in EM32_ANGLES_DEG)
    return SphereSpec(radius, dirs)


# ---------------------------------------------------------------------------
# Dictionary container and builders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceDictionary:
    """Array response tensor with shape ``(F, L, M)``, stored as complex64.

    ``bins`` are indices into the one-sided FFT grid of ``freqs``.
    """

    geometry: ArrayGeometry
    grid: DirectionGrid
    freqs: FrequencyGrid
    bins: np.ndarray
    tensor: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.int64).reshape(-1)
        if bins.size == 0:
            raise ValueError("dictionary needs at least one frequency bin")
        if np.any(bins < 0) or np.any(bins >= self.freqs.num_bins) or np.any(np.diff(bins) <= 0):
            raise ValueError("bins must be strictly increasing indices into the FFT grid")
        tensor = np.asarray(self.tensor, dtype=np.complex64)
        expected = (bins.size, len(self.grid), self.geometry.num_mics)
        if tensor.shape != expected:
            raise ValueError(f"tensor shape {tensor.shape} does not match (F, L, M) = {expected}")
        if not np.all(np.isfinite(tensor)):
            raise ValueError("dictionary entries must be finite")
        bins.setflags(write=False)
        tensor.setflags(write=False)
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "tensor", tensor)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def num_mics(self) -> int:
        return self.tensor.shape[2]

    @property
    def bin_freqs(self) -> np.ndarray:
        return self.freqs.bins[self.bins]

    @property
    def builder(self) -> str:
        return self.metadata.get("builder", "imported")

    def bin_slot(self, fft_bin: int) -> int:
        """Position of FFT bin ``fft_bin`` within the tensor, or -1."""
        i = int(np.searchsorted(self.bins, fft_bin))
        if i < self.bins.size and self.bins[i] == fft_bin:
            return i
        return -1

    def atoms(self, fft_bin: int) -> np.ndarray:
        """``(M, L)`` matrix whose columns are the atoms at ``fft_bin``."""
        slot = self.bin_slot(fft_bin)
        if slot < 0:
            raise KeyError(f"bin {fft_bin} is not stored in this dictionary")
        return self.tensor[slot].T


def default_bins(freqs: FrequencyGrid, max_freq: float = 8000.0) -> np.ndarray:
    return np.flatnonzero(freqs.bins <= max_freq + 1e-9)


def build_free_field(geom: ArrayGeometry, grid: DirectionGrid, freqs: FrequencyGrid, bins=None, name: str = "free-field") -> DeviceDictionary:
    """Steering-vector dictionary of an array without scattering body."""
    bins = default_bins(freqs) if bins is None else np.asarray(bins)
    tensor = steering_tensor(geom.positions, freqs.bins[bins], grid.units, freqs.speed_of_sound)
    meta = {"device": name, "builder": "free-field", "p0": 1.0, "radius": 0.0}
    return DeviceDictionary(geom, grid, freqs, bins, tensor, meta)


def build_rigid_sphere(spec: SphereSpec, grid: DirectionGrid, freqs: FrequencyGrid, bins=None,
                       name: str = "rigid-sphere", jobs: int = 1) -> DeviceDictionary:
    """Dictionary of microphones on the surface of a rigid sphere.

    Frequencies are filled independently, optionally on ``jobs`` threads.
    """
    bins = default_bins(freqs) if bins is None else np.asarray(bins)
    ka = freqs.wavenumber(freqs.bins[bins]) * spec.radius
    if np.any(ka > MAX_KA):
        raise ValueError(f"ka up to {ka.max():.2f} exceeds the supported maximum {MAX_KA}")
    cos_gamma = np.clip(grid.units @ unit_vectors(spec.mic_directions).T, -1.0, 1.0)  # (L, M)
    n_max = max(spec.truncation_rule(float(x)) for x in ka)
    legendre = legendre_table(n_max, cos_gamma).reshape(n_max, -1)
    tensor = np.empty((bins.size, len(grid), len(spec.mic_directions)), dtype=np.complex64)

    def fill(i: int):
        if ka[i] == 0.0:
            tensor[i] = 1.0
            return
        n = spec.truncation_rule(float(ka[i]))
        coef = modal_coefficients(float(ka[i]), n)
        if abs(coef[-1]) >= TERM_TOLERANCE:
            raise ConvergenceError(f"series not converged at ka={ka[i]:g} with {n} terms")
        tensor[i] = (coef @ legendre[:n]).reshape(tensor.shape[1:])

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(fill, range(bins.size)))
    else:
        for i in range(bins.size):
            fill(i)
    meta = {"device": name, "builder": "rigid-sphere", "p0": 1.0, "radius": float(spec.radius)}
    return DeviceDictionary(spec.geometry, grid, freqs, bins, tensor, meta)


def from_tensor(geom: ArrayGeometry, grid: DirectionGrid, freqs: FrequencyGrid, bins, tensor, name: str = "imported") -> DeviceDictionary:
    meta = {"device": name, "builder": "imported", "p0": 1.0, "radius": 0.0}
    return DeviceDictionary(geom, grid, freqs, bins, tensor, meta)


def import_npz(path, name: Optional[str] = None) -> DeviceDictionary:
    """Load an externally computed dictionary (e.g. from a BEM solver).

    Expected arrays: ``tensor`` (F, L, M) complex, ``positions_m`` (M, 3),
    ``azimuth_rad`` (L,), ``elevation_rad`` (L,), ``bins`` (F,) integer FFT bin
    indices, and scalars ``sample_rate`` and ``fft_size``. ``speed_of_sound``
    is optional.
    """
    with np.load(path) as z:
        geom = ArrayGeometry(z["positions_m"])
        grid = DirectionGrid(tuple(Direction(a, e) for a, e in zip(z["azimuth_rad"], z["elevation_rad"])))
        c = float(z["speed_of_sound"]) if "speed_of_sound" in z else 343.0
        freqs = FrequencyGrid(float(z["sample_rate"]), int(z["fft_size"]), c)
        return from_tensor(geom, grid, freqs, z["bins"], z["tensor"], name or Path(path).stem)


# ---------------------------------------------------------------------------
# .wfd files
# ---------------------------------------------------------------------------

WFD_MAGIC = b"WFD1"
# M, L, F, sample_rate, fft_size, radius, builder id, metadata length
_WFD_HEADER = struct.Struct("<IIIdIdII")


def save_dictionary(d: DeviceDictionary, path) -> None:
    meta = {
        "geometry": d.geometry.to_json(),
        "grid": d.grid.to_json(),
        "bins": d.bins.tolist(),
        "speed_of_sound": d.freqs.speed_of_sound,
        "metadata": d.metadata,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    F, L, M = d.shape
    header = _WFD_HEADER.pack(M, L, F, float(d.freqs.sample_rate), d.freqs.fft_size,
                              float(d.metadata.get("radius", 0.0)),
                              BUILDER_IDS.get(d.builder, BUILDER_IDS["imported"]), len(blob))
    with open(path, "wb") as fh:
        fh.write(WFD_MAGIC)
        fh.write(header)
        fh.write(blob)
        fh.write(np.ascontiguousarray(d.tensor, dtype="<c8").tobytes())


def load_dictionary(path) -> DeviceDictionary:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DictionaryTruncatedError(f"{path}: file too short for magic bytes")
    magic = data[:4]
    if magic != WFD_MAGIC:
        if magic[:3] == WFD_MAGIC[:3]:
            raise DictionaryVersionError(f"{path}: unsupported version {magic[3:]!r}")
        raise DictionaryFormatError(f"{path}: not a dictionary file (magic {magic!r})")
    off = 4
    if len(data) < off + _WFD_HEADER.size:
        raise DictionaryTruncatedError(f"{path}: truncated header")
    M, L, F, fs, nfft, radius, builder_id, meta_len = _WFD_HEADER.unpack_from(data, off)
    off += _WFD_HEADER.size
    if len(data) < off + meta_len:
        raise DictionaryTruncatedError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DictionaryFormatError(f"{path}: bad metadata: {exc}") from None
    off += meta_len
    payload = data[off:]
    expected = F * L * M * 8
    if len(payload) < expected:
        raise DictionaryTruncatedError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise DictionaryDimensionError(f"{path}: payload has {len(payload) - expected} trailing bytes")
    try:
        geom = ArrayGeometry.from_json(meta["geometry"])
        grid = DirectionGrid.from_json(meta["grid"])
        bins = np.asarray(meta["bins"], dtype=np.int64)
        extra = meta.get("metadata", {})
        c = float(meta.get("speed_of_sound", 343.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise DictionaryFormatError(f"{path}: bad metadata: {exc}") from None
    if geom.num_mics != M or len(grid) != L or bins.size != F:
        raise DictionaryDimensionError(
            f"{path}: header (M={M}, L={L}, F={F}) disagrees with metadata "
            f"(M={geom.num_mics}, L={len(grid)}, F={bins.size})"
        )
    if builder_id not in _BUILDER_NAMES:
        raise DictionaryFormatError(f"{path}: unknown builder id {builder_id}")
    tensor = np.frombuffer(payload, dtype="<c8").reshape(F, L, M).astype(np.complex64)
    return DeviceDictionary(geom, grid, FrequencyGrid(fs, nfft, c), bins, tensor, extra)
