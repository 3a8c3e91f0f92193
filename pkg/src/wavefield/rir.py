"""Multichannel room transfer functions from source and observation spectra.

The transfer function is the per-bin Wiener estimate
``h(f) = S_xy(f) / S_xx(f)`` with ``S_xx = E{|x|^2}`` and
``S_xy = E{conj(x) y}``, the expectations being means over STFT frames.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .stft import SpectralTensor, StftConfig

UNRELIABLE_FLOOR = 1e-12
# Longer frames than the decomposition STFT so a room tail fits in one frame.
RIR_STFT = StftConfig(4096, 2048)


@dataclass(frozen=True)
class CrossSpectra:
    """Running means of ``|x|^2`` (F,) and ``conj(x) y`` (F, M) over frames."""

    sxx: np.ndarray
    sxy: np.ndarray
    frame_count: int
    config: StftConfig

    def __post_init__(self):
        sxx = np.asarray(self.sxx, dtype=float)
        sxy = np.asarray(self.sxy, dtype=complex)
        if sxx.ndim != 1 or sxy.ndim != 2 or sxy.shape[0] != sxx.shape[0]:
            raise ValueError("sxx must be (F,) and sxy (F, M)")
        if sxx.shape[0] != self.config.num_bins:
            raise ValueError("cross-spectra bin count does not match the STFT config")
        if np.any(sxx < 0):
            raise ValueError("sxx must be non-negative")
        if self.frame_count < 0:
            raise ValueError("frame_count must be non-negative")
        object.__setattr__(self, "sxx", sxx)
        object.__setattr__(self, "sxy", sxy)

    @property
    def num_channels(self) -> int:
        return self.sxy.shape[1]

    @classmethod
    def empty(cls, num_channels: int, config: StftConfig) -> "CrossSpectra":
        return cls(np.zeros(config.num_bins), np.zeros((config.num_bins, num_channels), complex), 0, config)

    def merge(self, other: "CrossSpectra") -> "CrossSpectra":
        """Combine two accumulations as if all frames had been seen at once."""
        if other.config != self.config or other.sxy.shape != self.sxy.shape:
            raise ValueError("cannot merge cross-spectra with different dimensions")
        n = self.frame_count + other.frame_count
        if n == 0:
            return self
        a, b = self.frame_count / n, other.frame_count / n
        return CrossSpectra(a * self.sxx + b * other.sxx, a * self.sxy + b * other.sxy, n, self.config)


def accumulate(cross: Optional[CrossSpectra], x_spec: SpectralTensor, y_spec: SpectralTensor) -> CrossSpectra:
    """Fold the frames of a source/observation pair into ``cross``.

    ``cross`` may be ``None`` to start a new accumulation.
    """
    if x_spec.num_channels != 1:
        raise ValueError(f"source spectrum must have one channel, got {x_spec.num_channels}")
    if x_spec.data.shape[:2] != y_spec.data.shape[:2]:
        raise ValueError(f"source {x_spec.data.shape[:2]} and observation {y_spec.data.shape[:2]} "
                         "have different (frames, bins)")
    if x_spec.config != y_spec.config:
        raise ValueError("source and observation use different STFT configs")
    if cross is None:
        cross = CrossSpectra.empty(y_spec.num_channels, y_spec.config)
    elif cross.num_channels != y_spec.num_channels or cross.config != y_spec.config:
        raise ValueError("observation does not match the accumulated cross-spectra")
    T = x_spec.num_frames
    if T == 0:
        return cross
    x = x_spec.data[:, :, 0]
    batch = CrossSpectra((np.abs(x) ** 2).mean(axis=0),
                         (x.conj()[:, :, None] * y_spec.data).mean(axis=0), T, y_spec.config)
    return cross.merge(batch)


@dataclass(frozen=True)
class TransferFunction:
    """Per-bin multichannel response ``h`` with shape (F, M).

    ``reliable`` is False for bins that were not excited; those carry zeros.
    """

    h: np.ndarray
    reliable: np.ndarray
    config: StftConfig

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        rel = np.asarray(self.reliable, dtype=bool)
        if h.ndim != 2 or h.shape[0] != self.config.num_bins or rel.shape != (h.shape[0],):
            raise ValueError("transfer function must be (F, M) with an (F,) reliability mask")
        if not np.all(np.isfinite(h)):
            raise ValueError("transfer function must be finite")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "reliable", rel)

    @property
    def num_channels(self) -> int:
        return self.h.shape[1]


def estimate_rir(cross: CrossSpectra, eps: float = 1e-6) -> TransferFunction:
    """Regularized Wiener estimate ``S_xy / (S_xx + eps * max S_xx)``."""
    if cross.frame_count < 1:
        raise ValueError("no frames accumulated")
    peak = cross.sxx.max()
    if peak <= 0:
        raise ValueError("source has no energy: cannot estimate a transfer function")
    reliable = cross.sxx >= UNRELIABLE_FLOOR * peak
    h = cross.sxy / (cross.sxx + eps * peak)[:, None]
    h[~reliable] = 0.0
    return TransferFunction(h, reliable, cross.config)


def apply_rir(tf: TransferFunction, u_spec: SpectralTensor) -> SpectralTensor:
    """``y(t, f) = h(f) u(t, f)`` for every frame."""
    if u_spec.num_channels != 1:
        raise ValueError("source spectrum must have one channel")
    if u_spec.config != tf.config:
        raise ValueError("source spectrum and transfer function use different STFT configs")
    return SpectralTensor(u_spec.data[:, :, :1] * tf.h[None, :, :], u_spec.config)


def to_impulse_response(tf: TransferFunction, length: Optional[int] = None) -> np.ndarray:
    """Impulse responses ``(M, length)`` by inverse real FFT of ``h``."""
    n = tf.config.frame_size
    if length is None:
        length = n
    if not 1 <= length <= n:
        raise ValueError(f"length must be in 1..{n}, got {length}")
    h = np.where(tf.reliable[:, None], tf.h, 0.0)
    return np.fft.irfft(h, n=n, axis=0)[:length].T.copy()


RIR_MAGIC = b"RIR1"


class RirFileError(ValueError):
    pass


def save_transfer_function(tf: TransferFunction, path) -> None:
    """``b"RIR1"``, uint32 header length, JSON header, then (F, M) complex64."""
    header = {"version": 1, "F": tf.h.shape[0], "M": tf.num_channels, "stft": tf.config.to_json(),
              "reliable": tf.reliable.astype(int).tolist()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(tf.h, dtype="<c8").tobytes()
    Path(path).write_bytes(RIR_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load_transfer_function(path) -> TransferFunction:
    data = Path(path).read_bytes()
    if data[:4] != RIR_MAGIC or len(data) < 8:
        raise RirFileError(f"{path}: not a transfer-function file")
    (n,) = struct.unpack_from("<I", data, 4)
    try:
        h = json.loads(data[8:8 + n].decode("utf-8"))
        F, M = int(h["F"]), int(h["M"])
        cfg = StftConfig.from_json(h["stft"])
        reliable = np.asarray(h["reliable"], dtype=bool)
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise RirFileError(f"{path}: bad header: {exc}") from None
    payload = data[8 + n:]
    if len(payload) != F * M * 8:
        raise RirFileError(f"{path}: payload has {len(payload)} bytes, expected {F * M * 8}")
    hh = np.frombuffer(payload, dtype="<c8").reshape(F, M).astype(complex)
    return TransferFunction(hh, reliable, cfg)


def ir_error_db(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Normalized error ``10 log10(|est - ref|^2 / |ref|^2)`` over the reference length."""
    ref = np.asarray(reference, dtype=float)
    est = np.asarray(estimate, dtype=float)[..., :ref.shape[-1]]
    if est.shape != ref.shape:
        pad = [(0, 0)] * (ref.ndim - 1) + [(0, ref.shape[-1] - est.shape[-1])]
        est = np.pad(est, pad)
    return float(10 * math.log10(np.sum((est - ref) ** 2) / np.sum(ref ** 2)))
