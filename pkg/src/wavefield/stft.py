"""Multichannel STFT analysis / weighted overlap-add synthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window


@dataclass(frozen=True)
class StftConfig:
    frame_size: int = 1024
    hop: int = 512
    window: str = "hann"
    sample_rate: float = 16000.0

    def __post_init__(self):
        if self.frame_size < 2 or self.frame_size % 2:
            raise ValueError("frame_size must be even and >= 2")
        if self.hop < 1 or self.frame_size % self.hop:
            raise ValueError("hop must divide frame_size")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        w = self.analysis_window()
        ola = w.reshape(-1, self.hop).sum(axis=0)
        if np.ptp(ola) > 1e-10 * ola.max():
            raise ValueError(f"hann window is not COLA at hop {self.hop}")

    @property
    def num_bins(self) -> int:
        return self.frame_size // 2 + 1

    @property
    def bin_freqs(self) -> np.ndarray:
        return np.arange(self.num_bins) * self.sample_rate / self.frame_size

    def analysis_window(self) -> np.ndarray:
        # periodic hann: exact COLA for hop = frame_size / (2q)
        return get_window(self.window, self.frame_size, fftbins=True)

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_size:
            return 0
        return 1 + (num_samples - self.frame_size) // self.hop

    def signal_length(self, num_frames: int) -> int:
        return (num_frames - 1) * self.hop + self.frame_size

    def to_json(self) -> dict:
        return {"frame_size": self.frame_size, "hop": self.hop, "window": self.window,
                "sample_rate": self.sample_rate}

    @classmethod
    def from_json(cls, obj: dict) -> "StftConfig":
        return cls(int(obj["frame_size"]), int(obj["hop"]), obj.get("window", "hann"),
                   float(obj["sample_rate"]))


@dataclass(frozen=True)
class SpectralTensor:
    """STFT coefficients with shape ``(frames, bins, channels)``."""

    data: np.ndarray
    config: StftConfig

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"spectral data must be 3-D (T, F, M), got shape {data.shape}")
        if data.shape[1] != self.config.num_bins:
            raise ValueError(f"expected {self.config.num_bins} bins, got {data.shape[1]}")
        if not np.iscomplexobj(data):
            data = data.astype(complex)
        if not np.all(np.isfinite(data)):
            raise ValueError("spectral data must be finite")
        object.__setattr__(self, "data", data)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]

    @property
    def num_channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, num_frames: int, num_channels: int, config: StftConfig) -> "SpectralTensor":
        return cls(np.zeros((num_frames, config.num_bins, num_channels), dtype=complex), config)


def _as_channels(signal) -> np.ndarray:
    x = np.asarray(signal, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("signal must be (samples,) or (samples, channels)")
    return x


def stft(signal, cfg: StftConfig) -> SpectralTensor:
    """Windowed real FFT of frames ``[t*hop, t*hop + frame_size)``.

    ``signal`` is ``(samples, channels)`` or 1-D. Trailing samples that do not
    fill a complete frame are dropped.
    """
    x = _as_channels(signal)
    if x.shape[0] < cfg.frame_size:
        raise ValueError(f"signal has {x.shape[0]} samples, fewer than one frame ({cfg.frame_size})")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal must be finite")
    frames = sliding_window_view(x, cfg.frame_size, axis=0)[:: cfg.hop]  # (T, M, N)
    spec = np.fft.rfft(frames * cfg.analysis_window(), axis=-1)
    return SpectralTensor(np.ascontiguousarray(spec.transpose(0, 2, 1)), cfg)


def istft(spec: SpectralTensor, cfg: StftConfig = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Returns ``(samples, channels)`` with ``samples = (T-1)*hop + frame_size``.
    Samples where the summed squared window vanishes (the very first one for a
    periodic hann) are returned as zero.
    """
    if cfg is None:
        cfg = spec.config
    elif cfg != spec.config:
        raise ValueError("STFT config does not match the spectral tensor")
    T, F, M = spec.data.shape
    if F != cfg.num_bins:
        raise ValueError("bin count does not match the STFT config")
    w = cfg.analysis_window()
    n = cfg.signal_length(T) if T else 0
    out = np.zeros((n, M))
    norm = np.zeros(n)
    frames = np.fft.irfft(spec.data, n=cfg.frame_size, axis=1) * w[None, :, None]
    for t in range(T):
        s = t * cfg.hop
        out[s:s + cfg.frame_size] += frames[t]
        norm[s:s + cfg.frame_size] += w * w
    ok = norm > 1e-10 * (norm.max() if n else 1.0)
    out[ok] /= norm[ok, None]
    out[~ok] = 0.0
    return out
