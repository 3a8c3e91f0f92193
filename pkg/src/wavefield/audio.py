"""WAV input/output. Everything is written as 32-bit float."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile


class AudioFileError(OSError):
    pass


def read_wav(path):
    """Return ``(sample_rate, samples)`` with samples as float64 ``(N, channels)``.

    Integer PCM is scaled to [-1, 1).
    """
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise AudioFileError(f"{path}: cannot read WAV: {exc}") from None
    if np.issubdtype(data.dtype, np.integer):
        if data.dtype == np.uint8:
            data = (data.astype(np.float64) - 128.0) / 128.0
        else:
            data = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        data = data.astype(np.float64)
    if data.ndim == 1:
        data = data[:, None]
    return int(rate), data


def write_wav(path, sample_rate: float, samples) -> None:
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim == 2 and data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(path, int(round(sample_rate)), data)
