"""Render time-frequency maps through a target device dictionary."""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .dictionary import DeviceDictionary
from .pwd import TimeFrequencyMap, reconstruct
from .stft import SpectralTensor, StftConfig, istft

NoiseMap = Union[SpectralTensor, TimeFrequencyMap]


def synthesize_field(tfm: TimeFrequencyMap, d: DeviceDictionary) -> SpectralTensor:
    """Array spectra ``sum_l alpha_l(t, f) beta_l(f)`` of the target device.

    The map and dictionary must share the same direction grid (checked by
    content hash). Cells outside the map's decomposed bins are zero.
    """
    return SpectralTensor(reconstruct(tfm, d), tfm.stft_config)


def add_noise(field: SpectralTensor, noise: NoiseMap, gain: float = 1.0,
              dictionary: Optional[DeviceDictionary] = None) -> SpectralTensor:
    """``field + gain * noise`` in the STFT domain.

    ``noise`` may be a spectral tensor already observed at the target device
    or a time-frequency map, which is first rendered through ``dictionary``.
    """
    if isinstance(noise, TimeFrequencyMap):
        if dictionary is None:
            raise ValueError("a noise map needs the target dictionary to be rendered")
        noise = synthesize_field(noise, dictionary)
    if noise.data.shape != field.data.shape:
        raise ValueError(f"noise shape {noise.data.shape} does not match field shape {field.data.shape}")
    if noise.config != field.config:
        raise ValueError("noise and field use different STFT configs")
    if gain == 0:
        return SpectralTensor(field.data.copy(), field.config)
    return SpectralTensor(field.data + gain * noise.data, field.config)


def render(tfm: TimeFrequencyMap, d: DeviceDictionary, cfg: Optional[StftConfig] = None,
           noise: Optional[NoiseMap] = None, noise_gain: float = 1.0) -> np.ndarray:
    """Waveform ``(samples, M)`` of the map rendered for device ``d``."""
    if cfg is not None and cfg != tfm.stft_config:
        raise ValueError("STFT config differs from the one the map was computed with")
    field = synthesize_field(tfm, d)
    if noise is not None:
        field = add_noise(field, noise, noise_gain, d)
    return istft(field)
