"""Sparse plane-wave decomposition of multichannel spectra.

Each time-frequency cell is decomposed independently with orthogonal matching
pursuit (OMP) against the dictionary atoms of its bin. All cells of one bin
share the same atom matrix, so they are processed together as a batch; the
arithmetic per cell is identical to running them one at a time.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dictionary import DeviceDictionary, DirectionGrid
from .stft import SpectralTensor, StftConfig

GOA_FLOOR_DB = -120.0
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class DecompositionConfig:
    """OMP stopping rules.

    ``lasso_lambda`` is carried for a future convex solver and is ignored by
    OMP. ``min_correlation`` is relative to the norm of the observed vector so
    that decompositions are scale equivariant.
    """

    max_atoms: int = 30
    residual_stop_db: float = -30.0
    min_correlation: float = 1e-12
    bin_range: tuple = (50.0, 8000.0)
    lasso_lambda: Optional[float] = None

    def __post_init__(self):
        if int(self.max_atoms) != self.max_atoms or self.max_atoms < 1:
            raise ValueError("max_atoms must be a positive integer")
        if not self.residual_stop_db < 0:
            raise ValueError("residual_stop_db must be negative")
        if self.min_correlation < 0:
            raise ValueError("min_correlation must be non-negative")
        lo, hi = (float(v) for v in self.bin_range)
        if not 0 <= lo <= hi:
            raise ValueError("bin_range must be an ordered (low, high) pair in Hz")
        object.__setattr__(self, "max_atoms", int(self.max_atoms))
        object.__setattr__(self, "bin_range", (lo, hi))

    def to_json(self) -> dict:
        return {"max_atoms": self.max_atoms, "residual_stop_db": self.residual_stop_db,
                "min_correlation": self.min_correlation, "bin_range": list(self.bin_range),
                "lasso_lambda": self.lasso_lambda}

    @classmethod
    def from_json(cls, obj: dict) -> "DecompositionConfig":
        return cls(obj["max_atoms"], obj["residual_stop_db"], obj["min_correlation"],
                   tuple(obj["bin_range"]), obj.get("lasso_lambda"))


# ---------------------------------------------------------------------------
# OMP
# ---------------------------------------------------------------------------


@dataclass
class _OmpResult:
    counts: np.ndarray     # (N,)
    indices: np.ndarray    # (N, K), -1 padded
    weights: np.ndarray    # (N, K), raw atom scale
    residual: np.ndarray   # (N, M)
    history: Optional[np.ndarray] = None  # (N, K + 1) residual energy after each step


def omp_batch(Y: np.ndarray, A: np.ndarray, max_atoms: int, residual_stop_db: float,
              min_correlation: float = 1e-12, track: bool = False) -> _OmpResult:
    """Run OMP on every row of ``Y`` (N, M) against atoms ``A`` (M, L).

    The active set of each row is orthonormalized incrementally (modified
    Gram-Schmidt with one re-orthogonalization pass), so the residual after
    every step is the least-squares residual on the active set.
    """
    Y = np.asarray(Y, dtype=complex)
    A = np.asarray(A, dtype=complex)
    N, M = Y.shape
    L = A.shape[1]
    if A.shape[0] != M:
        raise ValueError(f"atoms have {A.shape[0]} rows, observations have {M} channels")
    if L < 1 or M < 1:
        raise ValueError("need at least one atom and one channel")
    K = min(max_atoms, L)
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise ValueError("dictionary contains a zero atom")
    An = A / norms
    AnH = An.conj()

    y_norm = np.linalg.norm(Y, axis=1)
    stop_ratio = 10.0 ** (residual_stop_db / 20.0)
    R = Y.copy()
    Q = np.zeros((N, M, K), dtype=complex)
    U = np.zeros((N, K, K), dtype=complex)   # An[:, S] = Q @ U
    z = np.zeros((N, K), dtype=complex)      # Q^H y
    idx = np.full((N, K), -1, dtype=np.int64)
    counts = np.zeros(N, dtype=np.int64)
    history = np.repeat((y_norm ** 2)[:, None], K + 1, axis=1) if track else None

    running = y_norm > 0
    for k in range(K):
        act = np.flatnonzero(running)
        if act.size == 0:
            break
        corr = np.abs(R[act] @ AnH)                     # (n, L)
        if k:
            rows = np.repeat(np.arange(act.size), k)
            corr[rows, idx[act, :k].ravel()] = -1.0     # never reselect
        best = np.argmax(corr, axis=1)
        best_val = corr[np.arange(act.size), best]
        ok = best_val >= min_correlation * y_norm[act]

        a = An[:, best].T                               # (n, M)
        Qa = Q[act, :, :k]
        c1 = np.einsum("nmk,nm->nk", Qa.conj(), a)
        v = a - np.einsum("nmk,nk->nm", Qa, c1)
        c2 = np.einsum("nmk,nm->nk", Qa.conj(), v)
        v = v - np.einsum("nmk,nk->nm", Qa, c2)
        vn = np.linalg.norm(v, axis=1)
        ok &= vn > _RANK_TOL

        add = act[ok]
        sel = np.flatnonzero(ok)
        q = v[sel] / vn[sel, None]
        Q[add, :, k] = q
        U[add, :k, k] = (c1 + c2)[sel]
        U[add, k, k] = vn[sel]
        idx[add, k] = best[sel]
        zk = np.einsum("nm,nm->n", q.conj(), R[add])
        z[add, k] = zk
        R[add] -= q * zk[:, None]
        counts[add] += 1

        running[act[~ok]] = False
        res = np.linalg.norm(R[add], axis=1)
        running[add[res <= stop_ratio * y_norm[add]]] = False
        if track:
            history[:, k + 1:] = (np.linalg.norm(R, axis=1) ** 2)[:, None]

    # back substitution U w = z, batched; unused diagonal slots set to 1
    w = np.zeros((N, K), dtype=complex)
    diag = np.diagonal(U, axis1=1, axis2=2).copy()
    diag[diag == 0] = 1.0
    for j in range(K - 1, -1, -1):
        acc = z[:, j] - np.einsum("nk,nk->n", U[:, j, j + 1:], w[:, j + 1:])
        w[:, j] = acc / diag[:, j]
    safe = np.where(idx >= 0, idx, 0)
    w = np.where(idx >= 0, w / norms[safe], 0.0)
    return _OmpResult(counts, idx, w, R, history)


def _residual_db(residual_norm: float, y_norm: float) -> float:
    if y_norm == 0:
        return -math.inf
    if residual_norm == 0:
        return -math.inf
    return 20.0 * math.log10(residual_norm / y_norm)


def decompose_cell(y, atoms, cfg: DecompositionConfig = DecompositionConfig()):
    """OMP decomposition of one observation vector.

    Parameters
    ----------
    y : ndarray, shape (M,)
        Observed array spectrum of one time-frequency cell.
    atoms : ndarray, shape (M, L)
        Dictionary atoms at the cell's frequency, one per column.
    cfg : DecompositionConfig

    Returns
    -------
    indices : ndarray of int
        Selected atom indices in selection order.
    weights : ndarray of complex
        Least-squares weights on the raw (unnormalized) atoms.
    residual_db : float
        ``20 log10(|y - A w| / |y|)``; ``-inf`` for a zero observation.
    """
    y = np.asarray(y, dtype=complex).reshape(-1)
    atoms = np.asarray(atoms)
    if atoms.ndim != 2 or atoms.shape[1] < 1:
        raise ValueError("atoms must be an (M, L) matrix with L >= 1")
    r = omp_batch(y[None, :], atoms, cfg.max_atoms, cfg.residual_stop_db, cfg.min_correlation)
    n = int(r.counts[0])
    return r.indices[0, :n].copy(), r.weights[0, :n].copy(), _residual_db(np.linalg.norm(r.residual[0]), np.linalg.norm(y))


# ---------------------------------------------------------------------------
# Time-frequency maps
# ---------------------------------------------------------------------------


@dataclass
class TimeFrequencyMap:
    """Active plane-wave sets and weights for every (frame, bin) cell.

    ``indices`` and ``weights`` have shape ``(T, F, K)``; unused slots hold
    index ``-1`` and weight 0. ``bin_mask`` marks the bins that were
    decomposed; all other cells are empty.
    """

    indices: np.ndarray
    weights: np.ndarray
    bin_mask: np.ndarray
    grid_hash: str
    grid_size: int
    stft_config: StftConfig
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)
    grid: Optional[DirectionGrid] = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=complex)
        self.bin_mask = np.asarray(self.bin_mask, dtype=bool)
        if self.indices.ndim != 3 or self.indices.shape != self.weights.shape:
            raise ValueError("indices and weights must share a (T, F, K) shape")
        if self.indices.shape[1] != self.stft_config.num_bins or self.bin_mask.shape != (self.indices.shape[1],):
            raise ValueError("map bin count does not match the STFT config")
        if np.any(self.indices >= self.grid_size) or np.any(self.indices < -1):
            raise ValueError("direction index out of range")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @property
    def num_frames(self) -> int:
        return self.indices.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return (self.indices >= 0).sum(axis=2)

    def cell(self, t: int, f: int):
        """``(indices, weights)`` of one cell."""
        sel = self.indices[t, f] >= 0
        return self.indices[t, f][sel], self.weights[t, f][sel]

    def scaled(self, c) -> "TimeFrequencyMap":
        return TimeFrequencyMap(self.indices.copy(), self.weights * c, self.bin_mask.copy(), self.grid_hash,
                                self.grid_size, self.stft_config, self.decomposition, self.grid)

    def truncated(self, max_atoms: int) -> "TimeFrequencyMap":
        """Keep only the first ``max_atoms`` entries of each cell (no refit)."""
        return TimeFrequencyMap(self.indices[:, :, :max_atoms].copy(), self.weights[:, :, :max_atoms].copy(),
                                self.bin_mask.copy(), self.grid_hash, self.grid_size, self.stft_config,
                                self.decomposition, self.grid)

    @classmethod
    def empty(cls, num_frames: int, d: DeviceDictionary, cfg: StftConfig, max_atoms: int = 1) -> "TimeFrequencyMap":
        shape = (num_frames, cfg.num_bins, max_atoms)
        mask = np.zeros(cfg.num_bins, dtype=bool)
        mask[d.bins] = True
        return cls(np.full(shape, -1), np.zeros(shape, complex), mask, d.grid.content_hash, len(d.grid), cfg,
                   grid=d.grid)


def _check_compatible(spec: SpectralTensor, d: DeviceDictionary) -> None:
    cfg = spec.config
    if spec.num_channels != d.num_mics:
        raise ValueError(f"capture has {spec.num_channels} channels, dictionary has {d.num_mics} microphones")
    if cfg.frame_size != d.freqs.fft_size or not math.isclose(cfg.sample_rate, d.freqs.sample_rate):
        raise ValueError(
            f"STFT grid ({cfg.sample_rate:g} Hz, {cfg.frame_size}) does not match dictionary "
            f"grid ({d.freqs.sample_rate:g} Hz, {d.freqs.fft_size})"
        )


def active_bins(cfg: StftConfig, d: DeviceDictionary, bin_range) -> np.ndarray:
    """FFT bins inside ``bin_range`` that the dictionary covers."""
    f = cfg.bin_freqs
    lo, hi = bin_range
    in_range = np.flatnonzero((f >= lo - 1e-9) & (f <= hi + 1e-9))
    return np.intersect1d(in_range, d.bins)


def _run(spec: SpectralTensor, d: DeviceDictionary, cfg: DecompositionConfig, jobs: int, track: bool):
    _check_compatible(spec, d)
    bins = active_bins(spec.config, d, cfg.bin_range)
    if bins.size == 0:
        raise ValueError(f"no dictionary bins inside {cfg.bin_range} Hz")
    T, F, M = spec.data.shape
    K = min(cfg.max_atoms, len(d.grid))
    indices = np.full((T, F, K), -1, dtype=np.int64)
    weights = np.zeros((T, F, K), dtype=complex)
    history = np.zeros((T, F, K + 1)) if track else None

    def work(f: int):
        res = omp_batch(spec.data[:, f, :], d.atoms(int(f)), K, cfg.residual_stop_db, cfg.min_correlation, track)
        indices[:, f] = res.indices
        weights[:, f] = res.weights
        if track:
            history[:, f] = res.history

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(work, bins))
    else:
        for f in bins:
            work(f)
    mask = np.zeros(F, dtype=bool)
    mask[bins] = True
    tfm = TimeFrequencyMap(indices, weights, mask, d.grid.content_hash, len(d.grid), spec.config, cfg, d.grid)
    return tfm, history


def decompose(spec: SpectralTensor, d: DeviceDictionary, cfg: DecompositionConfig = DecompositionConfig(),
              jobs: int = 1) -> TimeFrequencyMap:
    """Decompose every in-range cell of ``spec`` against ``d``."""
    return _run(spec, d, cfg, jobs, track=False)[0]


# ---------------------------------------------------------------------------
# Goodness of approximation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoaReport:
    """Residual-to-observed energy ratios.

    ``residual_energy`` and ``observed_energy`` are summed over frames for
    every decomposed bin; bins without observed energy get ``nan`` in
    ``per_bin_db`` and are left out of all aggregates.
    """

    bin_freqs: np.ndarray
    residual_energy: np.ndarray
    observed_energy: np.ndarray

    @property
    def per_bin_db(self) -> np.ndarray:
        out = np.full(self.bin_freqs.shape, np.nan)
        ok = self.observed_energy > 0
        out[ok] = _ratio_db(self.residual_energy[ok], self.observed_energy[ok])
        return out

    @property
    def aggregate_db(self) -> float:
        return self.band_db(-np.inf, np.inf)

    def band_db(self, low: float, high: float) -> float:
        sel = (self.bin_freqs >= low) & (self.bin_freqs <= high) & (self.observed_energy > 0)
        obs = self.observed_energy[sel].sum()
        if obs == 0:
            raise ValueError(f"no signal energy between {low:g} and {high:g} Hz")
        return float(_ratio_db(self.residual_energy[sel].sum(), obs))


def _ratio_db(residual, observed):
    with np.errstate(divide="ignore"):
        return np.maximum(10.0 * np.log10(residual / observed), GOA_FLOOR_DB)


def reconstruct(tfm: TimeFrequencyMap, d: DeviceDictionary) -> np.ndarray:
    """``sum_l alpha_l beta_l`` for every cell; shape ``(T, F, M)``."""
    if tfm.grid_hash != d.grid.content_hash or tfm.grid_size != len(d.grid):
        raise ValueError("time-frequency map and dictionary use different direction grids")
    cfg = tfm.stft_config
    if cfg.frame_size != d.freqs.fft_size or not math.isclose(cfg.sample_rate, d.freqs.sample_rate):
        raise ValueError("time-frequency map and dictionary use different frequency grids")
    T, F, _ = tfm.indices.shape
    out = np.zeros((T, F, d.num_mics), dtype=complex)
    used = np.flatnonzero(tfm.bin_mask & (tfm.indices >= 0).any(axis=(0, 2)))
    for f in used:
        slot = d.bin_slot(int(f))
        if slot < 0:
            raise ValueError(f"dictionary has no atoms for bin {f} ({cfg.bin_freqs[f]:.1f} Hz)")
        beta = d.tensor[slot].astype(complex)  # (L, M)
        idx = tfm.indices[:, f]
        w = np.where(idx >= 0, tfm.weights[:, f], 0.0)
        out[:, f] = np.einsum("tk,tkm->tm", w, beta[np.where(idx >= 0, idx, 0)])
    return out


def _goa_from_residual(spec: SpectralTensor, resid: np.ndarray, mask: np.ndarray) -> GoaReport:
    bins = np.flatnonzero(mask)
    obs = (np.abs(spec.data[:, bins]) ** 2).sum(axis=(0, 2))
    if obs.sum() == 0:
        raise ValueError("no signal energy in the decomposed bins")
    return GoaReport(spec.config.bin_freqs[bins], resid, obs)


def goa(tfm: TimeFrequencyMap, d: DeviceDictionary, spec: SpectralTensor) -> GoaReport:
    """Goodness of approximation of ``tfm`` with respect to the observation."""
    _check_compatible(spec, d)
    if tfm.indices.shape[:2] != spec.data.shape[:2]:
        raise ValueError("map and spectral tensor have different (T, F) dimensions")
    bins = np.flatnonzero(tfm.bin_mask)
    err = spec.data[:, bins] - reconstruct(tfm, d)[:, bins]
    return _goa_from_residual(spec, (np.abs(err) ** 2).sum(axis=(0, 2)), tfm.bin_mask)


def goa_sweep(spec: SpectralTensor, d: DeviceDictionary, cfg: DecompositionConfig,
              ks: Optional[Sequence[int]] = None, jobs: int = 1):
    """GoA for each atom budget in ``ks`` from a single OMP run.

    OMP with budget ``k`` performs exactly the first ``k`` iterations of the
    run with budget ``max_atoms``, so each entry equals a separate decomposition
    with ``max_atoms=k``.

    Returns
    -------
    tfm : TimeFrequencyMap
        Decomposition at ``cfg.max_atoms``.
    reports : dict
        ``{k: GoaReport}``.
    """
    tfm, hist = _run(spec, d, cfg, jobs, track=True)
    K = hist.shape[2] - 1
    if ks is None:
        ks = range(1, K + 1)
    bins = np.flatnonzero(tfm.bin_mask)
    reports = {}
    for k in ks:
        if not 1 <= k <= cfg.max_atoms:
            raise ValueError(f"k={k} outside 1..{cfg.max_atoms}")
        resid = hist[:, bins, min(k, K)].sum(axis=0)
        reports[int(k)] = _goa_from_residual(spec, resid, tfm.bin_mask)
    return tfm, reports


# ---------------------------------------------------------------------------
# .tfm files
# ---------------------------------------------------------------------------

TFM_MAGIC = b"TFM1"
_CELL = struct.Struct("<III")
_ENTRY = np.dtype([("index", "<u4"), ("re", "<f4"), ("im", "<f4")])


class MapFileError(ValueError):
    pass


def save_map(tfm: TimeFrequencyMap, path) -> None:
    """Write a map as a JSON header followed by binary cell records.

    Layout: ``b"TFM1"``, uint32 header length, UTF-8 JSON header, then for
    every non-empty cell ``(uint32 t, uint32 f, uint32 count)`` followed by
    ``count`` entries of ``(uint32 index, float32 re, float32 im)``.
    """
    counts = tfm.counts
    T, F = counts.shape
    cells = np.argwhere(counts > 0)
    header = {
        "version": 1,
        "T": T,
        "F": F,
        "K": tfm.indices.shape[2],
        "cells": int(cells.shape[0]),
        "grid_hash": tfm.grid_hash,
        "grid_size": tfm.grid_size,
        "grid": tfm.grid.to_json() if tfm.grid is not None else None,
        "stft": tfm.stft_config.to_json(),
        "decomposition": tfm.decomposition.to_json(),
        "bins": np.flatnonzero(tfm.bin_mask).tolist(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [TFM_MAGIC, struct.pack("<I", len(blob)), blob]
    for t, f in cells:
        idx, w = tfm.cell(t, f)
        rec = np.empty(idx.size, dtype=_ENTRY)
        rec["index"], rec["re"], rec["im"] = idx, w.real, w.imag
        parts.append(_CELL.pack(int(t), int(f), idx.size))
        parts.append(rec.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_map(path) -> TimeFrequencyMap:
    data = Path(path).read_bytes()
    if data[:4] != TFM_MAGIC:
        raise MapFileError(f"{path}: not a time-frequency map file")
    if len(data) < 8:
        raise MapFileError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + n:
        raise MapFileError(f"{path}: truncated header")
    try:
        h = json.loads(data[8:8 + n].decode("utf-8"))
        cfg = StftConfig.from_json(h["stft"])
        dcfg = DecompositionConfig.from_json(h["decomposition"])
        T, F, K = int(h["T"]), int(h["F"]), int(h["K"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise MapFileError(f"{path}: bad header: {exc}") from None
    indices = np.full((T, F, K), -1, dtype=np.int64)
    weights = np.zeros((T, F, K), dtype=complex)
    off = 8 + n
    for _ in range(int(h["cells"])):
        if len(data) < off + _CELL.size:
            raise MapFileError(f"{path}: truncated cell records")
        t, f, c = _CELL.unpack_from(data, off)
        off += _CELL.size
        end = off + c * _ENTRY.itemsize
        if len(data) < end or t >= T or f >= F or c > K:
            raise MapFileError(f"{path}: corrupt cell record at byte {off}")
        rec = np.frombuffer(data[off:end], dtype=_ENTRY)
        indices[t, f, :c] = rec["index"]
        weights[t, f, :c] = rec["re"].astype(float) + 1j * rec["im"].astype(float)
        off = end
    if off != len(data):
        raise MapFileError(f"{path}: {len(data) - off} trailing bytes")
    mask = np.zeros(F, dtype=bool)
    mask[np.asarray(h["bins"], dtype=np.int64)] = True
    grid = DirectionGrid.from_json(h["grid"]) if h.get("grid") else None
    return TimeFrequencyMap(indices, weights, mask, h["grid_hash"], int(h["grid_size"]), cfg, dcfg, grid)
