"""Fixed spectral analysis for audio clips.

A clip is 8000 float samples split into 8 non-overlapping frames of 1000.
Each frame is reduced to 16 triangular band energies of its periodogram.
Nothing here is learned; the tone frequencies used by the synthetic scenes
sit exactly on band-center DFT bins, which makes band energies additive
across sources and zero for silence.
"""

from __future__ import annotations

import functools

import numpy as np

from .autodiff import ContractViolation

FRAME_LEN = 1000
N_FRAMES = 8
CLIP_LEN = FRAME_LEN * N_FRAMES
N_BANDS = 16
N_BINS = FRAME_LEN // 2 + 1

# Band j spans DFT bins [EDGE_START + j*EDGE_STEP, EDGE_START + (j+2)*EDGE_STEP]
# with its peak at the middle edge, so adjacent bands overlap by half.
EDGE_START = 20
EDGE_STEP = 27

_EDGES = EDGE_START + EDGE_STEP * np.arange(N_BANDS + 2)


def band_center_bins() -> np.ndarray:
    """Peak DFT bin of each of the 16 triangular bands."""
    return _EDGES[1:-1].copy()


def class_tone_bins(label: int) -> tuple[int, int]:
    """The two band-center bins whose sinusoids identify class ``label``."""
    if not 0 <= label < N_BANDS // 2:
        raise ContractViolation(f"label {label} outside [0, {N_BANDS // 2})")
    centers = _EDGES[1:-1]
    return int(centers[2 * label]), int(centers[2 * label + 1])


@functools.lru_cache(maxsize=1)
def _filterbank() -> np.ndarray:
    fb = np.zeros((N_BANDS, N_BINS))
    bins = np.arange(N_BINS)
    for j in range(N_BANDS):
        lo, mid, hi = _EDGES[j], _EDGES[j + 1], _EDGES[j + 2]
        rise = (bins - lo) / (mid - lo)
        fall = (hi - bins) / (hi - mid)
        fb[j] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def filterbank_matrix() -> np.ndarray:
    """(16, 501) triangular weights over one-sided DFT bins."""
    return _filterbank().copy()


def periodogram(frame: np.ndarray) -> np.ndarray:
    """One-sided power spectrum scaled so a unit sinusoid on an exact bin
    contributes 0.5 at that bin."""
    if frame.shape != (FRAME_LEN,):
        raise ContractViolation(f"frame must have {FRAME_LEN} samples, got {frame.shape}")
    spec = np.fft.rfft(frame)
    return (2.0 / FRAME_LEN**2) * np.abs(spec) ** 2


def frame_energies(clip: np.ndarray) -> np.ndarray:
    """(8, 16) band-energy features for one clip."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.shape != (CLIP_LEN,):
        raise ContractViolation(f"clip must have {CLIP_LEN} samples, got {clip.shape}")
    frames = clip.reshape(N_FRAMES, FRAME_LEN)
    power = (2.0 / FRAME_LEN**2) * np.abs(np.fft.rfft(frames, axis=-1)) ** 2
    return power @ _filterbank().T
