"""Deterministic signal plumbing: chunking, overlap-add, STFT/iSTFT.

Latent sequences are stored frames-first: a latent of length T' with N
features is a (T', N) array; a chunked latent is (R, K, N). Waveforms are
1-D float arrays in [-1, 1).

Overlap-add divides out the per-frame chunk coverage, so
overlap_add(chunk(z)) == z exactly (up to float rounding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, InputError


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

@dataclass
class ChunkTensor:
    """Overlapping chunks of a latent sequence plus un-chunking metadata."""
    data: Tensor          # (R, K, N) or (R, K)
    k: int                # chunk length
    hop: int              # hop between chunk starts
    pad_front: int
    pad_back: int
    t_latent: int         # original latent length T'

    @property
    def r(self) -> int:
        return self.data.shape[0]

    def validate(self) -> None:
        if self.data.shape[1] != self.k:
            raise DimensionError(
                f"ChunkTensor: data axis 1 is {self.data.shape[1]}, "
                f"expected K={self.k}")
        padded = self.pad_front + self.t_latent + self.pad_back
        if (self.r - 1) * self.hop + self.k != padded:
            raise DimensionError(
                "ChunkTensor: padding metadata inconsistent with R="
                f"{self.r}, K={self.k}, hop={self.hop}")


def chunk_count(t_latent: int, k: int) -> int:
    """Number of chunks R for hop K/2: ceil(2*T'/K) + 1."""
    return math.ceil(2 * t_latent / k) + 1


def default_chunk_len(t_latent: int) -> int:
    """Even chunk length nearest sqrt(2*T'): balances K against R."""
    k = 2 * int(round(math.sqrt(2.0 * t_latent) / 2.0))
    return max(k, 2)


def chunk(z: Tensor, k: int, hop: int | None = None) -> ChunkTensor:
    """Cut a (T', N) latent into R overlapping chunks of length K.

    With the default hop K/2, R = ceil(2*T'/K)+1: a front pad of one hop
    plus a back pad round every frame's coverage up so that un-chunking
    is exact.
    """
    if k <= 0:
        raise ConfigurationError(f"chunk: K must be positive, got {k}")
    if hop is None:
        if k % 2 != 0:
            raise ConfigurationError(f"chunk: K must be even, got {k}")
        hop = k // 2
    if hop <= 0 or hop > k:
        raise ConfigurationError(f"chunk: hop {hop} outside (0, K]")
    z = ad.as_tensor(z)
    t_latent = z.shape[0]
    if t_latent < 1:
        raise InputError("chunk: empty latent")
    if 2 * hop == k:
        r = chunk_count(t_latent, k)
    else:
        r = max(1, math.ceil((hop + t_latent - k) / hop) + 1)
        while (r - 1) * hop + k < hop + t_latent:
            r += 1
    pad_front = hop
    pad_back = (r - 1) * hop + k - pad_front - t_latent
    padded = ad.pad_rows(z, pad_front, pad_back)
    data = ad.chunk_rows(padded, k, hop)
    return ChunkTensor(data=data, k=k, hop=hop, pad_front=pad_front,
                       pad_back=pad_back, t_latent=t_latent)


def coverage(ct: ChunkTensor) -> np.ndarray:
    """Number of chunks covering each padded frame position."""
    padded = ct.pad_front + ct.t_latent + ct.pad_back
    cov = np.zeros(padded)
    for j in range(ct.r):
        cov[j * ct.hop:j * ct.hop + ct.k] += 1.0
    return cov


def overlap_add(ct: ChunkTensor) -> Tensor:
    """Invert chunk(): sum chunks at their offsets, divide out coverage,
    strip the padding. Exact inverse of chunk() by construction."""
    ct.validate()
    padded = ct.pad_front + ct.t_latent + ct.pad_back
    summed = ad.ola_rows(ct.data, ct.hop, padded)
    cov = coverage(ct)
    if np.any(cov == 0):
        raise DimensionError("overlap_add: uncovered frame positions")
    normed = ad.row_scale(summed, 1.0 / cov)
    return ad.slice_rows(normed, ct.pad_front, ct.pad_front + ct.t_latent)


# ---------------------------------------------------------------------------
# STFT / iSTFT (analysis path, plain numpy)
# ---------------------------------------------------------------------------

_WINDOWS = {
    "hamming": np.hamming,
    "hann": np.hanning,
}


@dataclass
class Spectrogram:
    """Complex STFT bins (F_bins, frames) with the geometry that made them."""
    bins: np.ndarray
    win_len: int
    hop: int
    nfft: int
    window: str
    sample_rate: int
    orig_len: int
    pad_front: int

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def _check_stft_sizes(win_len: int, hop: int, nfft: int) -> None:
    if win_len <= 0 or hop <= 0 or nfft <= 0:
        raise ConfigurationError("stft: window, hop and nfft must be positive")
    if win_len > nfft:
        raise ConfigurationError(
            f"stft: window {win_len} longer than nfft {nfft}")
    if hop > win_len:
        raise ConfigurationError(f"stft: hop {hop} larger than window "
                                 f"{win_len}")


def _frame_indices(n: int, win_len: int, hop: int) -> np.ndarray:
    """Reflect-padded frame index matrix: frame count is deterministic
    from the signal length."""
    pad = win_len // 2
    n_frames = 1 + math.ceil(n / hop)
    idx = (np.arange(n_frames)[:, None] * hop +
           np.arange(win_len)[None, :] - pad)
    # reflect (mirror without repeating the edge sample), then clip
    idx = np.abs(idx)
    over = idx > n - 1
    idx[over] = (2 * (n - 1) - idx[over])
    return np.clip(idx, 0, n - 1)


def stft(x: np.ndarray, win_len: int, hop: int, nfft: int,
         window: str = "hamming", sample_rate: int = 8000) -> Spectrogram:
    """Standard discrete STFT with reflect-padded edges."""
    _check_stft_sizes(win_len, hop, nfft)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("stft: input must be a 1-D waveform")
    if len(x) <= win_len:
        raise InputError(
            f"stft: input of {len(x)} samples not longer than one window "
            f"({win_len})")
    win = _WINDOWS[window](win_len)
    idx = _frame_indices(len(x), win_len, hop)
    frames = x[idx] * win
    bins = np.fft.rfft(frames, n=nfft, axis=1).T  # (F_bins, frames)
    return Spectrogram(bins=bins, win_len=win_len, hop=hop, nfft=nfft,
                       window=window, sample_rate=sample_rate,
                       orig_len=len(x), pad_front=win_len // 2)


def istft(spec: Spectrogram) -> np.ndarray:
    """Weighted overlap-add inverse with window-square normalization."""
    win = _WINDOWS[spec.window](spec.win_len)
    frames = np.fft.irfft(spec.bins.T, n=spec.nfft, axis=1)[:, :spec.win_len]
    frames *= win
    n_frames = frames.shape[0]
    total = (n_frames - 1) * spec.hop + spec.win_len
    num = np.zeros(total)
    den = np.zeros(total)
    wsq = win * win
    for j in range(n_frames):
        lo = j * spec.hop
        num[lo:lo + spec.win_len] += frames[j]
        den[lo:lo + spec.win_len] += wsq
    lo = spec.pad_front
    hi = lo + spec.orig_len
    den = np.maximum(den, 1e-12)
    return (num / den)[lo:hi]


def mixture_phase_reconstruct(mask: np.ndarray, mix_spec: Spectrogram
                              ) -> np.ndarray:
    """Apply a real T-F mask to a mixture spectrogram and invert."""
    masked = Spectrogram(bins=mix_spec.bins * mask, win_len=mix_spec.win_len,
                         hop=mix_spec.hop, nfft=mix_spec.nfft,
                         window=mix_spec.window,
                         sample_rate=mix_spec.sample_rate,
                         orig_len=mix_spec.orig_len,
                         pad_front=mix_spec.pad_front)
    return istft(masked)


# ---------------------------------------------------------------------------
# Differentiable power spectrogram (identity-loss feature path)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _dft_mats(win_len: int, nfft: int, window: str):
    n_bins = nfft // 2 + 1
    win = _WINDOWS[window](win_len)
    t = np.arange(win_len)[:, None]
    k = np.arange(n_bins)[None, :]
    ang = -2.0 * np.pi * t * k / nfft
    cos_m = np.cos(ang) * win[:, None]
    sin_m = np.sin(ang) * win[:, None]
    return cos_m, sin_m


def power_spectrogram(x: Tensor, win_len: int, hop: int, nfft: int,
                      window: str = "hamming") -> Tensor:
    """|STFT|^2 of a 1-D waveform tensor, differentiable w.r.t. x.

    The DFT is folded into two constant matmuls (cosine/sine), so the whole
    path is just gather + matmul on the tape. Matches stft() framing.
    """
    _check_stft_sizes(win_len, hop, nfft)
    if x.data.ndim != 1:
        raise InputError("power_spectrogram: input must be 1-D")
    if x.shape[0] <= win_len:
        raise InputError("power_spectrogram: input not longer than a window")
    idx = _frame_indices(x.shape[0], win_len, hop)
    frames = ad.gather_rows(x, idx)  # (J, win_len)
    cos_m, sin_m = _dft_mats(win_len, nfft, window)
    dt = x.data.dtype
    re = ad.matmul(frames, Tensor(cos_m, dtype=dt))
    im = ad.matmul(frames, Tensor(sin_m, dtype=dt))
    return ad.add(ad.mul(re, re), ad.mul(im, im))  # (J, n_bins)
