"""Time-frequency conversion, chunk framing, WAV I/O and signal metrics.

All functions here are pure and numpy-based; the differentiable twins used
inside models live in :mod:`hintstream.numerics`.

Framing is uncentered and fully causal: frame ``t`` covers samples
``[t*hop, t*hop + window)`` with no left padding, so the frame for chunk
``t`` never reads a sample at or beyond ``t*hop + window``.  Signals whose
length is not an exact number of frames are truncated to the last full
frame.  Analysis and synthesis both use a square-root periodic Hann window;
the inverse transform divides by the accumulated squared window, which gives
perfect reconstruction everywhere the accumulated window power is nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, NumericFaultError

#: SI-SDR value reported when the residual energy is below 1e-12 of the
#: (scaled) reference energy, so aggregation stays finite.
SI_SDR_CAP_DB = 120.0

_CAP_RATIO = 1e-12


@dataclass
class AudioSignal:
    """Multichannel time-domain audio, shape (channels, length)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.samples.ndim != 2:
            raise ConfigError(f"samples must be 2-D, got shape {self.samples.shape}")
        if self.samples.shape[0] not in (1, 2):
            raise ConfigError(f"expected 1 or 2 channels, got {self.samples.shape[0]}")
        if not np.isfinite(self.samples).all():
            raise NumericFaultError("non-finite sample values")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate


@dataclass
class Spectrogram:
    """Complex time-frequency tensor, shape (channels, F, T)."""

    values: np.ndarray
    window_len: int
    hop_len: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ConfigError(f"spectrogram must be 3-D, got shape {self.values.shape}")
        if self.values.shape[1] != self.window_len // 2 + 1:
            raise ConfigError(
                f"F={self.values.shape[1]} inconsistent with window_len={self.window_len}"
            )
        if self.window_len < self.hop_len:
            raise ConfigError("window_len must be >= hop_len")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]

    @property
    def num_frames(self) -> int:
        return self.values.shape[2]


@dataclass
class AudioChunk:
    """One streaming tick of audio: hop_len new samples plus lookback.

    ``samples`` has shape (channels, window_len) and covers the sample span
    ``[chunk_index*hop, chunk_index*hop + window)``.
    """

    samples: np.ndarray
    chunk_index: int
    sample_rate: int


def num_frames(length: int, window_len: int, hop_len: int) -> int:
    """Frame count of uncentered framing; 0 if the signal is too short."""
    if length < window_len:
        return 0
    return (length - window_len) // hop_len + 1


def sqrt_hann(window_len: int) -> np.ndarray:
    """Square-root periodic Hann window."""
    n = np.arange(window_len)
    return np.sqrt(0.5 * (1.0 - np.cos(2.0 * np.pi * n / window_len)))


def iter_chunks(signal: AudioSignal, window_len: int, hop_len: int) -> Iterator[AudioChunk]:
    """Split a signal into streaming chunks, one per STFT frame."""
    t = num_frames(signal.length, window_len, hop_len)
    for i in range(t):
        yield AudioChunk(
            samples=signal.samples[:, i * hop_len : i * hop_len + window_len],
            chunk_index=i,
            sample_rate=signal.sample_rate,
        )


def stft(signal: AudioSignal, window_len: int, hop_len: int) -> Spectrogram:
    """Uncentered STFT with a square-root Hann analysis window."""
    if signal.length < window_len:
        raise ConfigError(
            f"signal of length {signal.length} is shorter than one window ({window_len})"
        )
    t = num_frames(signal.length, window_len, hop_len)
    window = sqrt_hann(window_len).astype(signal.samples.dtype, copy=False)
    idx = np.arange(window_len)[None, :] + hop_len * np.arange(t)[:, None]
    frames = signal.samples[:, idx] * window  # (ch, T, window)
    values = np.fft.rfft(frames, axis=-1)  # (ch, T, F)
    return Spectrogram(values.transpose(0, 2, 1), window_len, hop_len)


def istft(spec: Spectrogram, window_len: int, hop_len: int) -> np.ndarray:
    """Overlap-add synthesis; returns samples of shape (channels, length).

    The result is normalised by the accumulated squared window, so
    ``istft(stft(x))`` reconstructs ``x`` exactly (to float precision)
    wherever the accumulated window power is nonzero.
    """
    if spec.window_len != window_len or spec.hop_len != hop_len:
        raise ConfigError(
            f"spectrogram was produced with window/hop "
            f"{spec.window_len}/{spec.hop_len}, not {window_len}/{hop_len}"
        )
    ch, _, t = spec.values.shape
    window = sqrt_hann(window_len)
    frames = np.fft.irfft(spec.values.transpose(0, 2, 1), n=window_len, axis=-1)
    frames = frames * window
    length = (t - 1) * hop_len + window_len
    out = np.zeros((ch, length))
    wsum = np.zeros(length)
    for i in range(t):
        out[:, i * hop_len : i * hop_len + window_len] += frames[:, i]
        wsum[i * hop_len : i * hop_len + window_len] += window**2
    nz = wsum > 1e-12
    out[:, nz] /= wsum[nz]
    return out


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SDR of one channel, in dB.

    Uses the optimal scale ``a = <est, ref> / ||ref||^2`` and returns
    ``10*log10(||a*ref||^2 / ||a*ref - est||^2)``, capped at
    :data:`SI_SDR_CAP_DB` when the residual is negligible.
    """
    estimate = np.asarray(estimate, dtype=np.float64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if estimate.shape != reference.shape:
        raise ConfigError(f"length mismatch: {estimate.shape} vs {reference.shape}")
    ref_energy = float(np.dot(reference, reference))
    if ref_energy == 0.0:
        raise ConfigError("si_sdr is undefined for an all-zero reference")
    alpha = float(np.dot(estimate, reference)) / ref_energy
    target = alpha * reference
    target_energy = float(np.dot(target, target))
    residual = estimate - target
    residual_energy = float(np.dot(residual, residual))
    if target_energy == 0.0:
        # Estimate orthogonal to the reference: nothing of the target left.
        return -SI_SDR_CAP_DB
    if residual_energy <= _CAP_RATIO * target_energy:
        return SI_SDR_CAP_DB
    return 10.0 * np.log10(target_energy / residual_energy)


def mean_si_sdr(estimate: AudioSignal, reference: AudioSignal) -> float:
    """Arithmetic mean of per-channel SI-SDR values."""
    if estimate.channels != reference.channels:
        raise ConfigError("channel count mismatch")
    vals = [
        si_sdr(estimate.samples[c], reference.samples[c])
        for c in range(estimate.channels)
    ]
    return float(np.mean(vals))


def write_wav(path, signal: AudioSignal) -> None:
    """Write 32-bit float little-endian WAV (samples transposed to frames)."""
    data = np.ascontiguousarray(signal.samples.T.astype("<f4"))
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(str(path), signal.sample_rate, data)


def read_wav(path) -> AudioSignal:
    """Read a float WAV written by :func:`write_wav`."""
    rate, data = wavfile.read(str(path))
    if data.ndim == 1:
        data = data[:, None]
    return AudioSignal(samples=data.T.astype(np.float64), sample_rate=int(rate))


def signals_equal(a: AudioSignal, b: AudioSignal) -> bool:
    return (
        a.sample_rate == b.sample_rate
        and a.samples.shape == b.samples.shape
        and bool(np.array_equal(a.samples, b.samples))
    )
