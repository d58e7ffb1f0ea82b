"""Waveform I/O, STFT analysis/resynthesis, and a synthetic vowel generator.

The STFT convention: Hann-analysis frames of `window_len` samples taken
every `hop` samples, zero-padded to `fft_size` and transformed one-sided,
so a frame has fft_size/2 + 1 bins.  Resynthesis is overlap-add with a
Hann synthesis window and squared-window normalization.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .numerics import Rng, ShapeError, randn

DEFAULT_SAMPLE_RATE = 16000

# log-magnitude floor; zero-padded regions map to ln(MAG_FLOOR)
MAG_FLOOR = 1e-5

# squared-window normalization floor for overlap-add
_OLA_FLOOR = 1e-8

# average adult-male (F1, F2) in Hz; ordinal relations matter, exact values do not
FORMANTS = {
    "aa": (730.0, 1090.0),
    "ae": (660.0, 1720.0),
    "iy": (270.0, 2290.0),
    "ow": (570.0, 840.0),
    "uh": (440.0, 1020.0),
}

VOWELS = tuple(sorted(FORMANTS))


@dataclass
class Waveform:
    """Mono waveform; samples are float64 in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class ComplexStft:
    """One-sided STFT: frames is a (T, F) complex matrix with F = fft_size/2 + 1."""

    frames: np.ndarray
    window_len: int
    hop: int
    fft_size: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass
class StftConfig:
    window_len: int = 400  # 25 ms at 16 kHz
    hop: int = 16  # 1 ms
    fft_size: int = 512  # 257 one-sided bins

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


def frame_count(n_samples: int, window_len: int, hop: int) -> int:
    """Number of full analysis frames: floor((n - window_len)/hop) + 1."""
    if n_samples < window_len:
        raise ValueError(f"input of {n_samples} samples is shorter than one window ({window_len})")
    return (n_samples - window_len) // hop + 1


def _hann(n: int) -> np.ndarray:
    # periodic Hann, the standard analysis window for hopped STFTs
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM, 16-bit mono)


def read_wav(path) -> Waveform:
    """Read a 16-bit mono PCM WAV; samples are scaled by 1/32768."""
    with wave.open(str(path), "rb") as fp:
        if fp.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {fp.getnchannels()} channels")
        if fp.getsampwidth() != 2:
            raise ValueError(f"expected 16-bit PCM, got {8 * fp.getsampwidth()}-bit")
        if fp.getcomptype() != "NONE":
            raise ValueError(f"unsupported WAV encoding {fp.getcomptype()!r}")
        rate = fp.getframerate()
        raw = fp.readframes(fp.getnframes())
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0, sample_rate=rate)


def write_wav(path, w: Waveform) -> None:
    """Write a 16-bit mono PCM WAV (values clipped to the int16 range)."""
    ints = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fp:
        fp.setnchannels(1)
        fp.setsampwidth(2)
        fp.setframerate(w.sample_rate)
        fp.writeframes(ints.tobytes())


# ---------------------------------------------------------------------------
# STFT / inverse


def stft(w: Waveform, window_len: int = 400, hop: int = 16, fft_size: int = 512) -> ComplexStft:
    """Hann-windowed one-sided STFT."""
    if fft_size < window_len:
        raise ValueError(f"fft_size {fft_size} shorter than window {window_len}")
    n = len(w.samples)
    t = frame_count(n, window_len, hop)
    idx = np.arange(window_len)[None, :] + hop * np.arange(t)[:, None]
    frames = w.samples[idx] * _hann(window_len)[None, :]
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return ComplexStft(frames=spec, window_len=window_len, hop=hop, fft_size=fft_size)


def istft_phase_borrow(
    mag: np.ndarray,
    phase_source: ComplexStft,
    window_len: int,
    hop: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Overlap-add resynthesis of `mag` carried on `phase_source`'s phase.

    Each frame is mag[t] * exp(i * arg(phase_source.frames[t])); the
    synthesis window is Hann, and the output is normalized by the sum
    of squared windows (floored at 1e-8 where coverage is thin).
    """
    mag = np.asarray(mag, dtype=np.float64)
    if mag.shape != phase_source.frames.shape:
        raise ShapeError(
            f"magnitude {mag.shape} does not match phase frames {phase_source.frames.shape}"
        )
    spec = mag * np.exp(1j * np.angle(phase_source.frames))
    frames = np.fft.irfft(spec, n=phase_source.fft_size, axis=1)[:, :window_len]
    window = _hann(window_len)
    t = frames.shape[0]
    out_len = (t - 1) * hop + window_len
    acc = np.zeros(out_len)
    wsum = np.zeros(out_len)
    for i in range(t):
        lo = i * hop
        acc[lo:lo + window_len] += frames[i] * window
        wsum[lo:lo + window_len] += window * window
    return Waveform(acc / np.maximum(wsum, _OLA_FLOOR), sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# magnitude normalization


def log_normalize(mag: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    """(ln(mag + 1e-5) - mean) / std; flows need unbounded continuous inputs."""
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be nonnegative")
    mean, std = stats
    return (np.log(mag + MAG_FLOOR) - mean) / std


def denormalize(y: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    """Inverse of log_normalize; clips tiny negative magnitudes to zero."""
    mean, std = stats
    mag = np.exp(np.asarray(y, dtype=np.float64) * std + mean) - MAG_FLOOR
    return np.maximum(mag, 0.0)


# ---------------------------------------------------------------------------
# synthetic vowels


def synth_vowel(
    rng: Rng,
    vowel_label: str,
    f0: float,
    duration: float,
    speaker_shift: float = 0.0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Source-filter vowel: impulse train through two formant resonators.

    Both formant frequencies from the built-in table are multiplied by
    (1 + speaker_shift).  The output is peak-normalized to 0.9.  A touch
    of aspiration noise (drawn from `rng`) keeps segments distinct.
    """
    if vowel_label not in FORMANTS:
        raise ValueError(f"unknown vowel {vowel_label!r}, expected one of {VOWELS}")
    if not 70.0 <= f0 <= 350.0:
        raise ValueError(f"f0 {f0} Hz outside [70, 350]")
    n = int(round(duration * sample_rate))
    excitation = np.zeros(n)
    period = sample_rate / f0
    positions = np.arange(0, n, period)
    excitation[positions.astype(int)] = 1.0
    excitation += 0.001 * randn(rng, (n,))

    out = excitation
    for freq, bandwidth in zip(FORMANTS[vowel_label], (80.0, 120.0)):
        freq = freq * (1.0 + speaker_shift)
        r = math.exp(-math.pi * bandwidth / sample_rate)
        theta = 2.0 * math.pi * freq / sample_rate
        out = lfilter([1.0], [1.0, -2.0 * r * math.cos(theta), r * r], out)

    peak = np.max(np.abs(out))
    return Waveform(0.9 * out / peak, sample_rate=sample_rate)


def add_white_noise(w: Waveform, rng: Rng, snr_db: float) -> Waveform:
    """Add Gaussian noise scaled to the exact requested signal-to-noise ratio.

    snr_db = +inf is the no-noise sentinel and returns the waveform unchanged.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return Waveform(w.samples.copy(), sample_rate=w.sample_rate)
    p_signal = float(np.mean(w.samples**2))
    if p_signal == 0.0:
        raise ValueError("cannot scale noise against a silent signal")
    noise = randn(rng, (len(w.samples),))
    p_target = p_signal / (10.0 ** (snr_db / 10.0))
    noise *= math.sqrt(p_target / float(np.mean(noise**2)))
    return Waveform(w.samples + noise, sample_rate=w.sample_rate)
