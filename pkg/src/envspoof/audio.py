"""WAV ingestion and clip normalization to mono 16 kHz, 10 s."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import FormatError, ParameterError

TARGET_RATE = 16000
TARGET_SECONDS = 10
TARGET_LENGTH = TARGET_RATE * TARGET_SECONDS

# Kaiser beta for the anti-aliasing FIR (~80 dB stopband)
KAISER_BETA = 8.0
CUTOFF_FRACTION = 0.95
HALF_TAPS_PER_PHASE = 16


@dataclass(frozen=True)
class AudioClip:
    """Waveform in [-1, 1].  ``samples`` is (n,) for mono or (n, 2) for stereo."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")
        if self.samples.shape[0] == 0:
            raise FormatError("empty clip")

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    def __len__(self) -> int:
        return self.samples.shape[0]


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file.

    PCM16 is scaled by 1/32768, so -32768 maps to -1.0 exactly.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        head = f.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError, UnboundLocalError) as exc:   # scipy leaks the last one on chunkless files
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 2 and samples.shape[1] == 1:
        samples = samples[:, 0]
    if samples.ndim == 2 and samples.shape[1] > 2:
        raise FormatError(f"{path}: {samples.shape[1]} channels, at most 2 supported")
    if samples.shape[0] == 0:
        raise FormatError(f"{path}: no samples")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip, float32: bool = False) -> None:
    """Write ``clip`` as PCM16 (default, clipped and rounded) or float32."""
    x = np.asarray(clip.samples)
    if float32:
        data = x.astype(np.float32)
    else:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, data)


def to_mono(clip: AudioClip) -> AudioClip:
    if clip.samples.ndim == 1:
        return clip
    if clip.channels > 2:
        raise FormatError(f"{clip.channels} channels, at most 2 supported")
    return AudioClip(clip.samples.mean(axis=1), clip.sample_rate)


def _design_filter(up: int, down: int) -> np.ndarray:
    ratio = max(up, down)
    numtaps = 2 * HALF_TAPS_PER_PHASE * ratio + 1
    taps = signal.firwin(numtaps, CUTOFF_FRACTION / ratio, window=("kaiser", KAISER_BETA))
    return taps * up


def resample(clip: AudioClip, target_rate: int = TARGET_RATE) -> AudioClip:
    """Kaiser windowed-sinc polyphase resampling of a mono clip.

    Output length is ``round(n * target / source)``.
    """
    if target_rate <= 0:
        raise ParameterError("target rate must be positive")
    if clip.sample_rate == target_rate:
        return clip
    frac = Fraction(target_rate, clip.sample_rate)
    up, down = frac.numerator, frac.denominator
    x = clip.samples
    y = signal.resample_poly(x, up, down, axis=0, window=_design_filter(up, down))
    n_out = int(np.floor(len(x) * frac + Fraction(1, 2)))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        pad = [(0, n_out - y.shape[0])] + [(0, 0)] * (y.ndim - 1)
        y = np.pad(y, pad)
    return AudioClip(y, target_rate)


def fit_duration(clip: AudioClip, rng: np.random.Generator | None = None,
                 length: int = TARGET_LENGTH) -> AudioClip:
    """Tile short clips and cut long ones to exactly ``length`` samples.

    Long clips start at an offset drawn uniformly from ``[0, n - length]``
    with ``rng``; pass ``rng=None`` for the deterministic offset 0 used at
    evaluation time.
    """
    x = clip.samples
    n = x.shape[0]
    if n == 0:
        raise FormatError("empty clip")
    if n == length:
        return clip
    if n < length:
        reps = -(-length // n)
        return AudioClip(np.tile(x, reps)[:length], clip.sample_rate)
    offset = 0 if rng is None else int(rng.integers(0, n - length + 1))
    return AudioClip(x[offset:offset + length], clip.sample_rate)


def load_clip(path, rng: np.random.Generator | None = None) -> AudioClip:
    """read -> mono -> 16 kHz -> 10 s."""
    clip = resample(to_mono(read_wav(path)), TARGET_RATE)
    return fit_duration(clip, rng)
