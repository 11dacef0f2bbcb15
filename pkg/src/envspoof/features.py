"""Log-Mel filter-bank front-end and global normalization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .audio import TARGET_RATE, AudioClip
from .errors import FormatError, ParameterError, StateError

N_MELS = 128
WIN_LENGTH = 400   # 25 ms
HOP_LENGTH = 160   # 10 ms
N_FFT = 512
F_MIN = 20.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-5
TARGET_FRAMES = 1024


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ParameterError("frequency must be non-negative")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(f) if f.ndim == 0 else f


@dataclass(frozen=True)
class MelBank:
    weights: np.ndarray   # (n_mels, n_fft // 2 + 1)
    centers: np.ndarray   # Hz


def mel_bank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = TARGET_RATE,
             f_min: float = F_MIN, f_max: float = F_MAX) -> MelBank:
    """Triangular HTK-mel filters sampled at the FFT bin frequencies.

    At 512 points a few of the lowest filters are narrower than one bin.  A
    filter whose triangle contains no bin gets weight 1 on the bin nearest
    its center, so no band is silently empty.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    for i in np.flatnonzero(weights.sum(axis=1) == 0):
        weights[i, np.argmin(np.abs(freqs - edges[i + 1]))] = 1.0
    return MelBank(weights, edges[1:-1].copy())


_BANK = mel_bank()
_WINDOW = np.hanning(WIN_LENGTH)


@dataclass(frozen=True)
class MelSpec:
    frames: np.ndarray      # (T, 128)
    normalized: bool = False

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def power_spectrogram(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n < WIN_LENGTH:
        raise ParameterError(f"clip has {n} samples, need at least {WIN_LENGTH}")
    t = 1 + (n - WIN_LENGTH) // HOP_LENGTH
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:t]
    spec = np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def mel_energies(clip: AudioClip) -> np.ndarray:
    """Pre-log mel energies, shape (T, 128)."""
    if clip.sample_rate != TARGET_RATE or clip.samples.ndim != 1:
        raise ParameterError("logmel expects a mono 16 kHz clip")
    x = np.asarray(clip.samples, dtype=np.float64)
    return power_spectrogram(x) @ _BANK.weights.T


def logmel(clip: AudioClip) -> MelSpec:
    """Natural-log mel energies, floored at 1e-10.  T = 1 + (N - 400) // 160."""
    return MelSpec(np.log(np.maximum(mel_energies(clip), LOG_FLOOR)))


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    source: str = ""
    count: int = 0

    def __post_init__(self):
        if not self.std > 0:
            raise ParameterError("std must be positive")


def compute_global_stats(specs: Iterable[MelSpec], source: str = "") -> NormStats:
    """Scalar mean/std (population) over every cell of the training specs.

    Two passes (sum, then squared deviations) so the result is stable.
    """
    specs = list(specs)
    if not specs:
        raise ParameterError("no training clips to compute statistics from")
    for s in specs:
        if s.normalized:
            raise StateError("statistics need unnormalized features")
    count = sum(s.frames.size for s in specs)
    total = sum(float(np.sum(s.frames, dtype=np.float64)) for s in specs)
    mean = total / count
    sq = sum(float(np.sum((s.frames.astype(np.float64) - mean) ** 2)) for s in specs)
    std = max(float(np.sqrt(sq / count)), STD_FLOOR)
    return NormStats(mean, std, source, count)


def write_stats(stats: NormStats, path) -> None:
    Path(path).write_text(
        f"mean={stats.mean:.16e}\nstd={stats.std:.16e}\nsource={stats.source}\ncount={stats.count}\n"
    )


def read_stats(path) -> NormStats:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: bad line {line!r}")
        fields[key.strip()] = value.strip()
    try:
        return NormStats(float(fields["mean"]), float(fields["std"]),
                         fields.get("source", ""), int(fields.get("count", 0)))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def normalize(spec: MelSpec, stats: NormStats) -> MelSpec:
    if spec.normalized:
        raise StateError("features are already normalized")
    return MelSpec((spec.frames - stats.mean) / stats.std, normalized=True)


def denormalize(spec: MelSpec, stats: NormStats) -> MelSpec:
    if not spec.normalized:
        raise StateError("features are not normalized")
    return MelSpec(spec.frames * stats.std + stats.mean, normalized=False)


def fit_frames(spec: MelSpec, target: int = TARGET_FRAMES) -> MelSpec:
    """Zero-pad (the post-normalization mean) or truncate to ``target`` frames."""
    if not spec.normalized:
        raise StateError("fit_frames expects normalized features")
    t = spec.num_frames
    if t == target:
        return spec
    if t > target:
        return MelSpec(spec.frames[:target], True)
    pad = np.zeros((target - t, spec.frames.shape[1]), dtype=spec.frames.dtype)
    return MelSpec(np.concatenate([spec.frames, pad]), True)
