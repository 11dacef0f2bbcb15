"""Manifests and the seeded synthetic corpus used for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .audio import TARGET_RATE, AudioClip, write_wav
from .errors import FormatError, ParameterError
from .features import mel_bank
from .numerics import make_rng

LABELS = ("bona", "spoof")
SPLITS = ("train", "dev", "eval")
HEADER = ("trial_id", "path", "label", "split")


@dataclass(frozen=True)
class Entry:
    trial_id: str
    path: str
    label: str
    split: str = "train"

    @property
    def is_bona(self) -> bool:
        return self.label == "bona"


def load_manifest(path, check_files: bool = False) -> list[Entry]:
    """Read a 4-column TSV manifest (header and ``#`` comments optional).

    With ``check_files`` every path, resolved against the manifest's
    directory, must exist.
    """
    path = Path(path)
    entries, seen = [], set()
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if tuple(cols) == HEADER:
            continue
        if len(cols) != 4:
            raise FormatError(f"{path}:{n}: expected 4 tab-separated columns, got {len(cols)}")
        trial_id, rel, label, split = cols
        if label not in LABELS:
            raise FormatError(f"{path}:{n}: bad label {label!r}")
        if split not in SPLITS:
            raise FormatError(f"{path}:{n}: bad split {split!r}")
        if trial_id in seen:
            raise FormatError(f"{path}:{n}: duplicate trial id {trial_id!r}")
        seen.add(trial_id)
        if check_files and not resolve(path, rel).exists():
            raise FileNotFoundError(f"{path}:{n}: {rel} does not exist")
        entries.append(Entry(trial_id, rel, label, split))
    return entries


def write_manifest(entries, path, comment: str | None = None) -> None:
    seen = set()
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("\t".join(HEADER))
    for e in entries:
        if e.trial_id in seen:
            raise FormatError(f"duplicate trial id {e.trial_id!r}")
        seen.add(e.trial_id)
        lines.append(f"{e.trial_id}\t{e.path}\t{e.label}\t{e.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(manifest_path, rel) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def select(entries, split: str) -> list[Entry]:
    return [e for e in entries if e.split == split]


def split_manifest(entries, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, list[Entry]]:
    """Seeded stratified split into train/dev/eval.

    Per class, counts are ``floor(n * f)`` with the remainder handed out by
    largest fractional part.  Entries keep their manifest order inside a split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions):
        raise ParameterError("need three non-negative fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions sum to {sum(fractions)}, not 1")
    used = sum(f > 0 for f in fractions)
    assign = {}
    for c, label in enumerate(LABELS):
        idx = [i for i, e in enumerate(entries) if e.label == label]
        if len(idx) < used:
            raise ParameterError(f"{len(idx)} {label} entries cannot fill {used} splits")
        exact = np.array(fractions) * len(idx)
        counts = np.floor(exact).astype(int)
        for j in np.argsort(-(exact - counts), kind="stable")[: len(idx) - counts.sum()]:
            counts[j] += 1
        order = make_rng(seed, c).permutation(len(idx))
        start = 0
        for split, k in zip(SPLITS, counts):
            for pos in order[start:start + k]:
                assign[idx[pos]] = split
            start += k
    out = {s: [] for s in SPLITS}
    for i, e in enumerate(entries):
        out[assign[i]].append(replace(e, split=assign[i]))
    return out


# synthetic corpus -----------------------------------------------------------

# mel filters (0-based) carrying the spoof notches
NOTCH_FILTERS = {"none": (40, 55, 70, 85, 100, 115), "domain2": (47, 62, 77, 92, 107, 122)}
NOTCH_MIN_HALF_WIDTH = 150.0   # Hz; the 512-point Hann window smears narrower notches shut
QUANT_LEVELS = 8
MIN_SECONDS, MAX_SECONDS = 2.0, 12.0


def _band_noise(rng, n, lo, hi):
    m = sfft.next_fast_len(n, real=True)
    spec = sfft.rfft(rng.standard_normal(m))
    f = sfft.rfftfreq(m, 1.0 / TARGET_RATE)
    spec[(f < lo) | (f > hi)] = 0
    out = sfft.irfft(spec, m)[:n]
    return out / (np.std(out) + 1e-12)


def _environmental(rng, n, domain):
    """Noise bursts plus AM tones over a faint noise floor."""
    t = np.arange(n) / TARGET_RATE
    x = 0.05 * _band_noise(rng, n, 50, 7500)
    if domain == "domain2":
        n_bursts, burst_len, f_lo = rng.integers(6, 14), (0.05, 0.4), 800
    else:
        n_bursts, burst_len, f_lo = rng.integers(2, 7), (0.2, 1.5), 100
    for _ in range(n_bursts):
        length = min(n, int(rng.uniform(*burst_len) * TARGET_RATE))
        start = int(rng.integers(0, n - length + 1))
        lo = rng.uniform(f_lo, 3000)
        hi = min(lo * rng.uniform(1.5, 4.0), 7800)
        burst = _band_noise(rng, length, lo, hi) * np.hanning(length)
        x[start:start + length] += rng.uniform(0.3, 1.0) * burst
    for _ in range(rng.integers(1, 4)):
        f0 = rng.uniform(150, 4000)
        am = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(0.3, 6.0) * t + rng.uniform(0, 2 * np.pi)))
        x += rng.uniform(0.1, 0.6) * am * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    return x


def notch_bands(shift: str = "none") -> list[tuple[float, float]]:
    """(lo, hi) Hz for each notch: the notched filter's support, widened to
    at least +-150 Hz around its center."""
    edges = np.concatenate([[20.0], mel_bank().centers, [8000.0]])
    bands = []
    for i in NOTCH_FILTERS[shift]:
        c = edges[i + 1]
        half = max((edges[i + 2] - edges[i]) / 2, NOTCH_MIN_HALF_WIDTH)
        bands.append((c - half, c + half))
    return bands


def _spoof_artifacts(x, shift):
    n = x.shape[0]
    m = sfft.next_fast_len(n, real=True)
    spec = sfft.rfft(x, m)
    f = sfft.rfftfreq(m, 1.0 / TARGET_RATE)
    for lo, hi in notch_bands(shift):
        spec[(f >= lo) & (f <= hi)] *= 0.01
    y = sfft.irfft(spec, m)[:n]
    # 8-level quantized envelope over 20 ms blocks
    block = TARGET_RATE // 50
    nb = -(-n // block)
    padded = np.pad(y, (0, nb * block - n))
    env = np.sqrt(np.mean(padded.reshape(nb, block) ** 2, axis=1)) + 1e-12
    q = np.maximum(np.ceil(env / env.max() * QUANT_LEVELS), 1) / QUANT_LEVELS * env.max()
    gain = np.repeat(q / env, block)[:n]
    return y * gain


def synth_clip(seed: int, index: int, spoof: bool, shift: str = "none") -> np.ndarray:
    """One clip, deterministic in ``(seed, index)``."""
    rng = make_rng(seed, index)
    n = int(rng.uniform(MIN_SECONDS, MAX_SECONDS) * TARGET_RATE)
    x = _environmental(rng, n, shift)
    if spoof:
        x = _spoof_artifacts(x, shift)
    level = rng.uniform(0.03, 0.2)
    x = x * (level / (np.sqrt(np.mean(x ** 2)) + 1e-12))
    return np.clip(x, -1.0, 32767 / 32768)


def gen_synthetic_corpus(seed: int, n_bona: int, n_spoof: int, out_dir, shift: str = "none",
                         fractions=(0.8, 0.1, 0.1)) -> list[Entry]:
    """Write WAVs plus ``manifest.tsv`` under ``out_dir``; return the manifest."""
    if n_bona < 1 or n_spoof < 1:
        raise ParameterError("need at least one clip per class")
    if shift not in NOTCH_FILTERS:
        raise ParameterError(f"unknown shift {shift!r}")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    labels = np.array(["bona"] * n_bona + ["spoof"] * n_spoof)
    labels = labels[make_rng(seed, 1 << 40).permutation(labels.size)]
    prefix = "syn" if shift == "none" else f"syn{shift}"
    entries = []
    for i, label in enumerate(labels):
        trial_id = f"{prefix}_{i:05d}"
        rel = f"wav/{trial_id}.wav"
        x = synth_clip(seed, i, label == "spoof", shift)
        write_wav(out_dir / rel, AudioClip(x, TARGET_RATE))
        entries.append(Entry(trial_id, rel, str(label), "train"))
    parts = split_manifest(entries, fractions, seed)
    order = {e.trial_id: i for i, e in enumerate(entries)}
    entries = sorted((e for part in parts.values() for e in part), key=lambda e: order[e.trial_id])
    write_manifest(entries, out_dir / "manifest.tsv",
                   comment=f"synthetic corpus seed={seed} n_bona={n_bona} n_spoof={n_spoof} shift={shift}")
    return entries
