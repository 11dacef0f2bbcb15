"""Frozen multi-layer encoder: a deterministic stub plus file ingestion.

Layers are numbered 1..L (block outputs); ``LayerStack.layers[l - 1]`` is
layer ``l``.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import TARGET_LENGTH, TARGET_RATE, fit_duration, read_wav, resample, to_mono
from .errors import DimensionError, FormatError, ParameterError
from .features import N_MELS, TARGET_FRAMES, MelSpec, NormStats, fit_frames, logmel, normalize
from .numerics import make_rng, mix_seed

MAGIC = b"LSTK"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MAX_VALUES = 1 << 34


@dataclass(frozen=True)
class LayerStack:
    layers: np.ndarray   # (L, T', D) float32

    def __post_init__(self):
        if self.layers.ndim != 3:
            raise DimensionError(f"layer stack must be 3-d, got {self.layers.shape}")

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    def layer(self, index: int) -> np.ndarray:
        if not 1 <= index <= self.num_layers:
            raise ParameterError(f"layer {index} outside 1..{self.num_layers}")
        return self.layers[index - 1]


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "stub"
    num_layers: int = 12
    dim: int = 768
    downsample: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("stub", "file"):
            raise ParameterError(f"unknown encoder kind {self.kind!r}")
        if self.num_layers < 1 or self.dim < 1 or self.downsample < 1:
            raise ParameterError("encoder sizes must be positive")


class StubEncoder:
    """Seeded random tanh stack with a mel skip connection into every layer.

    layer 1:  tanh(m P_0)
    layer l:  tanh(0.7 * H_{l-1} A_{l-1} + 0.3 * m P_{l-1})

    where ``m`` is the normalized mel averaged over non-overlapping groups
    of ``downsample`` frames.  Matrices are fixed at construction.
    """

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        self.proj = []
        self.mix = []
        for l in range(spec.num_layers):
            rng = make_rng(mix_seed(spec.seed, l))
            self.proj.append(rng.standard_normal((N_MELS, spec.dim)) / np.sqrt(N_MELS))
            a = rng.standard_normal((spec.dim, spec.dim)) / np.sqrt(spec.dim)
            self.mix.append(a if l > 0 else None)

    def __call__(self, mel: MelSpec) -> LayerStack:
        frames = np.asarray(mel.frames, dtype=np.float64)
        if frames.shape != (TARGET_FRAMES, N_MELS):
            raise DimensionError(f"stub encoder expects {TARGET_FRAMES}x{N_MELS}, got {frames.shape}")
        ds = self.spec.downsample
        t = TARGET_FRAMES // ds
        m = frames[: t * ds].reshape(t, ds, N_MELS).mean(axis=1)
        out = np.empty((self.spec.num_layers, t, self.spec.dim), dtype=np.float32)
        h = np.tanh(m @ self.proj[0])
        out[0] = h
        for l in range(1, self.spec.num_layers):
            h = np.tanh(0.7 * (h @ self.mix[l]) + 0.3 * (m @ self.proj[l]))
            out[l] = h
        return LayerStack(out)


def encode_stub(spec: EncoderSpec, mel: MelSpec) -> LayerStack:
    return StubEncoder(spec)(mel)


# layerstack files -----------------------------------------------------------

def write_layerstack(stack: LayerStack, path) -> None:
    data = np.ascontiguousarray(stack.layers, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, *data.shape))
        f.write(data.tobytes())


def read_layerstack(path) -> LayerStack:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, n_layers, frames, dim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        count = n_layers * frames * dim
        if count == 0 or count > _MAX_VALUES:
            raise FormatError(f"{path}: implausible shape {(n_layers, frames, dim)}")
        payload = f.read(count * 4)
        if len(payload) < count * 4:
            raise OSError(f"{path}: payload truncated ({len(payload)} of {count * 4} bytes)")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return LayerStack(values.reshape(n_layers, frames, dim))


# index files ----------------------------------------------------------------

def write_index(rows, path) -> None:
    with open(path, "w", newline="\n") as f:
        for trial_id, rel in rows:
            f.write(f"{trial_id}\t{rel}\n")


def read_index(path) -> dict[str, Path]:
    """Map trial id -> absolute path (relative entries resolve against the index)."""
    base = Path(path).parent
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 2 tab-separated fields")
        out[parts[0]] = base / parts[1]
    return out


def _safe_name(trial_id: str) -> str:
    if not trial_id or "/" in trial_id or "\\" in trial_id or trial_id in (".", ".."):
        raise ParameterError(f"trial id {trial_id!r} cannot be used as a file name")
    return trial_id


def encode(trial_ids, spec: EncoderSpec, out_dir, features: dict | None = None,
           stats: NormStats | None = None, source_dir=None, threads: int = 1) -> Path:
    """Write one layerstack per trial plus ``index.tsv``; returns the index path.

    ``kind="stub"`` runs the stub on stored (unnormalized) features, which
    are normalized with ``stats`` and fitted to 1024 frames first.
    ``kind="file"`` validates externally produced ``<trial_id>.lstk`` files in
    ``source_dir`` and indexes them in place.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trial_ids = list(trial_ids)
    rows = []
    if spec.kind == "stub":
        if stats is None or features is None:
            raise ParameterError("stub encoding needs features and stats")
        missing = [t for t in trial_ids if t not in features]
        if missing:
            raise OSError(f"no features for trial(s): {', '.join(missing)}")
        encoder = StubEncoder(spec)

        def work(trial_id):
            frames = np.load(features[trial_id])
            mel = fit_frames(normalize(MelSpec(frames), stats))
            name = _safe_name(trial_id) + ".lstk"
            write_layerstack(encoder(mel), out_dir / name)
            return trial_id, name

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            rows = list(pool.map(work, trial_ids))
    else:
        if source_dir is None:
            raise ParameterError("file encoding needs a source directory")
        for trial_id in trial_ids:
            src = Path(source_dir) / (_safe_name(trial_id) + ".lstk")
            if not src.exists():
                raise OSError(f"no layerstack for trial {trial_id}: {src}")
            stack = read_layerstack(src)
            if stack.num_layers != spec.num_layers:
                raise FormatError(f"{src}: {stack.num_layers} layers, expected {spec.num_layers}")
            rows.append((trial_id, os.path.relpath(src, out_dir)))
    index = out_dir / "index.tsv"
    write_index(rows, index)
    return index


# trial -> LayerStack sources -------------------------------------------------

class IndexedStacks:
    """Read layerstacks listed in an index file."""

    def __init__(self, index_path):
        self.paths = read_index(index_path)

    def __call__(self, trial_id: str, rng=None) -> LayerStack:
        try:
            path = self.paths[trial_id]
        except KeyError:
            raise OSError(f"no embedding for trial {trial_id}") from None
        return read_layerstack(path)


class AudioStacks:
    """Run the whole front-end plus stub encoder on demand.

    Long clips get a fresh random offset whenever an ``rng`` is passed
    (training); with ``rng=None`` the offset is 0.  Clips no longer than
    10 s have no randomness, so their stacks are cached after first use.
    """

    def __init__(self, wav_paths: dict, stats: NormStats, spec: EncoderSpec, cache: bool = True):
        self.wav_paths = dict(wav_paths)
        self.stats = stats
        self.encoder = StubEncoder(spec)
        self.cache = {} if cache else None
        self._fixed = {}

    def clip(self, trial_id: str, rng=None):
        try:
            path = self.wav_paths[trial_id]
        except KeyError:
            raise OSError(f"no audio for trial {trial_id}") from None
        clip = resample(to_mono(read_wav(path)), TARGET_RATE)
        self._fixed[trial_id] = len(clip) <= TARGET_LENGTH
        return fit_duration(clip, rng)

    def mel(self, trial_id: str, rng=None) -> MelSpec:
        return logmel(self.clip(trial_id, rng))

    def __call__(self, trial_id: str, rng=None) -> LayerStack:
        if self.cache is not None and trial_id in self.cache:
            return self.cache[trial_id]
        stack = self.encoder(fit_frames(normalize(self.mel(trial_id, rng), self.stats)))
        if self.cache is not None and self._fixed[trial_id]:
            self.cache[trial_id] = stack
        return stack
