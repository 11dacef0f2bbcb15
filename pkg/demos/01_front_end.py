"""From a WAV file to the fixed 1024x128 log-Mel matrix.

A stereo 44.1 kHz clip of 12.5 s is written to a temp directory and then
pushed through each front-end stage, printing the shape after every step.
"""

import tempfile
from pathlib import Path

import numpy as np

from envspoof.audio import AudioClip, fit_duration, read_wav, resample, to_mono, write_wav
from envspoof.features import compute_global_stats, fit_frames, logmel, normalize
from envspoof.numerics import make_rng

rng = make_rng(0)
t = np.arange(int(12.5 * 44100)) / 44100
left = 0.3 * np.sin(2 * np.pi * 440 * t) + 0.05 * rng.normal(size=t.size)
right = 0.3 * np.sin(2 * np.pi * 660 * t) + 0.05 * rng.normal(size=t.size)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tone.wav"
    write_wav(path, AudioClip(np.stack([left, right], axis=1), 44100))
    clip = read_wav(path)
print(f"read       {clip.samples.shape} at {clip.sample_rate} Hz")

clip = to_mono(clip)
print(f"mono       {clip.samples.shape}")
clip = resample(clip, 16000)
print(f"resampled  {clip.samples.shape} at {clip.sample_rate} Hz")

# Longer than 10 s: a random window is cut out. Shorter clips are tiled.
clip = fit_duration(clip, make_rng(0, 1))
print(f"fitted     {clip.samples.shape}")

spec = logmel(clip)
print(f"log-Mel    {spec.frames.shape}, range {spec.frames.min():.1f}..{spec.frames.max():.1f}")

# Stats normally come from the training split; one clip is enough to show the API.
stats = compute_global_stats([spec], source="demo")
spec = fit_frames(normalize(spec, stats))
print(f"normalized {spec.frames.shape}, mean {spec.frames[:998].mean():+.2e}, "
      f"std {spec.frames[:998].std():.3f} (frames past 998 are zero padding)")
