"""Train the back-end on a small synthetic corpus and watch dev EER fall.

Spoofed clips carry narrow spectral notches and a coarsely quantized
envelope. The run uses the stub encoder on the fly, so it needs no
precomputed embeddings. Expect about a minute on one CPU.
"""

import tempfile
from pathlib import Path

from envspoof.audio import fit_duration, read_wav, resample, to_mono
from envspoof.datakit import gen_synthetic_corpus, resolve, select
from envspoof.encoder import AudioStacks, EncoderSpec
from envspoof.features import compute_global_stats, logmel
from envspoof.training import TrainConfig, train

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    entries = gen_synthetic_corpus(3, 60, 240, root)
    manifest = root / "manifest.tsv"
    tr, dev = select(entries, "train"), select(entries, "dev")
    print(f"{len(tr)} train / {len(dev)} dev clips")

    stats = compute_global_stats(
        (logmel(fit_duration(resample(to_mono(read_wav(resolve(manifest, e.path))))))
         for e in tr), source="train")
    paths = {e.trial_id: resolve(manifest, e.path) for e in tr + dev}
    source = AudioStacks(paths, stats, EncoderSpec(dim=32, seed=0))

    cfg = TrainConfig(hidden=32, attn=16, max_steps=150, eval_every=25, seed=3)
    result = train(tr, dev, source, cfg)

for line in result.metrics_text().splitlines():
    step, loss, eer = line.split(",")
    if eer:   # dev evaluations only
        print(f"{step:>5} {loss:>12} {eer:>12}")
print(f"best dev EER {result.best_eer:.3f} at step {result.best_step}")
print("final fusion weights", result.trajectory[-1].round(4))
