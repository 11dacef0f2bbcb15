"""In-memory data for training tests: class-dependent random layer stacks."""

import numpy as np

from envspoof.datakit import Entry
from envspoof.encoder import LayerStack
from envspoof.numerics import make_rng


class ToyStacks:
    """Spoof trials carry a constant offset on a few feature dims of layers 4-9."""

    def __init__(self, entries, frames=16, dim=8, seed=0, strength=0.8):
        self.data = {}
        for i, e in enumerate(entries):
            r = make_rng(seed, i)
            x = r.normal(0, 1, size=(12, frames, dim))
            if e.label == "spoof":
                x[3:9, :, :2] += strength
            self.data[e.trial_id] = LayerStack(np.tanh(x))

    def __call__(self, trial_id, rng=None):
        return self.data[trial_id]


def toy_entries(n_bona, n_spoof, split="train", prefix="t"):
    labels = ["bona"] * n_bona + ["spoof"] * n_spoof
    return [Entry(f"{prefix}{split}{i:03d}", f"x/{i}.wav", lab, split) for i, lab in enumerate(labels)]
