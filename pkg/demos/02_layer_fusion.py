"""Encoder layerstacks and the learned layer fusion.

The stub encoder turns a log-Mel matrix into 12 hidden layers. The back-end
mixes a subset of them with softmax weights. Pinning the logits of the other
layers to -1e6 gives the same mix, which is how the restricted fusion set
relates to a full 12-layer one.
"""

import numpy as np

from envspoof.encoder import EncoderSpec, StubEncoder
from envspoof.features import MelSpec
from envspoof.model import ModelConfig, forward, fuse, init_params, select_layers
from envspoof.numerics import make_rng, softmax

rng = make_rng(1)
mel = MelSpec(rng.normal(size=(1024, 128)).astype(np.float32), normalized=True)
stack = StubEncoder(EncoderSpec(dim=32, seed=0))(mel)
print(f"layerstack {stack.layers.shape} (layers, frames, dim)")

cfg = ModelConfig(dim=32, hidden=32, attn=16)
params = init_params(cfg, make_rng(1, 1))
params.tensors["fusion"][:] = [0.5, 0.0, -0.5, 1.0, 0.0, 0.2]
print("fused layers", cfg.layers)
print("weights     ", np.round(softmax(params.tensors["fusion"]), 4))

pinned = np.full(12, -1e6)
pinned[3:9] = params.tensors["fusion"]
a = fuse(stack, params.tensors["fusion"], cfg.layers)
b = fuse(stack, pinned, range(1, 13))
print(f"restricted vs pinned 12-layer fusion: max diff {np.abs(a - b).max():.1e}")

out = forward(select_layers(stack.layers[None], cfg.layers), params)
print(f"logits {out.logits[0]}, score (bona - spoof) {out.score[0]:+.4f}")
