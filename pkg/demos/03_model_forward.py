from dataclasses import replace

import numpy as np

from avvp.data import SynthConfig, generate_synthetic, stack_batch
from avvp.model import MMT, VARIANTS, ModelConfig, attention_entropy

# ### One forward pass, five variants
#
# `full` condenses each modality's encoder output into a few tanh-bounded
# messengers and lets the other modality attend only to those. `no_msg` attends
# to every token of the other stream, `no_fa` keeps the visual branch to itself,
# and `han`/`han_ca` are early-fusion baselines.

samples = generate_synthetic(SynthConfig(num_videos=4, C=6, d_a=12, d_v=12, seed=1)).samples
audio, visual, _ = stack_batch(samples)
cfg = ModelConfig(C=6, d=16, d_a=12, d_v=12)

for variant in VARIANTS:
    model = MMT(replace(cfg, variant=variant), seed=0)
    out = model.forward(audio, visual, record=True)
    n_params = sum(p.data.size for p in model.params.values())
    print(f"{variant:7s} params={n_params:6d} P_a{out.P_a.shape} Ptilde_video{out.Ptilde_video.shape}")

# Attention maps are kept when `record=True`. Rows are distributions, and with
# one messenger the decoder's cross-attention is trivially certain (entropy 0).

out = MMT(cfg, seed=0).forward(audio, visual, record=True)
for name, w in out.attention.items():
    print(f"{name:14s} shape={w.shape} row-sum={w.sum(-1).mean():.3f} entropy={attention_entropy(w):.3f}")

# Video-level predictions are convex mixtures of segment predictions.

p = out.numpy()
lo, hi = p["P_v"].min(1), p["P_v"].max(1)
print("visual pooling inside [min, max]:", bool(((p["Ptilde_v"] >= lo) & (p["Ptilde_v"] <= hi)).all()))
