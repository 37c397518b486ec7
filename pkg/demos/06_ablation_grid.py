from avvp.data import SynthConfig
from avvp.experiments import format_table, make_splits, run_cell, summarize
from avvp.model import ModelConfig
from avvp.train import TrainConfig

# ### Comparing fusion variants
#
# Each cell runs the whole three-stage pipeline and scores the test split.
# `summarize` averages seeds; the single/multi columns are the mean per-event F
# of events that occur in one modality versus both.
#
# This takes about half a minute on one core. Raise `seeds` for steadier means.

train, test = make_splits(SynthConfig(num_videos=400, C=10, d_a=16, d_v=16, noise_sigma=0.5, seed=0), 250)
mcfg = ModelConfig(C=10, d=32, d_a=16, d_v=16)
tcfg = TrainConfig(epochs=25, lr0=3e-3, decay_every=10, batch_size=32)
seeds = [0]

cells = [run_cell(train, test, mcfg, tcfg, v, s) for v in ("full", "no_msg", "han", "han_ca") for s in seeds]
cells += [run_cell(train, test, mcfg, tcfg, "full", s, mu=0.0) for s in seeds]  # no consistency term
print(format_table(summarize(cells)))
