"""Generate one synthetic sample, inspect its token split and run the tiny model."""

import numpy as np

from cagevit import TINY, build, forward, gen_dataset
from cagevit.experiments import task_for
from cagevit.model import partition_for

sample = gen_dataset(task_for(TINY, n_maps=3), 1)[0]
part = partition_for(TINY, sample.bundle)
print("label:", sample.label)
print("hot patches:", sample.hot.tolist())
print("major tokens (by salience):", part.major.tolist())
print("minor tokens (fused):", part.minor.tolist())

params = build(TINY, seed=0)
logits = forward(params, sample.image, sample.bundle).data
print("untrained logits:", np.round(logits, 4).tolist())
