# Detecting slow processes by subsampling
#
# A noisy square wave with period 10 is nearly Markovian at full rate: the
# extra information carried by the slice two steps back is too small to pay
# the BIC penalty.  Keeping every fifth slice turns the slow hidden phase
# into a strong lag-2 dependence.

# %%
import numpy as np

from dbnsem.discover import find_non_markov_arcs, learn_ktbn, subsample_dataset
from dbnsem.model import Dataset

rng = np.random.default_rng(0)
sequences = []
for _ in range(10):
    phase = ((np.arange(1000) + rng.integers(10)) // 5) % 2
    flip = rng.random(1000) < 0.1
    sequences.append(np.where(flip, 1 - phase, phase)[:, None])
data = Dataset(("O",), (2,), sequences)

# %%
for factor in (1, 5):
    result = learn_ktbn(None, subsample_dataset(data, factor), k=3)
    arcs = find_non_markov_arcs(result)
    print(f"factor {factor}: {len(arcs)} non-Markovian arc(s)",
          [(a.lag, round(a.gain, 1)) for a in arcs])
