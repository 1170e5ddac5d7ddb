"""Counter-based derivation of per-stage seeds from one master seed.

Each pipeline stage owns a fixed counter, so adding a new stage (with a new
counter) never changes the seeds of existing ones.
"""

import numpy as np

STAGES = {
    "split": 0,
    "validation": 1,
    "train": 2,
    "predict": 3,
    "trace": 4,
    "sweep": 5,
}


def derive_seed(master, stage):
    counter = STAGES[stage]
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=(counter,))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
