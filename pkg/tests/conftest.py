import os
import sys
import time
from pathlib import Path

import pytest

# training budgets are stated for a single core
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

sys.path.insert(0, str(Path(__file__).parent))

from mrasnn import architecture as arch  # noqa: E402
from mrasnn import data as d  # noqa: E402
from mrasnn import training as t  # noqa: E402


@pytest.fixture(scope="session")
def synth_split():
    ds = d.synth_dataset(3, 200, 1024, seed=0)
    return d.split(ds, 0.7, seed=0)


class Trained:
    def __init__(self, net, result, seconds):
        self.net = net
        self.result = result
        self.seconds = seconds


def _train(split, timesteps):
    tr, ev = split
    net = arch.MRASNN(arch.build_preset("synthetic", timesteps=timesteps), seed=0)
    start = time.perf_counter()
    # stop once the eval split is fully solved; the epoch cap is the budget
    res = t.train(net, tr, t.TrainConfig(epochs=30, seed=0), ev, target_accuracy=1.0)
    seconds = time.perf_counter() - start
    best = arch.checkpoint_from_bytes(res.best_checkpoint)
    return Trained(best, res, seconds)


@pytest.fixture(scope="session")
def trained_t4(synth_split):
    return _train(synth_split, 4)


@pytest.fixture(scope="session")
def trained_t1(synth_split):
    return _train(synth_split, 1)
