"""Shared fixtures: one pretrained backbone and its task stores.

Session-scoped because pretraining and extraction are the expensive
steps; tests treat these objects as read-only.
"""

import pytest

from h2t import backbones as bb
from h2t import harness, synth
from h2t.data import TrainConfig
from h2t.store import extract_to_store


@pytest.fixture(scope="session")
def backbone():
    source = synth.make_source(4000, seed=0)
    spec = bb.mlp4_spec(synth.INPUT_DIM, synth.SOURCE_CLASSES)
    return bb.pretrain(spec, source,
                       TrainConfig(lr=0.05, steps=2500, seed=0, batch=256))


@pytest.fixture(scope="session")
def second_backbone():
    source = synth.make_source(4000, seed=1)
    spec = bb.mlp4_spec(synth.INPUT_DIM, synth.SOURCE_CLASSES)
    return bb.pretrain(spec, source,
                       TrainConfig(lr=0.05, steps=2500, seed=1, batch=256))


@pytest.fixture(scope="session")
def store_root(tmp_path_factory):
    return tmp_path_factory.mktemp("stores")


@pytest.fixture(scope="session")
def task_data(backbone, store_root):
    """{task name: (SplitTask, train Store, test Store)} for the full suite."""
    out = {}
    for name in synth.TASK_NAMES:
        task = synth.make_task(name, 1000, 1000, seed=0)
        train = extract_to_store(backbone, task.train,
                                 store_root / f"{name}_train.h2ta",
                                 dataset_id=name, split="train")
        test = extract_to_store(backbone, task.test,
                                store_root / f"{name}_test.h2ta",
                                dataset_id=name, split="test")
        out[name] = (task, train, test)
    return out


@pytest.fixture(scope="session")
def fast_grid():
    """Single-step-count grid used where full sweeps would be overkill."""
    return harness.HyperGrid(lrs=(0.5, 0.1), steps=(1200,),
                             reg_coefs=(1e-3, 1e-5), target_sizes=(64,),
                             fractions=harness.PAPER_FRACTION_GRID)


@pytest.fixture(scope="session")
def suite_runs(backbone, task_data, fast_grid):
    """lp + h2t MethodRuns for every task and three seeds (reused by the
    acceptance criteria, which read different slices of the same runs)."""
    runs = {}
    for name, (task, train_store, test_store) in task_data.items():
        for method in ("lp", "h2t"):
            for seed in (0, 1, 2):
                runs[(name, method, seed)] = harness.run_method(
                    method, backbone, task, train_store, test_store,
                    fast_grid, folds=5, seed=seed)
    return runs
