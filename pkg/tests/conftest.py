"""Shared fixtures: a small deterministic corpus and a fast model config.

Everything expensive is session-scoped so the suite builds each artifact
once; tests never mutate fixtures in place (models are re-created or
copied where training would touch them).
"""

import numpy as np
import pytest

from jointvl.config import default_config
from jointvl.corpus import gen_dataset
from jointvl.model import JointModel
from jointvl.rng import derive_rng

#: fast desk config used across unit tests: K=4 visual positions,
#: 16-token reports, a 2-layer model
TINY_OVERRIDES = {
    "model.layers": 2,
    "model.heads": 2,
    "model.hidden": 32,
    "model.ff": 64,
    "image.size": 16,
    "vis.channels": 16,
    "vis.strides": "4,2",
    "vis.sample_k": 3,
    "text.max_len": 16,
    "train.batch": 16,
    "train.epochs": 2,
}


def tiny_config(**extra):
    values = dict(TINY_OVERRIDES)
    values.update(extra)
    return default_config(values)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny-corpus")
    return gen_dataset(out, {"train": 48, "valid": 8, "test": 16}, seed=11,
                       image_size=16)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, tiny_corpus):
    """Untrained model over the tiny corpus vocabulary."""
    return JointModel.create(tiny_cfg, tiny_corpus.vocab,
                             derive_rng(tiny_cfg.seed, "init"))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
