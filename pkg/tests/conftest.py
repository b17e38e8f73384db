from __future__ import annotations

import numpy as np
import pytest

from ernn.calibrate import RangeObserver, calibrate_model
from ernn.features import Utterance, synthetic_utterance
from ernn.rnnt import RnntModel, convert_to_hybrid, convert_to_integer, init_random_model
from ernn.topology import TopologyConfig, preset


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_topology() -> TopologyConfig:
    return preset("tiny")


@pytest.fixture(scope="session")
def tiny_model(tiny_topology: TopologyConfig) -> RnntModel:
    return init_random_model(tiny_topology, seed=0)


@pytest.fixture(scope="session")
def utterances(tiny_topology: TopologyConfig) -> list[Utterance]:
    return [
        synthetic_utterance(np.random.default_rng(100 + k), 12, tiny_topology.feature_width, id=f"utt{k}")
        for k in range(4)
    ]


@pytest.fixture(scope="session")
def observer(tiny_model: RnntModel, utterances: list[Utterance]) -> RangeObserver:
    return calibrate_model(tiny_model, utterances)


@pytest.fixture(scope="session")
def hybrid_model(tiny_model: RnntModel) -> RnntModel:
    return convert_to_hybrid(tiny_model)


@pytest.fixture(scope="session")
def integer_model(tiny_model: RnntModel, observer: RangeObserver) -> RnntModel:
    return convert_to_integer(tiny_model, observer)
