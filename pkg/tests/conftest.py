"""Shared fixtures: a seeded generator, tiny models and a tiny corpus.

Everything here is pure numpy; no test needs network or GPU access.
"""

import numpy as np
import pytest

from dlgmoe.data.data_model import Dataset
from dlgmoe.data.data_schema import SynthSpec
from dlgmoe.data.data_service import generate
from dlgmoe.group.group_schema import KPolicy
from dlgmoe.model.model_params import ModelParams, init_params
from dlgmoe.model.model_schema import DlgMoeConfig, tiny_config


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture()
def tiny_params() -> ModelParams:
    return init_params(tiny_config())


@pytest.fixture()
def dynamic_config() -> DlgMoeConfig:
    """Two MoE layers trained with k drawn from [1, 2]."""
    return tiny_config(n_moe_layers=2, k_policy=KPolicy.dynamic(1, 2))


@pytest.fixture()
def dynamic_params(dynamic_config: DlgMoeConfig) -> ModelParams:
    return init_params(dynamic_config)


@pytest.fixture(scope="session")
def tiny_spec() -> SynthSpec:
    """Matches ``tiny_config``: d_in=4 and a 7-symbol vocabulary."""
    return SynthSpec(
        n_utts=6,
        t_min=12,
        t_max=20,
        d_in=4,
        vocab_sizes=[3, 3],
        seg_min=4,
        seg_max=8,
        token_min_frames=2,
        token_max_frames=4,
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec: SynthSpec) -> Dataset:
    return generate(tiny_spec)
