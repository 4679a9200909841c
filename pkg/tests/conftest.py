# tests/conftest.py
import numpy as np
import pytest

from app.services.datagen import Dataset
from app.services.scenario import ScenarioConfig


@pytest.fixture
def linear_config():
    """Small linear two-covariate scenario"""
    return ScenarioConfig(
        scenario_id="test-linear",
        p=2,
        n=400,
        alpha0=-0.9,
        alpha1=[0.7071067811865476, 0.7071067811865476],
        beta1=6.0,
        beta2=[0.6, -0.6],
        covariate_scale=0.6,
        replications=6,
        seed=7,
    )


@pytest.fixture
def hetero_config():
    """Effect modified by x1, about 30% treated"""
    return ScenarioConfig(
        scenario_id="test-hetero",
        p=2,
        n=600,
        alpha0=-0.9,
        alpha1=[0.8, 0.6],
        beta1=2.0,
        beta2=[0.72, 0.96],
        theta=[1.5],
        interaction_subset=[1],
        replications=4,
        seed=11,
        estimators=["unadjusted", "patt-matched", "patt-source"],
    )


@pytest.fixture
def small_dataset():
    """Eight units, two covariates, treated units shifted up"""
    X = np.array(
        [
            [0.1, 1.0],
            [0.4, 0.2],
            [0.9, -0.3],
            [1.3, 0.5],
            [-0.2, 0.1],
            [0.0, -0.4],
            [0.5, 0.8],
            [1.1, -0.1],
        ]
    )
    W = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    Y = np.array([3.0, 2.5, 2.0, 4.0, 0.5, 0.0, 1.0, 1.5])
    return Dataset(X, W, Y)
