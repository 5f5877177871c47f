"""
Shared fixtures: isolated EVOCONV_HOME and a seeded RNG
"""
import numpy as np
import pytest


@pytest.fixture(autouse=True)
def evoconv_home(tmp_path, monkeypatch):
    """Keep config and log files out of the real home directory"""
    home = tmp_path / "evoconv_home"
    monkeypatch.setenv("EVOCONV_HOME", str(home))
    return home


@pytest.fixture
def rng():
    return np.random.default_rng(7)
