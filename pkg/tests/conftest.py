"""Shared fixtures: spec files and small noise ensembles."""
from __future__ import annotations

import pathlib

import pytest

import mfbsde_lq as mf

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> pathlib.Path:
    return FIXTURES


@pytest.fixture(scope="session")
def scalar_det_spec():
    return mf.load_spec(FIXTURES / "scalar_det.json")


@pytest.fixture(scope="session")
def scalar_riccati_spec():
    return mf.load_spec(FIXTURES / "scalar_riccati.json")


@pytest.fixture(scope="session")
def jump2_spec():
    return mf.load_spec(FIXTURES / "jump2.json")


@pytest.fixture(scope="session")
def zero_spec():
    return mf.load_spec(FIXTURES / "zero.json")
