"""Shared pytest fixtures for unit tests."""

from __future__ import annotations

import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from hpalf import tensorcore as tc
from hpalf.db import Base, get_session
from hpalf.main import app
from hpalf.tensorcore import Tensor

TEST_DATABASE_URL = "sqlite:///./test_hpalf.db"
engine = create_engine(TEST_DATABASE_URL, connect_args={"check_same_thread": False})
TestingSessionLocal = sessionmaker(bind=engine, autocommit=False, autoflush=False)


@pytest.fixture(autouse=True)
def float64_arithmetic():
    """Gradient and closed-form checks need double precision."""
    with tc.precision("float64"):
        yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="function")
def db_session():
    """Provide a clean database for each test."""
    Base.metadata.drop_all(bind=engine)
    Base.metadata.create_all(bind=engine)
    session = TestingSessionLocal()
    try:
        yield session
    finally:
        session.close()


@pytest.fixture(scope="function")
def client(db_session):
    """FastAPI TestClient bound to the temporary database."""

    def override_session():
        try:
            yield db_session
        finally:
            pass

    app.dependency_overrides[get_session] = override_session

    with TestClient(app) as test_client:
        yield test_client

    app.dependency_overrides.clear()


GRADIENT_STEP = 1e-4


def _numeric_gradient(fn, values: np.ndarray, eps: float = GRADIENT_STEP) -> np.ndarray:
    grad = np.zeros_like(values)
    flat = values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = fn(values)
        flat[i] = original - eps
        lower = fn(values)
        flat[i] = original
        out[i] = (upper - lower) / (2 * eps)
    return grad


@pytest.fixture
def numeric_gradient():
    """Central differences of a scalar function of one array."""
    return _numeric_gradient


def _gradient_error(build, values: np.ndarray) -> float:
    leaf = Tensor(values.copy(), requires_grad=True)
    with tc.Tape():
        tc.backward(build(leaf))
    analytic = np.zeros_like(values) if leaf.grad is None else leaf.grad
    numeric = _numeric_gradient(lambda v: float(build(Tensor(v)).data), values.copy())
    return float(np.linalg.norm(analytic - numeric) / (np.linalg.norm(numeric) + 1e-8))


@pytest.fixture
def gradient_error():
    """Relative error |analytic - central difference| / (|central difference| + 1e-8) of a scalar loss built from one leaf."""
    return _gradient_error


@pytest.fixture
def session_factory(db_session):
    """Session factory over the same clean test database, for code that opens its own sessions."""
    return TestingSessionLocal
