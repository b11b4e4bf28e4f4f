"""Live registry server and tiny run configurations for end-to-end tests."""

from __future__ import annotations

import multiprocessing
import os
import time
from dataclasses import dataclass

import httpx
import pytest
import uvicorn
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from hpalf.db import Base
from hpalf.schemas import MaskSpec, TrainConfig


@dataclass
class LiveRegistry:
    base_url: str
    session_factory: sessionmaker


@pytest.fixture(scope="session")
def live_registry(tmp_path_factory) -> LiveRegistry:
    """Spin up the registry API over a temporary SQLite database."""

    db_path = tmp_path_factory.mktemp("e2e") / "registry.db"
    port = 8766
    base_url = f"http://127.0.0.1:{port}"

    original = os.environ.get("HPALF_DATABASE_URL")
    os.environ["HPALF_DATABASE_URL"] = f"sqlite:///{db_path}"

    engine = create_engine(os.environ["HPALF_DATABASE_URL"], connect_args={"check_same_thread": False})
    Base.metadata.drop_all(bind=engine)
    Base.metadata.create_all(bind=engine)

    # spawn so the server reads the database URL afresh instead of inheriting this process's engine
    process = multiprocessing.get_context("spawn").Process(
        target=uvicorn.run,
        args=("hpalf.main:app",),
        kwargs={"host": "127.0.0.1", "port": port, "log_level": "warning"},
        daemon=True,
    )
    process.start()

    try:
        deadline = time.time() + 30
        while time.time() < deadline:
            try:
                response = httpx.get(f"{base_url}/api/status", timeout=1.0)
                if response.status_code == 200:
                    break
            except Exception:
                time.sleep(0.2)
        else:
            raise RuntimeError("Failed to start registry server")

        yield LiveRegistry(base_url, sessionmaker(bind=engine, autocommit=False, autoflush=False))
    finally:
        process.terminate()
        process.join(timeout=5)
        engine.dispose()

        if original is None:
            os.environ.pop("HPALF_DATABASE_URL", None)
        else:
            os.environ["HPALF_DATABASE_URL"] = original

        db_path.unlink(missing_ok=True)


@pytest.fixture
def tiny_config() -> TrainConfig:
    """Smallest configuration that still exercises every network block."""
    return TrainConfig(
        image_size=16,
        width_multiplier="1/16",
        n_volumes=10,
        volume_depth=8,
        n_slices=3,
        outcomes=4,
        batch_size=4,
        max_epochs=2,
        max_steps=3,
        mask=MaskSpec(fraction=0.4, seed=1),
        seed=5,
    )
