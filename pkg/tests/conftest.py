import math
from pathlib import Path

import pytest

from pricequake.engine import ModelParams
from pricequake.network import ExchangeSpec, load_exchanges

REPO_ROOT = Path(__file__).resolve().parents[1]
SAMPLE_CONFIG = REPO_ROOT / "sample_config"

# Reference calibrated parameter set used across the suite.
REF_THRESHOLD = 0.03
REF_ZONE_SCALE = 20.0
REF_CAP_SCALE = 0.8
REF_NOISE_VAR = 0.0006
REF_NOISE_SD = math.sqrt(REF_NOISE_VAR)


def reference_params(seed: int = 0, noise_sd: float = REF_NOISE_SD) -> ModelParams:
    return ModelParams(
        threshold=REF_THRESHOLD,
        zone_scale=REF_ZONE_SCALE,
        cap_scale=REF_CAP_SCALE,
        noise_sd=noise_sd,
        seed=seed,
    )


def make_exchange(
    i: int,
    cap: float = 1.0,
    zone: float = 0.0,
    open_hour: float = 9.0,
    close_hour: float = 15.0,
    name: str | None = None,
) -> ExchangeSpec:
    return ExchangeSpec(
        id=i,
        name=name or f"X{i:02d}",
        capitalization=cap,
        time_zone=zone,
        open_hour=open_hour,
        close_hour=close_hour,
    )


def ring_registry(n: int = 24, caps=None, session: float = 6.0) -> list[ExchangeSpec]:
    """Synthetic registry with time zones spread evenly around the clock."""
    exchanges = []
    for k in range(n):
        z = -11.0 + 23.0 * k / max(n - 1, 1)
        cap = caps[k] if caps is not None else 1.0
        exchanges.append(
            make_exchange(
                k,
                cap=cap,
                zone=z,
                open_hour=(9.0 - z) % 24.0,
                close_hour=(9.0 + session - z) % 24.0,
            )
        )
    return exchanges


@pytest.fixture(scope="session")
def world_exchanges():
    return load_exchanges(SAMPLE_CONFIG / "exchanges.csv")


@pytest.fixture
def params():
    return reference_params(seed=7)
