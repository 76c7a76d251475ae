from __future__ import annotations

import pytest
import torch

from nextlocmoe.backbone import build_model, collate, model_config
from nextlocmoe.data import SyntheticCityConfig, dataset_samples, generate_synthetic_city, normalize_coordinates


def small_city(seed: int = 3, n_users: int = 12, days: int = 5, **kw):
    cfg = SyntheticCityConfig(grid=8, n_locations=40, n_users=n_users, days=days, seed=seed, **kw)
    return generate_synthetic_city(cfg)


@pytest.fixture(scope="session")
def raw_city():
    return small_city()


@pytest.fixture(scope="session")
def city(raw_city):
    return normalize_coordinates(raw_city)


@pytest.fixture
def tiny_cfg():
    return model_config("tiny")


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_samples(city):
    cfg = model_config("tiny")
    return dataset_samples(city, cfg.M, cfg.N)


@pytest.fixture
def tiny_batch(tiny_samples):
    return collate(tiny_samples[:6], torch.float32)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    if call.excinfo is not None and call.excinfo.errisinstance(pytest.skip.Exception):
        return
    n, title = marker.args
    passed = call.excinfo is None
    prev = _CRITERIA.get(n, ("PASS", title))[0] == "PASS"
    _CRITERIA[n] = ("PASS" if passed and prev else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {outcome}  {title}")
