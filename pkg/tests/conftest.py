import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=400, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end solves")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def configs_dir():
    return CONFIGS


_REFERENCES: dict = {}


def load_config(name: str, **overrides) -> dict:
    """Validated config from ``configs/<name>.json`` with nested overrides."""
    import copy
    import json

    from mfggp.config import validate

    with open(os.path.join(CONFIGS, f"{name}.json")) as fh:
        raw = json.load(fh)
    raw = copy.deepcopy(raw)
    for path, value in overrides.items():
        node = raw
        keys = path.split("__")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return validate(raw)


def cached_reference(cfg: dict):
    """Stationary reference solve, shared across tests with the same environment."""
    import json

    from mfggp.pipeline import stationary_reference

    key = json.dumps([cfg["domain"], cfg["environment"], cfg["reference"], cfg["solver"]], sort_keys=True)
    if key not in _REFERENCES:
        _REFERENCES[key] = stationary_reference(cfg)
    return _REFERENCES[key]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
