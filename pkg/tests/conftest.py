import numpy as np
import pytest

from raedsi.core import DataSchema, Ensemble, ObservationSet, make_rng
from raedsi.synth import TankPriorConfig, generate_tank_ensemble


@pytest.fixture
def small_schema():
    return DataSchema(("A", "B", "C"), (10.0, 20.0, 30.0, 40.0))


@pytest.fixture
def small_ensemble(small_schema):
    rng = make_rng(11)
    return Ensemble(small_schema, rng.normal(size=(25, 3, 4)))


@pytest.fixture(scope="session")
def tank_prior():
    cfg = TankPriorConfig()
    schema = cfg.schema()
    return cfg, generate_tank_ensemble(cfg, schema, 300, make_rng(3))


def observations(schema, pairs, values, std):
    return ObservationSet([(schema.quantity_index(q), schema.time_index(t)) for q, t in pairs], values, std)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
