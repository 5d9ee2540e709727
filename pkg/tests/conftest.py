import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from careledger import SimConfig, spawn_network
from careledger.ledger import Category, Kind, PrincipalId

FIXTURES = Path(__file__).parent.parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def build_care_sim(seed: int = 42):
    """Two-org network with a plan and one vitals+medication grant.

    Grant g001: nurse1 on plan1, window [1000, 600000), committed early.
    """
    sim = spawn_network(["hospital", "homecare"], SimConfig(seed=seed))
    sim.register_practitioner("nurse1", "homecare")
    sim.settle()
    sim.register_practitioner("drjones", "hospital")
    sim.settle()
    sim.register_person(Kind.PATIENT, "p001")
    sim.settle()
    sim.register_person(Kind.PATIENT, "p002")
    sim.settle()
    sim.create_plan("plan1", "p001", ["hospital", "homecare"], [("nurse1", "homecare"), ("drjones", "hospital")])
    sim.settle()
    sim.grant_access(
        "p001", "plan1", "nurse1",
        frozenset({Category.VITALS, Category.MEDICATION}),
        1000, 600_000,
    )
    sim.settle()
    return sim


@pytest.fixture
def care_sim():
    return build_care_sim()


def principals(kind_and_ids):
    return [PrincipalId(k, i) for k, i in kind_and_ids]
