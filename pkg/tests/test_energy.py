import math
import sys
from pathlib import Path

import numpy as np
import pytest

from torsamp.energy import (
    DEFAULT_KT_EXTERNAL,
    AnalyticOracle,
    AnalyticTorsionPotential,
    ExternalOracle,
    OracleError,
    ProtocolError,
    Reward,
    TableOracle,
    tabulate_oracle,
)
from torsamp.geometry import TorusPoint, metric_tensor, set_torsions
from torsamp.torus import TWO_PI

from helpers import make_chain

SERVER = [sys.executable, str(Path(__file__).parent / "dummy_energy_server.py")]


def test_zero_amplitude_potential(rng):
    pot = AnalyticTorsionPotential(terms=(((0.0, 1, 0.0),),))
    for _ in range(10):
        assert pot.energy_at(rng.uniform(0, TWO_PI, size=1)) == 0.0


def test_cosine_extremes():
    pot = AnalyticTorsionPotential(terms=(((1.0, 1, 0.0),),))
    assert pot.energy_at(np.array([0.0])) == pytest.approx(2.0, abs=1e-12)
    assert pot.energy_at(np.array([math.pi])) == pytest.approx(0.0, abs=1e-12)


def test_multiplicity_must_be_positive_integer():
    with pytest.raises(ValueError, match="multiplicity"):
        AnalyticTorsionPotential(terms=(((1.0, 0, 0.0),),))
    with pytest.raises(ValueError, match="multiplicity"):
        AnalyticTorsionPotential(terms=(((1.0, 1.5, 0.0),),))


def test_analytic_periodicity(rng):
    pot = AnalyticTorsionPotential(
        terms=(((1.0, 2, 0.3),), ((0.7, 3, 1.1),)),
        couplings=((0, 1, 0.5, 0.2),),
    )
    for _ in range(20):
        phi = rng.uniform(0, TWO_PI, size=2)
        for i in range(2):
            shifted = phi.copy()
            shifted[i] += TWO_PI
            assert pot.energy_at(shifted) == pytest.approx(pot.energy_at(phi), abs=1e-12)


def test_potential_file_roundtrip(tmp_path):
    pot = AnalyticTorsionPotential(
        terms=(((1.0, 2, 0.0), (0.5, 1, 0.4)), ((0.8, 3, math.pi),)),
        couplings=((0, 1, 0.6, 0.0),),
    )
    path = tmp_path / "pot.json"
    pot.save(path)
    assert AnalyticTorsionPotential.load(path) == pot


def test_analytic_oracle_measures_conformation(rng):
    graph, local = make_chain(4)
    pot = AnalyticTorsionPotential(terms=(((1.0, 2, 0.0),),))
    oracle = AnalyticOracle(pot, graph)
    for _ in range(10):
        phi = rng.uniform(0, TWO_PI, size=1)
        conf = set_torsions(local, TorusPoint(phi), graph)
        assert oracle.energy(conf) == pytest.approx(pot.energy_at(phi), abs=1e-9)


def test_table_oracle_accuracy(rng):
    # brute-force comparison against the analytic source on random points
    graph, local = make_chain(5)
    pot = AnalyticTorsionPotential(
        terms=(((1.0, 2, 0.0),), ((1.0, 3, math.pi),)),
        couplings=((0, 1, 1.0, 0.0),),
    )
    oracle = AnalyticOracle(pot, graph)
    table = tabulate_oracle(oracle, local, graph, side=100)
    worst = 0.0
    for _ in range(10_000):
        phi = rng.uniform(0, TWO_PI, size=2)
        conf = set_torsions(local, TorusPoint(phi), graph)
        worst = max(worst, abs(table.energy(conf) - pot.energy_at(phi)))
    assert worst < 0.01


def test_table_oracle_missing_grid():
    graph, _ = make_chain(5)
    with pytest.raises(OracleError, match="grid"):
        TableOracle(np.zeros(10), graph)  # 1D grid for a 2-torsion molecule


def test_log_reward_values(toy1_condition):
    cond = toy1_condition
    # E(pi/2) = 1 + cos(pi) = 0 -> log reward 0
    assert cond.reward.log_reward(TorusPoint(np.array([math.pi / 2]))) == pytest.approx(0.0, abs=1e-9)
    # E(pi/4) = 1 + cos(pi/2) = 1 = kT -> log reward -1
    assert cond.reward.log_reward(TorusPoint(np.array([math.pi / 4]))) == pytest.approx(-1.0, abs=1e-9)


def test_log_reward_matches_direct_evaluation(toy1_condition, rng):
    cond = toy1_condition
    pot = cond.reward.oracle.potential
    for _ in range(25):
        phi = rng.uniform(0, TWO_PI, size=1)
        assert cond.reward.log_reward(TorusPoint(phi)) == pytest.approx(
            -pot.energy_at(phi) / cond.reward.kT, abs=1e-9
        )


def test_log_reward_monotone_in_energy():
    graph, local = make_chain(4)
    for kt in (0.5, 1.0, 2.0):
        values = []
        for amp in (0.0, 1.0, 2.0):
            pot = AnalyticTorsionPotential(terms=(((amp, 2, 0.0),),))
            reward = Reward(oracle=AnalyticOracle(pot, graph), graph=graph, local=local, kT=kt)
            values.append(reward.log_reward(TorusPoint(np.array([0.0]))))
        assert values[0] > values[1] > values[2]


def test_log_reward_metric_volume_flag(toy1_condition, rng):
    cond = toy1_condition
    with_vol = Reward(oracle=cond.reward.oracle, graph=cond.graph, local=cond.local,
                      kT=1.0, use_metric_volume=True)
    phi = TorusPoint(rng.uniform(0, TWO_PI, size=1))
    conf = set_torsions(cond.local, phi, cond.graph)
    _, det = metric_tensor(conf, cond.graph)
    expected = cond.reward.log_reward(phi) - 0.5 * math.log(det)
    assert with_vol.log_reward(phi) == pytest.approx(expected, abs=1e-9)


def test_log_reward_floor_clamped(caplog):
    graph, local = make_chain(4)
    pot = AnalyticTorsionPotential(terms=(((1e7, 2, 0.0),),))
    reward = Reward(oracle=AnalyticOracle(pot, graph), graph=graph, local=local, kT=1e-3)
    import logging

    with caplog.at_level(logging.WARNING, logger="torsamp.energy"):
        val = reward.log_reward(TorusPoint(np.array([0.0])))
    assert val == -1e6
    assert any("clamped" in r.message for r in caplog.records)


def test_default_external_kt_is_room_temperature():
    assert DEFAULT_KT_EXTERNAL == pytest.approx(0.0019872 * 298.15, rel=1e-12)


# ---- external oracle protocol ----


def test_external_oracle_roundtrip(toy1_condition):
    cond = toy1_condition
    conf = cond.local.reference
    with ExternalOracle(SERVER + ["normal"], cond.graph, timeout=10) as oracle:
        assert oracle.units == "kcal/mol"
        e1 = oracle.energy(conf)
        e2 = oracle.energy(conf)
        assert e1 == e2  # purity, given a deterministic server
        # independent evaluation of the dummy server's energy function
        coords = conf.coords
        expected = sum(
            float(np.linalg.norm(coords[i] - coords[j]))
            for i in range(4) for j in range(i + 1, 4)
        )
        assert e1 == pytest.approx(expected, rel=1e-12)


def test_external_oracle_purity_100_calls(toy1_condition):
    cond = toy1_condition
    conf = cond.local.reference
    with ExternalOracle(SERVER + ["normal"], cond.graph, timeout=10) as oracle:
        values = {oracle.energy(conf) for _ in range(100)}
    assert len(values) == 1


def test_external_oracle_batch_and_reordering(toy1_condition, rng):
    cond = toy1_condition
    confs = [
        set_torsions(cond.local, TorusPoint(rng.uniform(0, TWO_PI, size=1)), cond.graph)
        for _ in range(8)
    ]
    with ExternalOracle(SERVER + ["normal"], cond.graph, timeout=10) as oracle:
        direct = oracle.energy_batch(confs)
    with ExternalOracle(SERVER + ["reorder"], cond.graph, timeout=10) as oracle:
        reordered = oracle.energy_batch(confs)
    assert direct == reordered


def test_external_oracle_error_reply(toy1_condition):
    cond = toy1_condition
    with ExternalOracle(SERVER + ["error_odd"], cond.graph, timeout=10) as oracle:
        with pytest.raises(OracleError, match="synthetic failure"):
            oracle.energy(cond.local.reference)


def test_external_oracle_bad_handshake(toy1_condition):
    with pytest.raises(ProtocolError, match="handshake"):
        ExternalOracle(SERVER + ["bad_handshake"], toy1_condition.graph, timeout=10)


def test_external_oracle_timeout(toy1_condition):
    cond = toy1_condition
    with ExternalOracle(SERVER + ["silent"], cond.graph, timeout=0.5) as oracle:
        with pytest.raises(OracleError, match="timed out"):
            oracle.energy(cond.local.reference)


def test_external_oracle_dead_process(toy1_condition):
    cond = toy1_condition
    oracle = ExternalOracle(SERVER + ["normal"], cond.graph, timeout=10)
    oracle._proc.kill()
    oracle._proc.wait()
    with pytest.raises(OracleError, match="died|exited|closed"):
        oracle.energy_batch([cond.local.reference])
    oracle.close()
