import csv
import json
import math
from statistics import NormalDist
from types import SimpleNamespace

import numpy as np
import pytest

from qgldp.action import ActionProblem, ControlPath, TerminalMode, action, minimize_action
from qgldp.experiments import (
    BLOCK,
    SUITES,
    EventSpec,
    Setup,
    StudyReport,
    _wilson,
    energy_bound_study,
    is_probability,
    ldp_scaling_study,
    mc_probability,
    run_ensemble,
    run_suite,
    time_increment_study,
    weak_convergence_study,
)
from qgldp.experiments import _EventTask
from qgldp.model import ModelParams, QGModel
from qgldp.noise import NoiseSpec
from qgldp.spectral import GridSpec

A = 1.0


def ou_setup(n_steps=32, seed=0):
    g = GridSpec(2)
    m = QGModel(g, ModelParams(0.0, 0.0, 0.5, barotropic_limit=True))
    noise = NoiseSpec(c=1.0, s=0.0, m=1, layers=(True, False))
    return Setup(m, noise, np.zeros((2, 2, 2)), 1.0, n_steps, seed)


def ou_sd(eps, n_steps, T=1.0):
    dt = T / n_steps
    r = (1 + A * dt) ** -2
    return math.sqrt(eps * dt * r * (1 - r**n_steps) / (1 - r))


def small_setup(n_steps=16, kind="additive"):
    g = GridSpec(6)
    m = QGModel(g, ModelParams(1.0, 1.0, 0.05, beta=0.3, r=0.1))
    if kind == "additive":
        noise = NoiseSpec(c=1.0, s=1.0, m=8)
    else:
        noise = NoiseSpec(c=1.0, s=1.0, m=8, kind="multiplicative", a=1.0, b=0.5)
    xi = np.zeros((2,) + g.shape)
    xi[0, 0, 0] = 0.5
    return Setup(m, noise, xi, 0.5, n_steps, seed=3)


EVENT = EventSpec(TerminalMode(0, 1, 1), 1.0)


@pytest.fixture(scope="module")
def shift():
    s = ou_setup()
    prob = ActionProblem(s.model, s.basis, s.xi, s.T, s.n_steps + 1, EVENT.target())
    return minimize_action(prob).control


def test_setup_validation():
    s = ou_setup()
    with pytest.raises(ValueError):
        Setup(s.model, s.noise, s.xi, 0.0, 4)
    with pytest.raises(ValueError):
        Setup(s.model, s.noise, s.xi, 1.0, 0)
    with pytest.raises(ValueError):
        s.per_step(ControlPath(2.0, np.zeros((3, 2, 1))))
    with pytest.raises(ValueError):
        EventSpec(TerminalMode(), 1.0, "!=")


def test_per_step_interpolates_coarser_control():
    s = ou_setup(n_steps=4)
    h = ControlPath(1.0, np.array([0.0, 2.0, 4.0])[:, None, None] * np.array([[1.0], [0.0]]))
    np.testing.assert_allclose(s.per_step(h)[:, 0, 0], [0.5, 1.5, 2.5, 3.5])


def test_wilson_interval_reference_values():
    lo, hi = _wilson(5, 100)
    assert lo == pytest.approx(0.02154, abs=5e-5)
    assert hi == pytest.approx(0.11175, abs=5e-5)


def test_always_and_never_events():
    s = ou_setup(n_steps=8)
    yes = mc_probability(EventSpec(TerminalMode(), -1e9), 0.5, 500, s)
    assert yes.p == 1.0 and yes.hits == 500 and not yes.floor
    no = mc_probability(EventSpec(TerminalMode(), 1e9), 0.5, 500, s)
    assert no.p == 0.0 and no.floor and no.lo == 0.0
    assert no.hi == pytest.approx(1 - 0.05 ** (1 / 500))
    with pytest.raises(ValueError):
        mc_probability(EVENT, 0.5, 50, s)


def test_mc_matches_gaussian_oracle():
    s = ou_setup()
    n = 20_000
    est = mc_probability(EVENT, 0.5, n, s)
    p = 1 - NormalDist(0, ou_sd(0.5, 32)).cdf(1.0)
    assert abs(est.p - p) < 4 * math.sqrt(p * (1 - p) / n)
    assert est.lo <= est.p <= est.hi


def test_is_zero_shift_equals_mc():
    s = ou_setup()
    mc = mc_probability(EVENT, 0.5, 4000, s)
    is_ = is_probability(EVENT, 0.5, 4000, None, s)
    assert is_.hits == mc.hits
    assert is_.p == pytest.approx(mc.p, rel=1e-12)
    zero = ControlPath.zeros(1.0, 33, s.basis)
    assert is_probability(EVENT, 0.5, 4000, zero, s).p == pytest.approx(mc.p, rel=1e-12)


def test_is_weights_have_unit_mean(shift):
    s = ou_setup()
    est = is_probability(EventSpec(TerminalMode(), -1e9), 0.5, 20_000, shift, s)
    assert abs(est.p - 1) < 4 * math.sqrt(est.variance / est.n_paths)


def test_is_matches_gaussian_oracle_in_the_tail(shift):
    s = ou_setup()
    eps = 0.1
    est = is_probability(EVENT, eps, 20_000, shift, s)
    p = 1 - NormalDist(0, ou_sd(eps, 32)).cdf(1.0)
    assert abs(est.p - p) < 4 * math.sqrt(est.variance / est.n_paths)
    # relative error is far below what crude MC reaches with the same budget
    assert math.sqrt(est.variance / est.n_paths) / p < 0.05
    assert est.ess > 100
    with pytest.raises(ValueError):
        is_probability(EVENT, 0.0, 200, shift, s)


def test_worker_count_does_not_change_results():
    s = ou_setup(n_steps=8)
    task = _EventTask(s, 0.5, EVENT)
    n = BLOCK + 500
    one = run_ensemble(task, n, workers=1)
    two = run_ensemble(task, n, workers=2)
    np.testing.assert_array_equal(one["value"], two["value"])
    np.testing.assert_array_equal(one["logw"], two["logw"])
    small = run_ensemble(task, n, workers=1, block=700)
    np.testing.assert_array_equal(one["value"], small["value"])


def test_seed_changes_paths():
    a = run_ensemble(_EventTask(ou_setup(8, seed=0), 0.5, EVENT), 300)["value"]
    b = run_ensemble(_EventTask(ou_setup(8, seed=1), 0.5, EVENT), 300)["value"]
    assert not np.array_equal(a, b)


def test_ldp_scaling_study_structure(shift, tmp_path):
    s = ou_setup()
    rep = ldp_scaling_study(EVENT, [0.5, 0.2], ou_report_like(shift), s, 5000)
    assert [r["eps"] for r in rep.rows] == [0.5, 0.2]
    for r in rep.rows:
        assert r["rate"] == pytest.approx(-r["eps"] * math.log(r["p"]))
    assert rep.rows[1]["gap"] < rep.rows[0]["gap"]
    assert rep.passed
    with pytest.raises(ValueError):
        ldp_scaling_study(EVENT, [0.2, 0.5], ou_report_like(shift), s, 500)
    rep.write(tmp_path)
    man = json.loads((tmp_path / "ldp_scaling_manifest.json").read_text())
    assert man["passed"] is True and man["seeds"] == {"seed": 0, "stream": "noise"}


def ou_report_like(control):
    return SimpleNamespace(control=control, action=action(control, ou_setup().basis))


def test_weak_convergence_additive_slope(shift):
    s = ou_setup()
    rep = weak_convergence_study(shift, [0.1, 0.01, 0.001, 0.0], s, 200)
    slope = rep.rows[0]["slope"]
    assert 0.8 <= slope <= 1.2 and rep.passed
    assert rep.rows[-1]["mean_dist2"] == 0.0
    # for the OU path the distance is linear in eps exactly
    assert rep.rows[0]["mean_dist2"] / rep.rows[1]["mean_dist2"] == pytest.approx(10.0, rel=1e-9)


def test_weak_convergence_multiplicative_monotone():
    s = small_setup(kind="multiplicative")
    rep = weak_convergence_study(None, [0.1, 0.01], s, 100)
    assert rep.rows[1]["mean_dist2"] < rep.rows[0]["mean_dist2"]
    assert rep.passed


def test_time_increment_study():
    s = small_setup(n_steps=32)
    rep = time_increment_study(None, 0.05, [1, 2, 3, 4, 5], math.inf, s, 200)
    assert rep.passed
    vals = [r["I_n"] for r in rep.rows]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert rep.rows[0]["indicator_fraction"] == 1.0
    with pytest.raises(ValueError):
        time_increment_study(None, 0.05, [6], math.inf, s, 200)
    tight = time_increment_study(None, 0.05, [1, 2], 1e-12, s, 200)
    assert not tight.passed and tight.flags


def test_energy_bound_study():
    s = small_setup()
    rep = energy_bound_study(s, 0.01, [0.5, 1.0, 1.5, 2.0], 100)
    assert rep.passed and rep.rows[0]["r2"] >= 0.95
    assert rep.rows[0]["slope"] > 0
    with pytest.raises(ValueError):
        energy_bound_study(Setup(s.model, s.noise, 0 * s.xi, s.T, s.n_steps), 0.01, [1.0], 10)


@pytest.mark.parametrize(
    "name,config",
    [
        ("jacobian", {"N": 16, "n_pairs": 10}),
        ("elliptic", {"N": 8, "n_states": 50}),
        ("energy", {"N": 8, "n_samples": 3, "T": 0.2}),
        ("assumptions", {"N": 8}),
    ],
)
def test_suites_pass(name, config):
    rep = run_suite(name, **config)
    assert rep.passed and not rep.failing_seeds
    assert rep.name == f"suite_{name}"


def test_unknown_suite():
    assert set(SUITES) == {"jacobian", "elliptic", "energy", "assumptions"}
    with pytest.raises(ValueError, match="unknown suite"):
        run_suite("nope")


def test_report_csv_full_precision(tmp_path):
    rep = StudyReport("x", {}, [{"a": 1 / 3, "b": 2, "c": True}], True)
    rep.write_csv(tmp_path / "x.csv")
    rows = list(csv.reader(open(tmp_path / "x.csv")))
    assert rows == [["a", "b", "c"], [f"{1 / 3:.17g}", "2", "True"]]
    assert float(rows[1][0]) == 1 / 3
