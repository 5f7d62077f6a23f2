import json

import numpy as np
import pytest

from dmg_lab.mdp import QTable, build_mildly_generalized, policy_return
from dmg_lab.operators import BackupSpec, backup_dmg, backup_in_sample, extract_greedy, value_iteration
from dmg_lab.verify import (
    InstanceGenerator,
    TheoremReport,
    _contraction,
    check_contraction,
    check_overestimation_bound,
    check_performance_dominance,
    check_performance_lower_bound,
    overestimation_envelope,
    replay,
    worst_case_greedy,
)

from conftest import enumerate_best_policy


def test_contraction_degenerate_and_offset_witnesses():
    inst = InstanceGenerator()(3)
    mdp, beta = inst.mdp, inst.beta_hat
    wide = build_mildly_generalized(beta, 0.5, mdp)
    f = QTable(np.where(wide.widened, 1.25, np.nan), wide.widened)
    same = backup_dmg(mdp, f, wide, 0.5).sup_distance(backup_dmg(mdp, f, wide, 0.5))
    assert same == 0.0
    g = QTable(f.values + 2.0, wide.widened)
    ratio = backup_dmg(mdp, f, wide, 0.5).sup_distance(backup_dmg(mdp, g, wide, 0.5)) / 2.0
    assert ratio == pytest.approx(mdp.gamma, abs=1e-12)
    g_in = QTable(np.where(beta.support, 3.25, np.nan), beta.support)
    f_in = QTable(np.where(beta.support, 1.25, np.nan), beta.support)
    d = backup_in_sample(mdp, f_in, beta).sup_distance(backup_in_sample(mdp, g_in, beta))
    assert d / 2.0 == pytest.approx(mdp.gamma, abs=1e-12)


@pytest.mark.parametrize("which", ["in_sample", "dmg"])
def test_contraction_small_suite(which):
    rep = check_contraction(InstanceGenerator(), which, trials=20, pairs=10)
    assert rep.passed
    assert rep.theorem_id == ("lemma1" if which == "in_sample" else "thm2")
    assert rep.extras["max_ratio"] <= 0.9 + 1e-9


def test_contraction_rejects_bad_lambda():
    with pytest.raises(ValueError):
        check_contraction(InstanceGenerator(), "dmg", trials=1, lam=2.0)
    with pytest.raises(ValueError):
        check_contraction(InstanceGenerator(), "dmg", trials=0)


def test_corrupted_lambda_is_caught_and_replays():
    rep = _contraction(InstanceGenerator(), "dmg", 10, 10, 0.5, 4.0, 0)
    assert not rep.passed
    assert all(replay(rep))
    back = TheoremReport.from_dict(json.loads(rep.to_json()))
    assert all(replay(back))


def test_dominance_chain_strict_gap():
    gen = InstanceGenerator(kind="chain", gamma=0.5)
    inst = gen(0)
    wide = build_mildly_generalized(inst.beta_hat, 1.0, inst.mdp)
    q = value_iteration(inst.mdp, BackupSpec.dmg(wide, 0.25), tol=1e-12).q_star
    np.testing.assert_allclose(q.values, [[0.2, 1.0], [2.0, 0.2]], atol=1e-10)
    rep = check_performance_dominance(gen, eps_a=1.0, lam=0.25, trials=1)
    assert rep.passed
    assert rep.extras["max_gain"] == pytest.approx(1.0, abs=1e-10)


def test_dominance_zero_radius_is_equality():
    rep = check_performance_dominance(InstanceGenerator(), eps_a=0.0, trials=20)
    assert rep.passed
    assert abs(rep.extras["max_gain"]) <= 1e-9


def test_dominance_small_suite():
    assert check_performance_dominance(InstanceGenerator(), eps_a=0.5, lam=0.7, trials=30).passed


def test_overestimation_lambda0_and_k0_equality():
    rep = check_overestimation_bound(InstanceGenerator(), k_q=2.0, eps_a=0.5, lam=0.0, k=30, trials=10)
    assert rep.passed and rep.extras["max_abs_gap"] == 0.0
    rep = check_overestimation_bound(InstanceGenerator(), k_q=0.0, eps_a=0.5, lam=0.6, k=30, trials=10)
    assert rep.passed and rep.extras["max_abs_gap"] <= 1e-12


def test_overestimation_grid_is_tight():
    gen = InstanceGenerator(kind="grid", max_states=3, n_grid=11, margin=2)
    rep = check_overestimation_bound(gen, k_q=0.1, eps_a=1.0, lam=0.25, k=40, trials=5)
    assert rep.passed
    assert rep.extras["max_tightness"] == pytest.approx(1.0, abs=1e-9)


def test_envelope_formula():
    assert overestimation_envelope(0.25, 0.5, 2.0, 0.9, 1) == pytest.approx(0.25 * 0.5 * 2.0 * 0.9)
    assert overestimation_envelope(0.0, 0.5, 2.0, 0.9, 100) == 0.0


def test_lower_bound_limit_and_trend():
    gen = InstanceGenerator(kind="linear", max_states=3, n_grid=41, margin=4)
    rep = check_performance_lower_bound(gen, k_q=1.0, eps_sweep=(2.0, 1.0, 0.0), trials=4)
    for slacks in rep.extras["slacks"]:
        assert slacks[-1] == 0.0
    assert rep.extras["c_hat"] >= 0.0
    assert "not asserted" in rep.extras["note"]


def test_eps_d_matches_enumeration_on_small_random():
    gen = InstanceGenerator(kind="grid", max_states=3, n_grid=7, margin=2)
    rep = check_performance_lower_bound(gen, k_q=1.0, eps_sweep=(1.0, 0.0), trials=5)
    for t in range(5):
        inst = gen(t)
        full = np.ones((inst.mdp.n_states, inst.mdp.n_actions), bool)
        best, _ = enumerate_best_policy(inst.mdp, full)
        q_in = value_iteration(inst.mdp, BackupSpec.in_sample(inst.beta_hat), tol=1e-12).q_star
        j_in = policy_return(inst.mdp, extract_greedy(q_in, inst.beta_hat.support))
        assert rep.extras["eps_d"][t] == pytest.approx(best - j_in, abs=1e-9)


def test_worst_case_greedy_zero_radius_is_in_sample():
    inst = InstanceGenerator(kind="grid", max_states=3, n_grid=7, margin=2)(1)
    pi = worst_case_greedy(inst.mdp, inst.beta_hat, 0.0, 0.25, 1.0)
    np.testing.assert_array_equal(pi, inst.beta_hat.support.argmax(axis=1))


def test_lower_bound_rejects_bad_sweep():
    with pytest.raises(ValueError):
        check_performance_lower_bound(InstanceGenerator(kind="linear"), eps_sweep=(1.0, 2.0))


def test_reports_deterministic():
    a = check_overestimation_bound(InstanceGenerator(), k=10, trials=3).to_json()
    b = check_overestimation_bound(InstanceGenerator(), k=10, trials=3).to_json()
    assert a == b
    d = json.loads(a)
    assert set(d) == {"theorem_id", "passed", "instances_checked", "violations", "extras"}


def test_report_roundtrip(tmp_path):
    rep = check_performance_dominance(InstanceGenerator(), trials=2)
    rep.save(tmp_path / "r.json")
    back = TheoremReport.load(tmp_path / "r.json")
    assert back.to_json() == rep.to_json()
