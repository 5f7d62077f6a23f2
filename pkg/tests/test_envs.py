from collections import deque

import numpy as np
import pytest

from dmg_lab.agent import evaluate_policy
from dmg_lab.envs import (
    GridWorldSpec,
    PointMassSpec,
    ScoreReference,
    TabularEnv,
    chain_dataset,
    generate_dataset,
    make_chain_mdp,
    make_gridworld,
    make_pointmass,
    normalize_states,
    normalized_score,
    parse_behavior,
)
from dmg_lab.mdp import Dataset, Transition, optimal_values, policy_return, policy_value


def grid_bfs(spec):
    """Moves from every free cell to the nearest goal, computed on coordinates."""
    free = {(x, y) for x in range(spec.width) for y in range(spec.height)} - set(spec.obstacles)
    dist = {g: 0 for g in spec.goals}
    queue = deque(spec.goals)
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            c = (x + dx, y + dy)
            if c in free and c not in dist:
                dist[c] = dist[(x, y)] + 1
                queue.append(c)
    return dist


def test_chain_optimal_values():
    mdp = make_chain_mdp()
    q, pi = optimal_values(mdp)
    # stay forever in s1 earns 1/(1-0.5); s0 goes there first
    np.testing.assert_allclose(q.max(axis=1), [1.0, 2.0], atol=1e-10)
    np.testing.assert_array_equal(pi, [1, 0])
    assert len(chain_dataset()) == 2


@pytest.mark.parametrize("spec", [
    GridWorldSpec(),
    GridWorldSpec(width=5, height=4, goals=((4, 0),), obstacles=((2, 0), (2, 1), (2, 2))),
])
def test_gridworld_values_match_bfs(spec):
    env = make_gridworld(spec)
    dist = grid_bfs(spec)
    q, _ = optimal_values(env.mdp)
    for cell, i in env.index.items():
        expected = 0.0 if cell in spec.goals else spec.gamma ** (dist[cell] - 1)
        assert q[i].max() == pytest.approx(expected, abs=1e-9)
    assert env.shortest_path_length() == dist[spec.start]


def test_gridworld_rejects_unreachable_goal():
    with pytest.raises(ValueError):
        make_gridworld(GridWorldSpec(width=3, height=1, goals=((2, 0),), obstacles=((1, 0),)))
    with pytest.raises(ValueError):
        GridWorldSpec(goals=((5, 5),))


def test_gridworld_rollouts_match_policy_return():
    spec = GridWorldSpec(width=4, height=3, goals=((3, 2),))
    env = make_gridworld(spec)
    _, pi = optimal_values(env.mdp)
    mean, _ = evaluate_policy(lambda s: pi[s], env, episodes=3, discount=spec.gamma)
    assert mean == pytest.approx(policy_return(env.mdp, pi), abs=1e-12)


def test_tabular_env_rejects_bad_action():
    env = TabularEnv(make_chain_mdp())
    env.reset(np.random.default_rng(0))
    with pytest.raises(ValueError):
        env.step(2)


def test_pointmass_expert_reaches_goal():
    env = make_pointmass()
    ds = generate_dataset(env, "expert", 500, seed=3)
    arr = ds.arrays()
    finals = arr["next_states"].reshape(10, 50, 2)[:, -1]
    assert np.all(np.linalg.norm(finals - env.goal, axis=1) <= 0.1)
    assert not ds.warnings


def test_pointmass_dynamics_and_action_clip():
    env = make_pointmass(PointMassSpec(dt=0.5))
    env.reset(np.random.default_rng(0))
    env.state = np.array([0.9, 0.0])
    s2, r, done, terminal = env.step(np.array([3.0, 4.0]))
    # action rescaled to norm 1, then position clipped to the box
    np.testing.assert_allclose(s2, [1.0, 0.4])
    assert r == pytest.approx(-np.hypot(0.5, 0.1))
    assert not done and not terminal
    with pytest.raises(ValueError):
        PointMassSpec(dt=0.0)


def test_dataset_determinism(tmp_path):
    env = make_pointmass()
    a = generate_dataset(env, "mediocre:0.5", 300, seed=7)
    b = generate_dataset(env, "mediocre:0.5", 300, seed=7)
    a.save(tmp_path / "a.jsonl")
    b.save(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert "seed=7" in a.provenance
    c = generate_dataset(env, "mediocre:0.5", 300, seed=8)
    assert c.to_jsonl() != a.to_jsonl()
    back = Dataset.load(tmp_path / "a.jsonl")
    assert back.to_jsonl() == a.to_jsonl()


def test_mixture_labels_split_evenly():
    env = make_pointmass(PointMassSpec(horizon=5))
    ds = generate_dataset(env, "mixture:expert=0.5,random=0.5", 5000, seed=0)
    per_traj = ds.labels[::5]
    assert len(per_traj) == 1000
    frac = per_traj.count("expert") / 1000
    assert abs(frac - 0.5) <= 0.05


def test_unreachable_goal_warns():
    env = make_pointmass(PointMassSpec(horizon=3))
    ds = generate_dataset(env, "slow:0.01", 30, seed=0)
    assert len(ds) == 30
    assert ds.warnings


def test_tabular_dataset_and_sparse_shift():
    spec = GridWorldSpec(sparse=True)
    env = make_gridworld(spec)
    ds = generate_dataset(env, "expert", 8, seed=0)
    rewards = np.array([t.reward for t in ds])
    assert rewards.max() == 0.0 and rewards.min() == -1.0
    assert ds.is_tabular


def test_parse_behavior():
    assert parse_behavior("mediocre:0.3") == ("mediocre", {"p": 0.3})
    assert parse_behavior("mixture:expert=1,random=3")[1]["weights"] == {"expert": 0.25, "random": 0.75}
    for bad in ("mediocre:1.5", "nope", "random:1", "mixture:expert=0"):
        with pytest.raises(ValueError):
            parse_behavior(bad)


def test_normalize_roundtrip_and_floor():
    rng = np.random.default_rng(0)
    ts = tuple(Transition((float(x), 2.0), (0.0, 0.0), 0.0, (float(x) + 1, 2.0)) for x in rng.normal(3, 2, 200))
    ds, stats = normalize_states(Dataset(ts))
    assert stats.std[1] == 1e-3
    z = ds.arrays()["states"]
    np.testing.assert_array_equal(z[:, 1], 0.0)
    np.testing.assert_allclose(z[:, 0].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[:, 0].std(), 1.0, atol=1e-12)
    raw = np.array([t.state for t in ts])
    np.testing.assert_allclose(stats.denormalize(stats.normalize(raw)), raw, atol=1e-9)
    _, again = normalize_states(ds)
    assert again.mean[0] == pytest.approx(0.0, abs=1e-12) and again.std[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        normalize_states(chain_dataset())


def test_normalized_score():
    ref = ScoreReference(-80.0, -20.0)
    assert normalized_score(-80.0, ref) == 0.0
    assert normalized_score(-20.0, ref) == 100.0
    assert normalized_score(-50.0, ref) == 50.0
    with pytest.raises(ValueError):
        ScoreReference(1.0, 1.0)


def test_policy_value_of_chain_stay():
    mdp = make_chain_mdp()
    np.testing.assert_allclose(policy_value(mdp, np.array([0, 0])), [0.0, 2.0], atol=1e-12)
