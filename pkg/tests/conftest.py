import itertools

import numpy as np
import pytest

from dmg_lab.envs import chain_dataset, make_chain_mdp
from dmg_lab.mdp import TabularMdp, build_empirical_behavior, policy_return


def random_mdp(rng, n_states=None, n_actions=None, gamma=0.9, dim=1):
    S = n_states or int(rng.integers(2, 5))
    A = n_actions or int(rng.integers(2, 4))
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.uniform(0, 1, size=(S, A))
    d0 = rng.dirichlet(np.ones(S))
    emb = rng.uniform(0, 1, size=(A, dim))
    return TabularMdp(P, R, gamma, d0, emb)


def random_support(rng, S, A):
    sup = rng.random((S, A)) < 0.5
    for s in range(S):
        if not sup[s].any():
            sup[s, rng.integers(A)] = True
    return sup


def loop_value_iteration(P, R, gamma, support, iters=3000):
    """Straight-line restricted value iteration, independent of dmg_lab.operators."""
    S, A = R.shape
    Q = np.zeros((S, A))
    for _ in range(iters):
        new = np.zeros((S, A))
        for s in range(S):
            for a in range(A):
                total = 0.0
                for t in range(S):
                    best = max(Q[t, b] for b in range(A) if support[t, b])
                    total += P[s, a, t] * best
                new[s, a] = R[s, a] + gamma * total
        Q = new
    return Q


def enumerate_best_policy(mdp, support):
    """Exhaustive search over deterministic policies restricted to ``support``."""
    choices = [np.flatnonzero(support[s]) for s in range(mdp.n_states)]
    best, best_pi = -np.inf, None
    for combo in itertools.product(*choices):
        J = policy_return(mdp, np.array(combo))
        if J > best + 1e-12:
            best, best_pi = J, np.array(combo)
    return best, best_pi


@pytest.fixture
def chain():
    return make_chain_mdp()


@pytest.fixture
def chain_beta(chain):
    return build_empirical_behavior(chain_dataset(), chain)
