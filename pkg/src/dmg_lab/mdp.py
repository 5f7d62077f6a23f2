"""Finite MDPs, offline datasets, behavior policies and exact policy evaluation."""
from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STOCHASTIC_TOL = 1e-12
SOLVE_TOL = 1e-10
# Absorbs float noise in embedding distances (e.g. 0.1 * 3 vs 0.3).
DIST_TOL = 1e-12

JSONL_KEYS = ("state", "action", "reward", "next_state", "terminal")


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TabularMdp:
    """Finite discounted MDP whose actions carry coordinates in R^d.

    ``P[s, a]`` is the next-state distribution, ``R[s, a]`` the reward and
    ``embeddings[a]`` the action coordinates used for every action metric.
    """

    P: np.ndarray
    R: np.ndarray
    gamma: float
    d0: np.ndarray
    embeddings: np.ndarray
    r_max: float = 1.0
    action_names: tuple[str, ...] = ()

    def __post_init__(self):
        P = _frozen(self.P)
        R = _frozen(self.R)
        d0 = _frozen(self.d0)
        emb = np.array(self.embeddings, dtype=float)
        if emb.ndim == 1:
            emb = emb[:, None]
        emb = _frozen(emb)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "d0", d0)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "action_names", tuple(self.action_names))

        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ValueError(f"R must have shape {(S, A)}, got {R.shape}")
        if d0.shape != (S,):
            raise ValueError(f"d0 must have shape {(S,)}, got {d0.shape}")
        if emb.shape[0] != A:
            raise ValueError(f"need one embedding per action ({A}), got {emb.shape[0]}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > STOCHASTIC_TOL):
            raise ValueError("every row of P must be a probability vector")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("d0 must be a probability vector")
        if np.any(R < 0) or np.any(R > self.r_max):
            raise ValueError(f"rewards must lie in [0, r_max={self.r_max}]")
        if self.action_names and len(self.action_names) != A:
            raise ValueError("action_names length must match the number of actions")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def q_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    def action_distances(self) -> np.ndarray:
        """Pairwise Euclidean distances between action embeddings, shape (A, A)."""
        diff = self.embeddings[:, None, :] - self.embeddings[None, :, :]
        return np.sqrt((diff**2).sum(axis=-1))


@dataclass(frozen=True)
class Transition:
    state: object
    action: object
    reward: float
    next_state: object
    terminal: bool = False

    def to_json(self) -> str:
        row = {
            "state": _jsonable(self.state),
            "action": _jsonable(self.action),
            "reward": float(self.reward),
            "next_state": _jsonable(self.next_state),
            "terminal": bool(self.terminal),
        }
        return json.dumps(row)

    @classmethod
    def from_dict(cls, row: dict) -> "Transition":
        missing = [k for k in JSONL_KEYS if k not in row]
        if missing:
            raise KeyError(f"transition record missing keys {missing}")
        return cls(
            state=_unjson(row["state"]),
            action=_unjson(row["action"]),
            reward=float(row["reward"]),
            next_state=_unjson(row["next_state"]),
            terminal=bool(row["terminal"]),
        )


def _jsonable(x):
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    return [float(v) for v in np.asarray(x, dtype=float).ravel()]


def _unjson(x):
    if isinstance(x, list):
        return tuple(float(v) for v in x)
    return int(x)


@dataclass(frozen=True)
class Dataset:
    transitions: tuple[Transition, ...]
    provenance: str = ""
    # One label per transition: the behavior that generated it.
    labels: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        if not self.transitions:
            raise ValueError("dataset must contain at least one transition")
        state_kinds = {isinstance(t.state, tuple) for t in self.transitions}
        action_kinds = {isinstance(t.action, tuple) for t in self.transitions}
        if len(state_kinds) > 1 or len(action_kinds) > 1:
            raise ValueError("all transitions must share one state/action representation")
        if self.labels and len(self.labels) != len(self.transitions):
            raise ValueError("labels must be empty or one per transition")

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    @property
    def is_tabular(self) -> bool:
        t = self.transitions[0]
        return not isinstance(t.state, tuple) and not isinstance(t.action, tuple)

    def arrays(self) -> dict[str, np.ndarray]:
        """Column arrays; tabular ids stay integer, vectors become 2-D floats."""
        ts = self.transitions
        if self.is_tabular:
            s = np.array([t.state for t in ts], dtype=np.int64)
            a = np.array([t.action for t in ts], dtype=np.int64)
            s2 = np.array([t.next_state for t in ts], dtype=np.int64)
        else:
            s = np.array([t.state for t in ts], dtype=float)
            a = np.array([t.action for t in ts], dtype=float)
            s2 = np.array([t.next_state for t in ts], dtype=float)
        return {
            "states": s,
            "actions": a,
            "rewards": np.array([t.reward for t in ts], dtype=float),
            "next_states": s2,
            "terminals": np.array([t.terminal for t in ts], dtype=bool),
        }

    def to_jsonl(self) -> str:
        return "".join(t.to_json() + "\n" for t in self.transitions)

    def sidecar(self) -> dict:
        return {
            "provenance": self.provenance,
            "n_transitions": len(self.transitions),
            "labels": list(self.labels),
            "warnings": list(self.warnings),
        }

    def save(self, path: str | Path, sidecar: bool = True) -> None:
        path = Path(path)
        path.write_text(self.to_jsonl())
        if sidecar:
            Path(str(path) + ".meta.json").write_text(json.dumps(self.sidecar(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        transitions = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                transitions.append(Transition.from_dict(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(
            tuple(transitions),
            provenance=meta.get("provenance", ""),
            labels=tuple(meta.get("labels", ())),
            warnings=tuple(meta.get("warnings", ())),
        )


@dataclass(frozen=True)
class EmpiricalBehaviorPolicy:
    """Per-state conditional action frequencies of a tabular dataset.

    Rows of states never seen in the dataset are all zero; their support is empty.
    """

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))

    @property
    def support(self) -> np.ndarray:
        return self.probs > 0

    @property
    def states(self) -> np.ndarray:
        """Ids of the states that appear in the dataset."""
        return np.flatnonzero(self.support.any(axis=1))


@dataclass(frozen=True)
class MildlyGeneralizedPolicy:
    base: EmpiricalBehaviorPolicy
    eps_a: float
    widened: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "widened", _frozen(self.widened, dtype=bool))

    @property
    def support(self) -> np.ndarray:
        return self.widened

    def generalization_radius(self, mdp: TabularMdp) -> float:
        """max over widened actions of the distance to the nearest dataset action."""
        dist = mdp.action_distances()
        radius = 0.0
        for s in self.base.states:
            inside = np.flatnonzero(self.base.support[s])
            for a1 in np.flatnonzero(self.widened[s]):
                radius = max(radius, float(dist[a1, inside].min()))
        return radius


@dataclass(frozen=True)
class LipschitzParams:
    K_Q: float = 0.0
    K_P: float = 0.0
    K_R: float = 0.0
    K_g: float = 0.0
    g_max: float = 0.0

    def __post_init__(self):
        for name in ("K_Q", "K_P", "K_R", "K_g", "g_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def measure_lipschitz(mdp: TabularMdp) -> LipschitzParams:
    """Smallest K_P and K_R valid for ``mdp`` under the action-embedding metric."""
    dist = mdp.action_distances()
    A = mdp.n_actions
    k_p = k_r = 0.0
    for a1 in range(A):
        for a2 in range(a1 + 1, A):
            d = dist[a1, a2]
            dp = np.abs(mdp.P[:, a1, :] - mdp.P[:, a2, :]).max()
            dr = np.abs(mdp.R[:, a1] - mdp.R[:, a2]).max()
            if d <= 0:
                if dp > 0 or dr > 0:
                    return LipschitzParams(K_P=np.inf, K_R=np.inf)
                continue
            k_p = max(k_p, dp / d)
            k_r = max(k_r, dr / d)
    return LipschitzParams(K_P=float(k_p), K_R=float(k_r))


@dataclass
class QTable:
    """Action values on a declared (state, action) support; NaN elsewhere."""

    values: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        self.support = np.array(self.support, dtype=bool)
        if self.values.shape != self.support.shape:
            raise ValueError("values and support must have the same shape")
        self.values[~self.support] = np.nan
        if not np.all(np.isfinite(self.values[self.support])):
            raise ValueError("Q entries on the support must be finite")

    @classmethod
    def constant(cls, support: np.ndarray, c: float = 0.0) -> "QTable":
        return cls(np.full(support.shape, float(c)), support)

    def sup_distance(self, other: "QTable", mask: np.ndarray | None = None) -> float:
        mask = self.support & other.support if mask is None else mask
        if not mask.any():
            return 0.0
        return float(np.abs(self.values[mask] - other.values[mask]).max())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", "action", "value"])
        for s, a in zip(*np.nonzero(self.support)):
            w.writerow([int(s), int(a), repr(float(self.values[s, a]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, shape: tuple[int, int]) -> "QTable":
        values = np.full(shape, np.nan)
        support = np.zeros(shape, dtype=bool)
        for row in csv.DictReader(io.StringIO(text)):
            s, a = int(row["state"]), int(row["action"])
            values[s, a] = float(row["value"])
            support[s, a] = True
        return cls(values, support)


def build_empirical_behavior(dataset: Dataset | Iterable[Transition], mdp: TabularMdp) -> EmpiricalBehaviorPolicy:
    counts = np.zeros((mdp.n_states, mdp.n_actions))
    n = 0
    for i, t in enumerate(dataset):
        s, a = t.state, t.action
        if isinstance(s, tuple) or isinstance(a, tuple):
            raise ValueError(f"transition {i}: tabular ids required, got vectors")
        if not (0 <= s < mdp.n_states) or not (0 <= a < mdp.n_actions):
            raise ValueError(f"transition {i}: unknown state/action ({s}, {a})")
        counts[s, a] += 1
        n += 1
    if n == 0:
        raise ValueError("dataset must contain at least one transition")
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return EmpiricalBehaviorPolicy(probs)


def build_mildly_generalized(base: EmpiricalBehaviorPolicy, eps_a: float, mdp: TabularMdp) -> MildlyGeneralizedPolicy:
    """Widen each dataset state's support to every action within ``eps_a`` of a dataset action."""
    if eps_a < 0:
        raise ValueError("eps_a must be non-negative")
    close = mdp.action_distances() <= eps_a + DIST_TOL
    sup = base.support
    # widened[s, a'] = any_a sup[s, a] and close[a, a']
    widened = (sup.astype(int) @ close.astype(int)) > 0
    return MildlyGeneralizedPolicy(base, float(eps_a), widened)


def as_policy_matrix(policy, mdp: TabularMdp) -> np.ndarray:
    """Normalize a policy to an (S, A) row-stochastic matrix.

    Accepts a deterministic action array (entries < 0 mean undefined) or a matrix.
    Undefined states get an all-zero row.
    """
    pol = np.asarray(policy)
    S, A = mdp.n_states, mdp.n_actions
    if pol.ndim == 1:
        if pol.shape != (S,):
            raise ValueError(f"deterministic policy needs {S} entries")
        mat = np.zeros((S, A))
        for s, a in enumerate(pol):
            if a >= 0:
                mat[s, int(a)] = 1.0
        return mat
    if pol.shape != (S, A):
        raise ValueError(f"policy matrix must have shape {(S, A)}")
    mat = np.nan_to_num(pol.astype(float), nan=0.0)
    return mat


def policy_value(mdp: TabularMdp, policy) -> np.ndarray:
    """V^pi by a direct linear solve; NaN on states where pi is not evaluable."""
    pi = as_policy_matrix(policy, mdp)
    S = mdp.n_states
    defined = np.abs(pi.sum(axis=1) - 1.0) <= 1e-9
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    R_pi = (pi * mdp.R).sum(axis=1)

    reach = _reachable(P_pi, mdp.d0 > 0, defined)
    bad = np.flatnonzero(reach & ~defined)
    if bad.size:
        raise ValueError(f"policy undefined on reachable state {int(bad[0])}")

    # Largest set of defined states closed under P_pi.
    closed = defined.copy()
    while True:
        leaks = (P_pi[:, ~closed] > 0).any(axis=1) & closed
        if not leaks.any():
            break
        closed &= ~leaks
    idx = np.flatnonzero(closed)
    V = np.full(S, np.nan)
    if idx.size:
        M = np.eye(idx.size) - mdp.gamma * P_pi[np.ix_(idx, idx)]
        V[idx] = np.linalg.solve(M, R_pi[idx])
    return V


def _reachable(P_pi: np.ndarray, start: np.ndarray, defined: np.ndarray) -> np.ndarray:
    seen = start.copy()
    queue = deque(np.flatnonzero(start))
    while queue:
        s = queue.popleft()
        if not defined[s]:
            continue
        for t in np.flatnonzero(P_pi[s] > 0):
            if not seen[t]:
                seen[t] = True
                queue.append(t)
    return seen


def policy_return(mdp: TabularMdp, policy) -> float:
    V = policy_value(mdp, policy)
    mask = mdp.d0 > 0
    return float(mdp.d0[mask] @ V[mask])


def optimal_values(mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Unrestricted optimal (Q*, greedy policy) by value iteration."""
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        Qn = mdp.R + mdp.gamma * mdp.P @ Q.max(axis=1)
        done = np.abs(Qn - Q).max() <= tol
        Q = Qn
        if done:
            break
    return Q, Q.argmax(axis=1)


def dataset_from_pairs(pairs: Sequence[tuple[int, int]], mdp: TabularMdp, rng: np.random.Generator | None = None,
                       provenance: str = "pairs") -> Dataset:
    """One transition per (s, a) pair, next state sampled from the true model."""
    rng = np.random.default_rng(0) if rng is None else rng
    ts = []
    for s, a in pairs:
        s2 = int(rng.choice(mdp.n_states, p=mdp.P[s, a]))
        ts.append(Transition(int(s), int(a), float(mdp.R[s, a]), s2, False))
    return Dataset(tuple(ts), provenance=provenance)
