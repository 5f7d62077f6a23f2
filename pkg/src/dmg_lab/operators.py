"""Exact Bellman backups, fixed-point iteration and the worst-case Lipschitz adversary.

All backups share one evaluation path: compute a per-state bootstrap value
``m[s']`` and return ``R + gamma * P @ m`` on the output domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import EmpiricalBehaviorPolicy, MildlyGeneralizedPolicy, QTable, TabularMdp

DEFAULT_TOL = 1e-8
DIVERGENCE_PATIENCE = 10


def support_max(q: QTable, support: np.ndarray, needed: np.ndarray | None = None) -> np.ndarray:
    """Row-wise max of ``q`` over ``support``; NaN for rows with an empty support.

    ``needed`` marks the next states whose maximum is actually used; a missing
    entry or empty support there is an error.
    """
    support = np.asarray(support, dtype=bool)
    needed = support.any(axis=1) if needed is None else needed
    missing = support & ~q.support & needed[:, None]
    if missing.any():
        s, a = np.argwhere(missing)[0]
        raise KeyError(f"Q has no entry for (s'={s}, a'={a}) required by the backup")
    empty = needed & ~support.any(axis=1)
    if empty.any():
        raise KeyError(f"next state s'={int(np.flatnonzero(empty)[0])} has an empty action support")
    vals = np.where(support, q.values, -np.inf)
    with np.errstate(invalid="ignore"):
        m = vals.max(axis=1)
    m[~support.any(axis=1)] = np.nan
    return m


def _needed_next_states(mdp: TabularMdp, domain: np.ndarray) -> np.ndarray:
    return (mdp.P[domain] > 0).any(axis=0) if domain.any() else np.zeros(mdp.n_states, bool)


def _bootstrap(mdp: TabularMdp, m: np.ndarray, domain: np.ndarray) -> QTable:
    m = np.where(np.isfinite(m), m, 0.0)
    out = mdp.R + mdp.gamma * (mdp.P @ m)
    return QTable(out, domain)


def backup_generic(mdp: TabularMdp, q: QTable, u, domain: np.ndarray | None = None) -> QTable:
    """(T_u Q)(s,a) = R(s,a) + gamma E_{s'}[max_{a' in supp u(.|s')} Q(s',a')]."""
    sup = np.asarray(u) > 0
    domain = sup if domain is None else np.asarray(domain, dtype=bool)
    m = support_max(q, sup, _needed_next_states(mdp, domain))
    return _bootstrap(mdp, m, domain)


def backup_in_sample(mdp: TabularMdp, q: QTable, beta_hat: EmpiricalBehaviorPolicy,
                     domain: np.ndarray | None = None) -> QTable:
    return backup_generic(mdp, q, beta_hat.support, domain)


def _dmg_mix(mdp, q, beta_tilde, lam, domain, q_wide=None):
    needed = _needed_next_states(mdp, domain)
    q_wide = q if q_wide is None else q_wide
    m_wide = support_max(q_wide, beta_tilde.widened, needed)
    m_in = support_max(q, beta_tilde.base.support, needed)
    return _bootstrap(mdp, lam * m_wide + (1.0 - lam) * m_in, domain)


def backup_dmg(mdp: TabularMdp, q: QTable, beta_tilde: MildlyGeneralizedPolicy, lam: float,
               domain: np.ndarray | None = None) -> QTable:
    """Mix of the widened-support max (weight lam) and the in-sample max (weight 1 - lam)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    domain = beta_tilde.widened if domain is None else np.asarray(domain, dtype=bool)
    return _dmg_mix(mdp, q, beta_tilde, lam, domain)


@dataclass(frozen=True)
class BackupSpec:
    kind: str
    lam: float = 0.0
    u: np.ndarray | None = None
    beta_hat: EmpiricalBehaviorPolicy | None = None
    beta_tilde: MildlyGeneralizedPolicy | None = None

    def __post_init__(self):
        if self.kind not in ("generic", "in_sample", "dmg"):
            raise ValueError(f"unknown backup kind {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.kind == "generic" and (self.u is None or not (np.asarray(self.u) > 0).any()):
            raise ValueError("generic backup needs a non-empty u")
        if self.kind == "in_sample" and self.beta_hat is None:
            raise ValueError("in_sample backup needs beta_hat")
        if self.kind == "dmg" and self.beta_tilde is None:
            raise ValueError("dmg backup needs beta_tilde")

    @classmethod
    def generic(cls, u) -> "BackupSpec":
        return cls("generic", u=np.asarray(u))

    @classmethod
    def in_sample(cls, beta_hat: EmpiricalBehaviorPolicy) -> "BackupSpec":
        return cls("in_sample", beta_hat=beta_hat)

    @classmethod
    def dmg(cls, beta_tilde: MildlyGeneralizedPolicy, lam: float) -> "BackupSpec":
        return cls("dmg", lam=lam, beta_tilde=beta_tilde)

    @property
    def domain(self) -> np.ndarray:
        if self.kind == "generic":
            return np.asarray(self.u) > 0
        if self.kind == "in_sample":
            return self.beta_hat.support
        return self.beta_tilde.widened

    def apply(self, mdp: TabularMdp, q: QTable) -> QTable:
        if self.kind == "generic":
            return backup_generic(mdp, q, self.u)
        if self.kind == "in_sample":
            return backup_in_sample(mdp, q, self.beta_hat)
        return backup_dmg(mdp, q, self.beta_tilde, self.lam)


@dataclass
class FixedPointReport:
    q_star: QTable
    iterations: int
    residual: float
    status: str = "converged"
    trace: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def value_iteration(mdp: TabularMdp, spec: BackupSpec, q0: QTable | None = None, tol: float = DEFAULT_TOL,
                    max_iter: int = 100_000) -> FixedPointReport:
    """Iterate ``spec`` from ``q0`` until the sup-norm residual drops to ``tol``.

    Status is "diverged" after DIVERGENCE_PATIENCE consecutive residual
    increases and "max_iter" when the budget runs out.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    domain = spec.domain
    q = QTable.constant(domain) if q0 is None else QTable(np.where(domain, q0.values, np.nan), domain)
    trace: list[float] = []
    rises = 0
    for it in range(1, max_iter + 1):
        q_next = spec.apply(mdp, q)
        res = q_next.sup_distance(q, domain)
        if trace and res > trace[-1]:
            rises += 1
        else:
            rises = 0
        trace.append(res)
        q = q_next
        if res <= tol:
            return FixedPointReport(q, it, res, "converged", trace)
        if rises >= DIVERGENCE_PATIENCE:
            return FixedPointReport(q, it, res, "diverged", trace)
    return FixedPointReport(q, max_iter, trace[-1] if trace else np.inf, "max_iter", trace)


def extract_greedy(q: QTable, support: np.ndarray) -> np.ndarray:
    """Deterministic argmax over ``support`` per state, ties to the lowest action id."""
    support = np.asarray(support, dtype=bool)
    empty = ~support.any(axis=1)
    if empty.any():
        raise ValueError(f"state {int(np.flatnonzero(empty)[0])} has an empty support")
    if (support & ~q.support).any():
        s, a = np.argwhere(support & ~q.support)[0]
        raise KeyError(f"Q has no entry for ({s}, {a})")
    vals = np.where(support, q.values, -np.inf)
    return vals.argmax(axis=1)


def lipschitz_extension(q: QTable, k_q: float, targets: np.ndarray, embeddings: np.ndarray) -> QTable:
    """Largest K_Q-Lipschitz-consistent values at ``targets`` given data values in ``q``.

    Out-of-sample targets get min_a (Q(s,a) + K_Q ||e(a~) - e(a)||) over the
    in-sample actions a; in-sample targets keep their own value.
    """
    if k_q < 0:
        raise ValueError("K_Q must be non-negative")
    targets = np.asarray(targets, dtype=bool)
    emb = np.asarray(embeddings, dtype=float)
    if emb.ndim == 1:
        emb = emb[:, None]
    out = np.full(q.values.shape, np.nan)
    for s in np.flatnonzero(targets.any(axis=1)):
        inside = np.flatnonzero(q.support[s])
        if inside.size == 0:
            raise KeyError(f"state {s} has no in-sample values to extend from")
        dist = np.sqrt(((emb[:, None, :] - emb[None, inside, :]) ** 2).sum(-1))
        cand = q.values[s, inside][None, :] + k_q * dist
        out[s] = cand.min(axis=1)
        out[s, inside] = q.values[s, inside]
    return QTable(out, targets | q.support)


def worst_case_backup(mdp: TabularMdp, q: QTable, beta_tilde: MildlyGeneralizedPolicy, lam: float,
                      k_q: float) -> QTable:
    """One DMG backup on the in-sample area where widened values come from the adversary."""
    ext = lipschitz_extension(q, k_q, beta_tilde.widened, mdp.embeddings)
    return _dmg_mix(mdp, q, beta_tilde, lam, beta_tilde.base.support, q_wide=ext)


def iterate_worst_case(mdp: TabularMdp, beta_tilde: MildlyGeneralizedPolicy, lam: float, k_q: float,
                       q0: QTable, k: int) -> list[QTable]:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    domain = beta_tilde.base.support
    q = QTable(np.where(domain, q0.values, np.nan), domain)
    seq = []
    for _ in range(k):
        q = worst_case_backup(mdp, q, beta_tilde, lam, k_q)
        seq.append(q)
    return seq


def iterate(mdp: TabularMdp, spec: BackupSpec, q0: QTable, k: int) -> list[QTable]:
    """The first ``k`` iterates of ``spec`` from ``q0`` (no stopping rule)."""
    domain = spec.domain
    q = QTable(np.where(domain, q0.values, np.nan), domain)
    seq = []
    for _ in range(k):
        q = spec.apply(mdp, q)
        seq.append(q)
    return seq
