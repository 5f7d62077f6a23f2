"""Executable checks of the contraction, dominance, overestimation and generalization results.

Each check runs over seeded instances and returns a TheoremReport. Every
instance is checked by a pure function of (instance, params), so a violation
can be re-evaluated on its own with ``replay``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import chain_dataset, make_chain_mdp
from .mdp import (
    EmpiricalBehaviorPolicy,
    MildlyGeneralizedPolicy,
    QTable,
    TabularMdp,
    build_empirical_behavior,
    build_mildly_generalized,
    measure_lipschitz,
    optimal_values,
    policy_return,
    policy_value,
)
from .nn import Mlp, generalization_probe
from .operators import (
    BackupSpec,
    _dmg_mix,
    backup_in_sample,
    extract_greedy,
    iterate,
    iterate_worst_case,
    lipschitz_extension,
    value_iteration,
    worst_case_backup,
)

SLACK = 1e-9
VERIFY_TOL = 1e-12
THEOREM_IDS = ("thm1", "lemma1", "thm2", "thm3", "thm4", "thm5")


@dataclass
class Violation:
    seed: int
    location: str
    lhs: float
    rhs: float
    slack: float


@dataclass
class TheoremReport:
    theorem_id: str
    instances_checked: int
    violations: list[Violation] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "theorem_id": self.theorem_id,
            "passed": self.passed,
            "instances_checked": self.instances_checked,
            "violations": [asdict(v) for v in self.violations],
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "TheoremReport":
        if d["theorem_id"] not in THEOREM_IDS:
            raise ValueError(f"unknown theorem id {d['theorem_id']!r}")
        return cls(d["theorem_id"], int(d["instances_checked"]),
                   [Violation(**v) for v in d["violations"]], dict(d.get("extras", {})))

    @classmethod
    def load(cls, path: str | Path) -> "TheoremReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- instances

@dataclass(frozen=True)
class Instance:
    seed: int
    mdp: TabularMdp
    beta_hat: EmpiricalBehaviorPolicy


def _behavior_from_support(mdp: TabularMdp, support: np.ndarray) -> EmpiricalBehaviorPolicy:
    counts = support.astype(float)
    probs = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1.0)
    return EmpiricalBehaviorPolicy(probs)


@dataclass(frozen=True)
class InstanceGenerator:
    """Seeded source of (MDP, dataset support) pairs.

    kind:
      "random"  dense random dynamics, random embeddings in [0,1]^dim, every
                state carries at least one dataset action.
      "grid"    1-D integer action grid with one dataset action per state;
                the widened max is attained exactly at distance eps_a, which
                makes the worst-case overestimation envelope tight.
      "linear"  like "grid", but dynamics and rewards interpolate linearly
                between two endpoint models along the grid, so values vary
                smoothly with the action.
      "chain"   the fixed two-state chain with the stay-only dataset.
    """

    kind: str = "random"
    min_states: int = 2
    max_states: int = 5
    min_actions: int = 2
    max_actions: int = 5
    gamma: float = 0.9
    dim: int = 2
    support_density: float = 0.5
    n_grid: int = 101
    margin: int = 8

    def __post_init__(self):
        if self.kind not in ("random", "grid", "linear", "chain"):
            raise ValueError(f"unknown instance kind {self.kind!r}")
        if not (1 <= self.min_states <= self.max_states and 1 <= self.min_actions <= self.max_actions):
            raise ValueError("instance size bounds are inconsistent")
        if self.kind in ("grid", "linear") and self.n_grid <= 2 * self.margin:
            raise ValueError("n_grid must exceed twice the margin")

    def __call__(self, seed: int) -> Instance:
        if self.kind == "chain":
            mdp = make_chain_mdp(self.gamma)
            return Instance(seed, mdp, build_empirical_behavior(chain_dataset(), mdp))
        rng = np.random.default_rng(seed)
        S = int(rng.integers(self.min_states, self.max_states + 1))
        if self.kind == "random":
            A = int(rng.integers(self.min_actions, self.max_actions + 1))
            P = rng.dirichlet(np.ones(S), size=(S, A))
            R = rng.uniform(0, 1, size=(S, A))
            emb = rng.uniform(0, 1, size=(A, self.dim))
            support = rng.random((S, A)) < self.support_density
            for s in range(S):
                if not support[s].any():
                    support[s, rng.integers(A)] = True
        else:
            A = self.n_grid
            emb = np.arange(A, dtype=float)[:, None]
            if self.kind == "grid":
                P = rng.dirichlet(np.ones(S), size=(S, A))
                R = rng.uniform(0, 1, size=(S, A))
            else:
                x = np.linspace(0.0, 1.0, A)[None, :, None]
                P0 = rng.dirichlet(np.ones(S), size=S)[:, None, :]
                P1 = rng.dirichlet(np.ones(S), size=S)[:, None, :]
                P = (1 - x) * P0 + x * P1
                P /= P.sum(axis=2, keepdims=True)
                R0, R1 = rng.uniform(0, 1, size=(2, S, 1))
                R = (1 - x[..., 0]) * R0 + x[..., 0] * R1
            support = np.zeros((S, A), bool)
            picks = rng.integers(self.margin, A - self.margin, size=S)
            support[np.arange(S), picks] = True
        d0 = rng.dirichlet(np.ones(S))
        mdp = TabularMdp(P, R, self.gamma, d0, emb)
        return Instance(seed, mdp, _behavior_from_support(mdp, support))

    def to_dict(self) -> dict:
        return asdict(self)


def random_q(rng: np.random.Generator, support: np.ndarray, scale: float) -> QTable:
    return QTable(rng.uniform(-scale, scale, support.shape), support)


# ---------------------------------------------------------------- per-instance checks

def _contraction_instance(inst: Instance, p: dict) -> tuple[list[Violation], dict]:
    mdp = inst.mdp
    rng = np.random.default_rng([inst.seed, 1])
    if p["which"] == "in_sample":
        domain = inst.beta_hat.support

        def T(q):
            return backup_in_sample(mdp, q, inst.beta_hat)
    else:
        wide = build_mildly_generalized(inst.beta_hat, p["eps_a"], mdp)
        domain = wide.widened

        def T(q):
            # unvalidated path so a corrupted lambda reaches the arithmetic
            return _dmg_mix(mdp, q, wide, p["lam"], domain)

    out, worst = [], 0.0
    for j in range(p["pairs"]):
        f1 = random_q(rng, domain, 2 * mdp.q_max)
        f2 = random_q(rng, domain, 2 * mdp.q_max)
        gap = f1.sup_distance(f2, domain)
        lhs = T(f1).sup_distance(T(f2), domain)
        rhs = mdp.gamma * gap
        if gap > 0:
            worst = max(worst, lhs / gap)
        if lhs > rhs + SLACK:
            out.append(Violation(inst.seed, f"pair {j}", lhs, rhs, lhs - rhs))
    return out, {"max_ratio": worst}


def _dominance_instance(inst: Instance, p: dict) -> tuple[list[Violation], dict]:
    mdp = inst.mdp
    wide = build_mildly_generalized(inst.beta_hat, p["eps_a"], mdp)
    q_in = value_iteration(mdp, BackupSpec.in_sample(inst.beta_hat), tol=VERIFY_TOL).q_star
    q_dmg = value_iteration(mdp, BackupSpec.dmg(wide, p["lam"]), tol=VERIFY_TOL).q_star
    pi_in = extract_greedy(q_in, inst.beta_hat.support)
    pi_dmg = extract_greedy(q_dmg, wide.widened)
    v_in = policy_value(mdp, pi_in)
    v_dmg = policy_value(mdp, pi_dmg)
    out = []
    for s in inst.beta_hat.states:
        if v_dmg[s] < v_in[s] - SLACK:
            out.append(Violation(inst.seed, f"state {int(s)}", float(v_dmg[s]), float(v_in[s]),
                                 float(v_in[s] - v_dmg[s])))
    gap = float(np.max(v_dmg[inst.beta_hat.states] - v_in[inst.beta_hat.states]))
    return out, {"max_gain": gap}


def overestimation_envelope(lam: float, eps_a: float, k_q: float, gamma: float, k: int) -> float:
    return lam * eps_a * k_q * gamma / (1 - gamma) * (1 - gamma**k)


def _overestimation_instance(inst: Instance, p: dict) -> tuple[list[Violation], dict]:
    mdp = inst.mdp
    rng = np.random.default_rng([inst.seed, 2])
    B = inst.beta_hat.support
    wide = build_mildly_generalized(inst.beta_hat, p["eps_a"], mdp)
    q0 = random_q(rng, B, mdp.q_max)
    hat = iterate_worst_case(mdp, wide, p["lam"], p["k_q"], q0, p["k"])
    ins = iterate(mdp, BackupSpec.in_sample(inst.beta_hat), q0, p["k"])
    out = []
    tight = 0.0
    gap0 = 0.0
    for step, (h, i) in enumerate(zip(hat, ins), start=1):
        env = overestimation_envelope(p["lam"], p["eps_a"], p["k_q"], mdp.gamma, step)
        over = np.where(B, h.values - i.values, 0.0)
        for s, a in np.argwhere(B & (over < -SLACK)):
            out.append(Violation(inst.seed, f"step {step} (s={s}, a={a}) lower", float(h.values[s, a]),
                                 float(i.values[s, a]), float(-over[s, a])))
        for s, a in np.argwhere(B & (over > env + SLACK)):
            out.append(Violation(inst.seed, f"step {step} (s={s}, a={a}) upper", float(h.values[s, a]),
                                 float(i.values[s, a] + env), float(over[s, a] - env)))
        gap0 = max(gap0, float(np.abs(over).max()))
        if env > 0:
            tight = max(tight, float(over.max()) / env)
    return out, {"tightness": tight, "max_abs_gap": gap0}


def _worst_case_fixed_point(mdp, wide, lam, k_q, tol=VERIFY_TOL, max_iter=100_000) -> QTable:
    B = wide.base.support
    q = QTable.constant(B)
    for _ in range(max_iter):
        nxt = worst_case_backup(mdp, q, wide, lam, k_q)
        done = nxt.sup_distance(q, B) <= tol
        q = nxt
        if done:
            return q
    raise RuntimeError("worst-case iteration did not converge")


def worst_case_greedy(mdp: TabularMdp, beta_hat: EmpiricalBehaviorPolicy, eps_a: float, lam: float,
                      k_q: float) -> np.ndarray:
    """Greedy policy over the widened support when off-dataset values come from the adversary."""
    wide = build_mildly_generalized(beta_hat, eps_a, mdp)
    q_hat = _worst_case_fixed_point(mdp, wide, lam, k_q)
    ext = lipschitz_extension(q_hat, k_q, wide.widened, mdp.embeddings)
    return extract_greedy(ext, wide.widened)


def _lower_bound_instance(inst: Instance, p: dict) -> tuple[list[Violation], dict]:
    mdp = inst.mdp
    q_in = value_iteration(mdp, BackupSpec.in_sample(inst.beta_hat), tol=VERIFY_TOL).q_star
    pi_in = extract_greedy(q_in, inst.beta_hat.support)
    j_in = policy_return(mdp, pi_in)
    _, pi_star = optimal_values(mdp)
    j_star = policy_return(mdp, pi_star)
    slacks, returns = [], []
    for eps in p["eps_sweep"]:
        pi_hat = worst_case_greedy(mdp, inst.beta_hat, eps, p["lam"], p["k_q"])
        j_hat = policy_return(mdp, pi_hat)
        returns.append(j_hat)
        slacks.append(max(0.0, j_in - j_hat))
    out = []
    for i in range(1, len(slacks)):
        if slacks[i] > slacks[i - 1] + SLACK:
            out.append(Violation(inst.seed, f"eps_a {p['eps_sweep'][i - 1]} -> {p['eps_sweep'][i]}",
                                 slacks[i], slacks[i - 1], slacks[i] - slacks[i - 1]))
    for eps, j_hat in zip(p["eps_sweep"], returns):
        if eps == 0 and j_hat != j_in:
            out.append(Violation(inst.seed, "eps_a 0", j_hat, j_in, abs(j_in - j_hat)))
    ratios = [s / e for s, e in zip(slacks, p["eps_sweep"]) if e > 0]
    return out, {"slacks": slacks, "c_hat": max(ratios, default=0.0), "eps_d": j_star - j_in}


_CHECKS = {
    "lemma1": _contraction_instance,
    "thm2": _contraction_instance,
    "thm3": _dominance_instance,
    "thm4": _overestimation_instance,
    "thm5": _lower_bound_instance,
}


def _run(theorem_id: str, generator: InstanceGenerator, params: dict, trials: int, seed0: int):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = TheoremReport(theorem_id, 0)
    per_instance = []
    for t in range(trials):
        inst = generator(seed0 + t)
        v, extra = _CHECKS[theorem_id](inst, params)
        report.violations.extend(v)
        report.instances_checked += 1
        per_instance.append(extra)
    report.extras["params"] = dict(params)
    report.extras["generator"] = generator.to_dict()
    return report, per_instance


def check_contraction(generator: InstanceGenerator, which: str = "dmg", trials: int = 200, pairs: int = 50,
                      eps_a: float = 0.5, lam: float = 0.5, seed: int = 0) -> TheoremReport:
    """||T f1 - T f2|| <= gamma ||f1 - f2|| on the operator's own domain."""
    if which not in ("in_sample", "dmg"):
        raise ValueError(f"which must be in_sample or dmg, got {which!r}")
    if which == "dmg" and not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return _contraction(generator, which, trials, pairs, eps_a, lam, seed)


def _contraction(generator, which, trials, pairs, eps_a, lam, seed) -> TheoremReport:
    tid = "lemma1" if which == "in_sample" else "thm2"
    params = {"which": which, "pairs": pairs, "eps_a": eps_a, "lam": lam}
    report, extras = _run(tid, generator, params, trials, seed)
    report.extras["max_ratio"] = max(e["max_ratio"] for e in extras)
    return report


def check_performance_dominance(generator: InstanceGenerator, eps_a: float = 0.5, lam: float = 0.5,
                                trials: int = 200, seed: int = 0) -> TheoremReport:
    """The DMG-greedy policy is at least as good as the in-sample optimum at every dataset state."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    report, extras = _run("thm3", generator, {"eps_a": eps_a, "lam": lam}, trials, seed)
    report.extras["max_gain"] = max(e["max_gain"] for e in extras)
    return report


def check_overestimation_bound(generator: InstanceGenerator, k_q: float = 1.0, eps_a: float = 1.0,
                               lam: float = 0.25, k: int = 100, trials: int = 50, seed: int = 0) -> TheoremReport:
    """Worst-case iterates stay within the overestimation envelope of the in-sample iterates."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if k < 1:
        raise ValueError("k must be >= 1")
    params = {"k_q": k_q, "eps_a": eps_a, "lam": lam, "k": k}
    report, extras = _run("thm4", generator, params, trials, seed)
    report.extras["max_tightness"] = max(e["tightness"] for e in extras)
    report.extras["max_abs_gap"] = max(e["max_abs_gap"] for e in extras)
    return report


def check_performance_lower_bound(generator: InstanceGenerator, k_q: float = 1.0, k_p: float | None = None,
                                  eps_sweep=(8.0, 4.0, 2.0, 1.0, 0.0), lam: float = 0.25, trials: int = 50,
                                  seed: int = 0) -> TheoremReport:
    """Trend form of the performance lower bound.

    The bound's constant is not known in closed form, so the check asserts only
    that the measured shortfall does not grow as eps_a shrinks and is exactly
    zero at eps_a = 0. The empirical constant c_hat = max slack / eps_a and the
    implied C = c_hat (1 - gamma) / (K_P R_max) are reported, not asserted.
    """
    sweep = [float(e) for e in eps_sweep]
    if any(b >= a for a, b in zip(sweep, sweep[1:])) or min(sweep) < 0:
        raise ValueError("eps_a sweep must be strictly decreasing and non-negative")
    params = {"k_q": k_q, "eps_sweep": sweep, "lam": lam}
    report, extras = _run("thm5", generator, params, trials, seed)
    c_hat = max(e["c_hat"] for e in extras)
    implied = []
    for t, e in enumerate(extras):
        mdp = generator(seed + t).mdp
        kp = measure_lipschitz(mdp).K_P if k_p is None else k_p
        if kp > 0:
            implied.append(e["c_hat"] * (1 - mdp.gamma) / (kp * mdp.r_max))
    report.extras.update({
        "c_hat": c_hat,
        "implied_C": max(implied, default=0.0),
        "eps_d": [e["eps_d"] for e in extras],
        "slacks": [e["slacks"] for e in extras],
        "note": "trend and limit check only; the constant C is not asserted",
    })
    return report


# ---------------------------------------------------------------- network probe

def _probe_instance(seed: int, p: dict) -> tuple[list[Violation], dict]:
    """One random smooth critic; a TD step at (s, a) observed at a nearby a~, at step sizes alpha and alpha/2."""
    rng = np.random.default_rng(seed)
    sizes = (p["state_dim"] + p["action_dim"], *p["hidden"], 1)
    net = Mlp.init(sizes, rng, "softplus")
    s = rng.normal(size=p["state_dim"])
    a = rng.uniform(-1.0, 1.0, size=p["action_dim"])
    direction = rng.normal(size=p["action_dim"])
    a_tilde = a + p["distance"] * direction / np.linalg.norm(direction)
    g_max = max(np.linalg.norm(net.param_grad(np.r_[s, a])), np.linalg.norm(net.param_grad(np.r_[s, a_tilde])))
    alpha = p["step"] / g_max**2
    target = float(net.forward(np.r_[s, a])[0]) + p["td_error"]
    full = generalization_probe(net, target, s, a, a_tilde, alpha)
    half = generalization_probe(net, target, s, a, a_tilde, alpha / 2)
    ratio = full.residual / half.residual if half.residual != 0 else float("inf")
    out = []
    lo, hi = p["ratio_range"]
    if not lo <= ratio <= hi:
        out.append(Violation(seed, "residual ratio", ratio, lo if ratio < lo else hi,
                             (lo - ratio) if ratio < lo else (ratio - hi)))
    if full.conditions_hold and not 0.0 <= full.c1 <= 1.0:
        out.append(Violation(seed, "c1 range", full.c1, 1.0, max(full.c1 - 1.0, -full.c1)))
    return out, {"ratio": ratio, "c1": full.c1, "conditions_hold": full.conditions_hold}


def check_generalization_probe(trials: int = 20, seed: int = 0, hidden=(32, 32), state_dim: int = 2,
                               action_dim: int = 1, distance: float = 0.05, step: float = 0.05,
                               td_error: float = 1.0) -> TheoremReport:
    """The one-step change at a~ is c1 * delta up to a second-order remainder.

    Halving alpha must shrink the remainder by a factor in [3, 5], and c1 must
    lie in [0, 1] whenever the step-size and distance conditions hold.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    params = {"hidden": [int(h) for h in hidden], "state_dim": state_dim, "action_dim": action_dim,
              "distance": distance, "step": step, "td_error": td_error, "ratio_range": [3.0, 5.0]}
    report = TheoremReport("thm1", 0)
    extras = []
    for t in range(trials):
        v, e = _probe_instance(seed + t, params)
        report.violations.extend(v)
        report.instances_checked += 1
        extras.append(e)
    report.extras.update({
        "params": params,
        "ratios": [e["ratio"] for e in extras],
        "c1": [e["c1"] for e in extras],
        "conditions_hold": [e["conditions_hold"] for e in extras],
    })
    return report


def replay(report: TheoremReport) -> list[bool]:
    """Re-run each recorded violation's instance alone; True where it recurs at the same location."""
    params = report.extras["params"]
    if report.theorem_id == "thm1":
        def rerun(seed):
            return _probe_instance(seed, params)[0]
    else:
        gen = InstanceGenerator(**report.extras["generator"])
        check = _CHECKS[report.theorem_id]

        def rerun(seed):
            return check(gen(seed), params)[0]
    out = []
    for v in report.violations:
        fresh = rerun(v.seed)
        out.append(any(f.location == v.location and f.slack > SLACK for f in fresh))
    return out
