"""Actor-critic agent with a mixed (widened / in-sample) Bellman target.

Value side: an expectile-regressed V approximates the in-sample max, twin
critics regress onto r + gamma (lam * Q'(s', pi'(s')) + (1 - lam) V(s')).
Policy side: maximize Q1(s, pi(s)) while staying close to dataset actions,
with advantage-weighted closeness penalty scaled by nu.

The tabular mode swaps the actor for an exact maximizer over a widened action
support and feeds one-hot inputs, so learned values can be compared with the
exact fixed point of the tabular operator.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .mdp import Dataset, TabularMdp, build_empirical_behavior, build_mildly_generalized
from .nn import AdamState, Mlp, adam_step, expectile_loss, load_params, polyak_update, save_params

METRIC_COLUMNS = ("step", "loss_v", "loss_q", "loss_pi", "q_mean", "v_mean", "eval_return", "lambda", "nu")
POLICY_KINDS = ("deterministic", "gaussian")
MAXIMIZERS = ("actor", "support")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class AgentConfig:
    lam: float = 0.25
    nu: float = 0.1
    alpha_temp: float = 3.0
    tau: float = 0.7
    gamma: float = 0.99
    xi: float = 0.005
    lr: float = 3e-4
    batch: int = 256
    iterations: int = 1_000_000
    # exp(alpha * advantage) is capped at exp(advantage_clip)
    advantage_clip: float = 10.0
    policy_kind: str = "deterministic"
    policy_std: float = 0.2
    hidden: tuple[int, ...] = (256, 256)
    actor_cosine: bool = True
    maximizer: str = "actor"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            (0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]"),
            (self.nu >= 0, "nu must be >= 0"),
            (self.alpha_temp >= 0, "alpha_temp must be >= 0"),
            (0.0 < self.tau < 1.0, "tau must lie in (0, 1)"),
            (0.0 <= self.gamma < 1.0, "gamma must lie in [0, 1)"),
            (0.0 <= self.xi <= 1.0, "xi must lie in [0, 1]"),
            (self.lr > 0, "lr must be positive"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.advantage_clip > 0, "advantage_clip must be positive"),
            (self.policy_kind in POLICY_KINDS, f"policy_kind must be one of {POLICY_KINDS}"),
            (self.policy_std > 0, "policy_std must be positive"),
            (self.maximizer in MAXIMIZERS, f"maximizer must be one of {MAXIMIZERS}"),
            (len(self.hidden) >= 1 and min(self.hidden) >= 1, "hidden sizes must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Spaces:
    """Input layout. Tabular spaces use one-hot states and actions."""

    state_dim: int
    action_dim: int
    max_action: float = 1.0
    n_states: int | None = None
    n_actions: int | None = None

    @property
    def tabular(self) -> bool:
        return self.n_states is not None

    @classmethod
    def for_tabular(cls, n_states: int, n_actions: int) -> "Spaces":
        return cls(n_states, n_actions, 1.0, n_states, n_actions)

    def encode_states(self, s) -> np.ndarray:
        if self.tabular:
            return np.eye(self.n_states)[np.asarray(s, dtype=np.int64)]
        return np.asarray(s, dtype=float)

    def encode_actions(self, a) -> np.ndarray:
        if self.tabular:
            return np.eye(self.n_actions)[np.asarray(a, dtype=np.int64)]
        return np.asarray(a, dtype=float)


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    in_sample: np.ndarray
    s2_id: np.ndarray | None = None

    def __len__(self) -> int:
        return self.r.shape[0]


class ReplayBuffer:
    """Growable column store; uniform sampling with an explicit generator."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1024):
        self._cols = {
            "s": np.zeros((capacity, state_dim)),
            "a": np.zeros((capacity, action_dim)),
            "r": np.zeros(capacity),
            "s2": np.zeros((capacity, state_dim)),
            "done": np.zeros(capacity),
            "in_sample": np.zeros(capacity, bool),
            "s2_id": np.full(capacity, -1, np.int64),
        }
        self.size = 0

    def add(self, s, a, r, s2, done, in_sample=True, s2_id=-1) -> None:
        if self.size == self._cols["r"].shape[0]:
            for k, col in self._cols.items():
                self._cols[k] = np.concatenate([col, np.zeros_like(col)])
        i = self.size
        c = self._cols
        c["s"][i], c["a"][i], c["r"][i], c["s2"][i] = s, a, r, s2
        c["done"][i], c["in_sample"][i], c["s2_id"][i] = float(done), in_sample, s2_id
        self.size += 1

    def add_batch(self, batch: Batch) -> None:
        ids = batch.s2_id if batch.s2_id is not None else np.full(len(batch), -1)
        for i in range(len(batch)):
            self.add(batch.s[i], batch.a[i], batch.r[i], batch.s2[i], batch.done[i], batch.in_sample[i], ids[i])

    def rows(self, idx: np.ndarray) -> Batch:
        c = self._cols
        s2_id = c["s2_id"][idx]
        return Batch(c["s"][idx], c["a"][idx], c["r"][idx], c["s2"][idx], c["done"][idx], c["in_sample"][idx],
                     s2_id if (s2_id >= 0).all() else None)

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rows(rng.integers(0, self.size, size=n))

    def all(self) -> Batch:
        return self.rows(np.arange(self.size))


def buffer_from_dataset(dataset: Dataset, spaces: Spaces, stats=None) -> ReplayBuffer:
    arr = dataset.arrays()
    buf = ReplayBuffer(spaces.state_dim, spaces.action_dim, max(len(dataset), 1))
    s, s2 = arr["states"], arr["next_states"]
    if not spaces.tabular and stats is not None:
        s, s2 = stats.normalize(s), stats.normalize(s2)
    S, A, S2 = spaces.encode_states(s), spaces.encode_actions(arr["actions"]), spaces.encode_states(s2)
    for i in range(len(dataset)):
        buf.add(S[i], A[i], arr["rewards"][i], S2[i], arr["terminals"][i], True,
                int(s2[i]) if spaces.tabular else -1)
    return buf


def tabular_oracle_rows(mdp: TabularMdp, widened: np.ndarray, in_sample: np.ndarray, samples: int,
                        rng: np.random.Generator) -> list[tuple[int, int, float, int]]:
    """True-model transitions for widened pairs missing from the dataset.

    These stand in for exact generalization at nearby actions: the critic sees
    correct Bellman targets there, while V and the actor keep using dataset rows only.
    """
    rows = []
    for s, a in np.argwhere(widened & ~in_sample):
        for _ in range(samples):
            s2 = int(rng.choice(mdp.n_states, p=mdp.P[s, a]))
            rows.append((int(s), int(a), float(mdp.R[s, a]), s2))
    return rows


# ---------------------------------------------------------------- agent state

@dataclass
class Agent:
    config: AgentConfig
    spaces: Spaces
    nets: dict[str, Mlp]
    opts: dict[str, AdamState]
    step: int = 0
    widened: np.ndarray | None = None
    stats: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: AgentConfig, spaces: Spaces, widened: np.ndarray | None = None,
               stats: dict | None = None) -> "Agent":
        if config.maximizer == "support" and (not spaces.tabular or widened is None):
            raise ValueError("the support maximizer needs tabular spaces and a widened support")
        rng = np.random.default_rng([config.seed, 7])
        ds, da, h = spaces.state_dim, spaces.action_dim, config.hidden
        q1 = Mlp.init((ds + da, *h, 1), rng)
        q2 = Mlp.init((ds + da, *h, 1), rng)
        v = Mlp.init((ds, *h, 1), rng)
        pi = Mlp.init((ds, *h, da), rng, out_activation="tanh")
        nets = {"q1": q1, "q2": q2, "v": v, "pi": pi,
                "q1_t": q1.copy(), "q2_t": q2.copy(), "pi_t": pi.copy()}
        opts = {k: AdamState.zeros(nets[k].n_params, config.lr) for k in ("q1", "q2", "v", "pi")}
        return cls(config, spaces, nets, opts, 0, None if widened is None else np.asarray(widened, bool), stats)

    # evaluation helpers

    def q_values(self, name: str, s_feat: np.ndarray, a_feat: np.ndarray) -> np.ndarray:
        return self.nets[name].forward(np.concatenate([s_feat, a_feat], axis=1))[:, 0]

    def policy_actions(self, s_feat: np.ndarray, name: str = "pi") -> np.ndarray:
        return self.spaces.max_action * self.nets[name].forward(s_feat)

    def q_table(self, name: str = "q1") -> np.ndarray:
        S, A = self.spaces.n_states, self.spaces.n_actions
        ss, aa = np.divmod(np.arange(S * A), A)
        vals = self.q_values(name, self.spaces.encode_states(ss), self.spaces.encode_actions(aa))
        return vals.reshape(S, A)

    def greedy_table_policy(self) -> np.ndarray:
        q = np.where(self.widened, self.q_table("q1"), -np.inf)
        return q.argmax(axis=1)

    def act(self, state) -> np.ndarray | int:
        """Deterministic action: argmax over the widened support, or the actor mean."""
        if self.spaces.tabular:
            if self.config.maximizer == "support":
                return int(self.greedy_table_policy()[int(state)])
            q = self.q_table("q1")[int(state)]
            return int(q.argmax())
        x = np.asarray(state, dtype=float)
        if self.stats is not None:
            x = (x - np.asarray(self.stats["mean"])) / np.asarray(self.stats["std"])
        return self.policy_actions(x[None])[0]


# ---------------------------------------------------------------- losses

def _min_target_q(agent: Agent, s_feat, a_feat) -> np.ndarray:
    return np.minimum(agent.q_values("q1_t", s_feat, a_feat), agent.q_values("q2_t", s_feat, a_feat))


def next_state_maximum(agent: Agent, batch: Batch) -> np.ndarray:
    """Bootstrap for the lam-branch: min-of-two target critics at the widened maximizer."""
    if agent.config.maximizer == "support":
        if batch.s2_id is None:
            raise ValueError("support maximizer needs next-state ids in the batch")
        S, A = agent.spaces.n_states, agent.spaces.n_actions
        ss, aa = np.divmod(np.arange(S * A), A)
        table = _min_target_q(agent, agent.spaces.encode_states(ss), agent.spaces.encode_actions(aa)).reshape(S, A)
        m = np.where(agent.widened, table, -np.inf).max(axis=1)
        out = m[batch.s2_id]
        live = batch.done < 1
        if not np.isfinite(out[live]).all():
            raise ValueError("next state with an empty widened support")
        return np.where(live, out, 0.0)
    a2 = agent.policy_actions(batch.s2, "pi_t")
    return _min_target_q(agent, batch.s2, a2)


def bellman_targets(agent: Agent, batch: Batch, lam: float) -> np.ndarray:
    """y = r + gamma (1 - done) (lam * Q'(s', a'_max) + (1 - lam) V(s'))."""
    gamma = agent.config.gamma
    v_next = agent.nets["v"].forward(batch.s2)[:, 0]
    if lam == 0.0:
        mix = v_next
    else:
        q_next = next_state_maximum(agent, batch)
        mix = lam * q_next + (1.0 - lam) * v_next
    return batch.r + gamma * (1.0 - batch.done) * mix


def loss_v(agent: Agent, batch: Batch, v_params: np.ndarray | None = None, q_t_sa: np.ndarray | None = None):
    """Expectile regression of V(s) onto min-of-two target critics at dataset pairs."""
    m = batch.in_sample
    s, a = batch.s[m], batch.a[m]
    if q_t_sa is None:
        q_t_sa = _min_target_q(agent, s, a)
    else:
        q_t_sa = q_t_sa[m]
    net = agent.nets["v"]
    out, cache = net.forward_cache(s, v_params)
    u = q_t_sa - out[:, 0]
    val, d = expectile_loss(u, agent.config.tau)
    n = max(len(u), 1)
    loss = float(val.sum() / n)
    g = net.backward(cache, (-d / n)[:, None])[0]
    return loss, g, {"v_mean": float(out.mean()) if len(u) else float("nan")}


def loss_q(agent: Agent, batch: Batch, y: np.ndarray, params: tuple | None = None):
    """Mean squared error of both critics against fixed targets y, averaged over the two."""
    x = np.concatenate([batch.s, batch.a], axis=1)
    n = len(batch)
    total, grads, q1_mean = 0.0, [], 0.0
    for k, name in enumerate(("q1", "q2")):
        net = agent.nets[name]
        out, cache = net.forward_cache(x, None if params is None else params[k])
        err = out[:, 0] - y
        total += 0.5 * float((err**2).mean())
        grads.append(net.backward(cache, (err / n)[:, None])[0])
        if k == 0:
            q1_mean = float(out.mean())
    return total, tuple(grads), {"q_mean": q1_mean}


def advantage_weights(agent: Agent, q_t_sa: np.ndarray, v_s: np.ndarray) -> np.ndarray:
    c = agent.config
    return np.exp(np.minimum(c.alpha_temp * (q_t_sa - v_s), c.advantage_clip))


def loss_pi(agent: Agent, batch: Batch, pi_params: np.ndarray | None = None, q_t_sa: np.ndarray | None = None,
            noise: np.ndarray | None = None):
    """-mean Q1(s, pi(s)) + nu * mean[w * ||pi(s) - a||^2] over dataset rows.

    The gaussian kind evaluates Q1 at mean + std * noise and scales the penalty
    by 1/(2 std^2), i.e. the negative log-likelihood of a fixed-variance Gaussian
    up to a constant.
    """
    c = agent.config
    m = batch.in_sample
    s, a = batch.s[m], batch.a[m]
    n = max(len(s), 1)
    if q_t_sa is None:
        q_t_sa = _min_target_q(agent, s, a)
    else:
        q_t_sa = q_t_sa[m]
    w = advantage_weights(agent, q_t_sa, agent.nets["v"].forward(s)[:, 0])
    pi = agent.nets["pi"]
    raw, cache = pi.forward_cache(s, pi_params)
    mu = agent.spaces.max_action * raw
    a_q = mu
    scale = 1.0
    if c.policy_kind == "gaussian":
        if noise is None:
            raise ValueError("gaussian policy loss needs a noise sample")
        a_q = mu + c.policy_std * noise[m]
        scale = 1.0 / (2.0 * c.policy_std**2)
    q1 = agent.nets["q1"]
    q_out, q_cache = q1.forward_cache(np.concatenate([s, a_q], axis=1))
    diff = mu - a
    sq = (diff**2).sum(axis=1)
    loss = float(-q_out[:, 0].mean() + c.nu * scale * (w * sq).mean())
    _, g_in = q1.backward(q_cache, np.full((len(s), 1), -1.0 / n))
    g_mu = g_in[:, s.shape[1]:] + c.nu * scale * 2.0 * (w[:, None] * diff) / n
    g = pi.backward(cache, g_mu * agent.spaces.max_action)[0]
    return loss, g


# ---------------------------------------------------------------- training

def actor_lr(config: AgentConfig, step: int) -> float:
    """Cosine annealing from lr to 0 over the offline iterations."""
    if not config.actor_cosine or config.iterations <= 0:
        return config.lr
    frac = min(step, config.iterations) / config.iterations
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _finite(step: int, name: str, value: float) -> None:
    if not np.isfinite(value):
        raise TrainingAborted(step, f"non-finite {name}")


def train_step(agent: Agent, batch: Batch, lam: float | None = None, nu: float | None = None,
               rng: np.random.Generator | None = None, actor_lr_value: float | None = None) -> dict:
    """One round of updates in order: V, critics, actor, target networks."""
    c = agent.config
    if lam is not None or nu is not None:
        c = replace(c, lam=c.lam if lam is None else lam, nu=c.nu if nu is None else nu)
        run = replace(agent, config=c)
    else:
        run = agent
    step = agent.step + 1
    nets, opts = agent.nets, agent.opts

    m = batch.in_sample
    q_t_sa = np.full(len(batch), np.nan)
    if m.any():
        q_t_sa[m] = _min_target_q(agent, batch.s[m], batch.a[m])

    lv, gv, info_v = loss_v(run, batch, q_t_sa=q_t_sa)
    _finite(step, "loss_v", lv)
    nets["v"].params = adam_step(opts["v"], nets["v"].params, gv)

    y = bellman_targets(run, batch, c.lam)
    lq, (g1, g2), info_q = loss_q(run, batch, y)
    _finite(step, "loss_q", lq)
    nets["q1"].params = adam_step(opts["q1"], nets["q1"].params, g1)
    nets["q2"].params = adam_step(opts["q2"], nets["q2"].params, g2)

    lp = float("nan")
    if c.maximizer == "actor" and m.any():
        noise = None
        if c.policy_kind == "gaussian":
            rng = np.random.default_rng([c.seed, step]) if rng is None else rng
            noise = rng.standard_normal(batch.a.shape)
        lp, gp = loss_pi(run, batch, q_t_sa=q_t_sa, noise=noise)
        _finite(step, "loss_pi", lp)
        lr = actor_lr(c, step) if actor_lr_value is None else actor_lr_value
        nets["pi"].params = adam_step(opts["pi"], nets["pi"].params, gp, lr=lr)

    for name in ("q1", "q2", "pi"):
        nets[name + "_t"].params = polyak_update(nets[name + "_t"].params, nets[name].params, c.xi)
    agent.step = step
    return {"step": step, "loss_v": lv, "loss_q": lq, "loss_pi": lp, "q_mean": info_q["q_mean"],
            "v_mean": info_v["v_mean"], "lambda": c.lam, "nu": c.nu}


def divergence_threshold(r_max: float, gamma: float) -> float:
    return r_max / (1.0 - gamma)


def is_divergent(q_mean: float, r_max: float, gamma: float) -> bool:
    return not np.isfinite(q_mean) or q_mean > divergence_threshold(r_max, gamma)


def evaluate_policy(policy, env, episodes: int = 10, seed: int = 0,
                    discount: float = 1.0) -> tuple[float, list[float]]:
    """Episode returns of a deterministic policy (callable state -> action).

    Returns are undiscounted unless ``discount`` < 1.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns = []
    for ep in range(episodes):
        s = env.reset(rng)
        total, done, t = 0.0, False, 0
        while not done:
            try:
                s, r, done, _ = env.step(policy(s))
            except Exception as exc:
                raise RuntimeError(f"environment failed in episode {ep} at step {t}: {exc}") from exc
            total += discount**t * r
            t += 1
        returns.append(total)
    return float(np.mean(returns)), returns


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class MetricsSink:
    """Append-only CSV writer with the fixed metrics header."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.write_text(",".join(METRIC_COLUMNS) + "\n")

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(",".join(_fmt(row.get(k)) for k in METRIC_COLUMNS) + "\n")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRIC_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(row.get(k)) for k in METRIC_COLUMNS) + "\n")
        return buf.getvalue()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (float(v) if v != "" else float("nan")) for k, v in row.items()} for row in csv.DictReader(f)]


@dataclass
class TrainResult:
    agent: Agent
    metrics: MetricsSink
    diverged_at: int | None = None
    final_return: float | None = None


def train_offline(agent: Agent, buffer: ReplayBuffer, iterations: int | None = None, env=None,
                  eval_every: int = 0, eval_episodes: int = 10, log_every: int = 1000,
                  r_max: float | None = None, stop_on_divergence: bool = True,
                  metrics: MetricsSink | None = None, checkpoint_dir: str | Path | None = None,
                  checkpoint_every: int = 0) -> TrainResult:
    """Run ``iterations`` gradient steps from ``buffer``; log, evaluate and watch q_mean.

    Divergence means q_mean above r_max / (1 - gamma) or non-finite.
    """
    c = agent.config
    iterations = c.iterations if iterations is None else iterations
    metrics = MetricsSink() if metrics is None else metrics
    r_max = float(np.abs(buffer.all().r).max()) if r_max is None else r_max
    rng = np.random.default_rng([c.seed, 11])
    result = TrainResult(agent, metrics)
    policy = agent.act
    for _ in range(iterations):
        batch = buffer.sample(rng, c.batch)
        row = train_step(agent, batch, rng=rng)
        step = row["step"]
        diverged = is_divergent(row["q_mean"], r_max, c.gamma)
        evaluate = env is not None and eval_every > 0 and step % eval_every == 0
        if evaluate and not diverged:
            row["eval_return"], _ = evaluate_policy(policy, env, eval_episodes, seed=c.seed + 1)
            result.final_return = row["eval_return"]
        if evaluate or (log_every > 0 and step % log_every == 0) or diverged:
            metrics.append(row)
        if checkpoint_dir is not None and checkpoint_every > 0 and step % checkpoint_every == 0:
            save_agent(agent, Path(checkpoint_dir) / f"step_{step}.json")
        if diverged and result.diverged_at is None:
            result.diverged_at = step
            if stop_on_divergence:
                break
    return result


@dataclass(frozen=True)
class FinetuneSchedule:
    """Every ``every`` gradient steps k += 1; nu_k = max(floor, nu0 rate^k), lam_k = end - (end - start) rate^k."""

    nu_start: float
    lambda_start: float = 0.25
    lambda_end: float = 0.5
    nu_floor: float | None = None
    rate: float = 0.99
    every: int = 1000

    def __post_init__(self):
        if self.nu_floor is None:
            object.__setattr__(self, "nu_floor", 0.01 * self.nu_start)
        if not 0.0 < self.rate <= 1.0:
            raise ValueError("rate must lie in (0, 1]")
        if self.every < 1:
            raise ValueError("every must be >= 1")
        if not 0.0 <= self.lambda_start <= self.lambda_end <= 1.0:
            raise ValueError("need 0 <= lambda_start <= lambda_end <= 1")
        if self.nu_start < 0 or self.nu_floor < 0:
            raise ValueError("nu values must be non-negative")

    def values(self, k: int) -> tuple[float, float]:
        decay = self.rate**k
        lam = self.lambda_end - (self.lambda_end - self.lambda_start) * decay
        nu = max(self.nu_floor, self.nu_start * decay)
        return lam, nu

    def at_step(self, grad_steps: int) -> tuple[float, float]:
        return self.values(grad_steps // self.every)


def finetune_online(agent: Agent, env, buffer: ReplayBuffer, schedule: FinetuneSchedule, steps: int, utd: int = 1,
                    explore_noise: float = 0.1, seed: int = 0, eval_every: int = 0, eval_episodes: int = 10,
                    log_every: int = 1000, metrics: MetricsSink | None = None) -> TrainResult:
    """Interleave environment steps with gradient steps under the (lam, nu) schedule.

    The actor learning rate stays at its base value here; the cosine schedule
    belongs to the offline phase only.
    """
    if agent.spaces.tabular:
        raise ValueError("online fine-tuning is implemented for continuous control")
    c = agent.config
    metrics = MetricsSink() if metrics is None else metrics
    rng = np.random.default_rng([seed, 13])
    result = TrainResult(agent, metrics)
    grad_steps = 0
    lam, nu = schedule.values(0)
    s = env.reset(rng)
    max_a = agent.spaces.max_action
    for t in range(1, steps + 1):
        a = np.asarray(agent.act(s), dtype=float)
        a = np.clip(a + rng.normal(0.0, explore_noise * max_a, size=a.shape), -max_a, max_a)
        try:
            s2, r, done, terminal = env.step(a)
        except Exception as exc:
            raise RuntimeError(f"environment failed at fine-tuning step {t}: {exc}") from exc
        a_stored = env.clip_action(a) if hasattr(env, "clip_action") else a
        enc = agent.stats
        f = (lambda x: (np.asarray(x) - enc["mean"]) / enc["std"]) if enc else (lambda x: np.asarray(x))
        buffer.add(f(s), a_stored, r, f(s2), terminal, True)
        s = env.reset(rng) if done else s2
        row = None
        for _ in range(utd):
            batch = buffer.sample(rng, c.batch)
            row = train_step(agent, batch, lam=lam, nu=nu, rng=rng, actor_lr_value=c.lr)
            grad_steps += 1
            lam, nu = schedule.at_step(grad_steps)
        evaluate = eval_every > 0 and t % eval_every == 0
        if evaluate:
            row["eval_return"], _ = evaluate_policy(agent.act, env_copy(env), eval_episodes, seed=seed + 1)
            result.final_return = row["eval_return"]
        if evaluate or (log_every > 0 and t % log_every == 0):
            metrics.append(row)
    return result


def env_copy(env):
    """Fresh environment with the same spec, so evaluation does not disturb a running episode."""
    return type(env)(env.spec) if hasattr(env, "spec") else env


# ---------------------------------------------------------------- checkpoints

def save_agent(agent: Agent, path: str | Path) -> None:
    extra = {
        "config": agent.config.to_dict(),
        "spaces": asdict(agent.spaces),
        "step": agent.step,
        "widened": None if agent.widened is None else agent.widened.astype(int).tolist(),
        "stats": agent.stats,
        "opts": {k: v.to_dict() for k, v in agent.opts.items()},
        "extra": agent.extra,
    }
    save_params(path, agent.nets, extra)


def load_agent(path: str | Path) -> Agent:
    nets, extra = load_params(path)
    cfg = AgentConfig(**extra["config"])
    spaces = Spaces(**extra["spaces"])
    widened = None if extra.get("widened") is None else np.array(extra["widened"], bool)
    opts = {k: AdamState.from_dict(v) for k, v in extra["opts"].items()}
    return Agent(cfg, spaces, nets, opts, int(extra["step"]), widened, extra.get("stats"), extra.get("extra", {}))


# ---------------------------------------------------------------- tabular setup

def tabular_setup(mdp: TabularMdp, dataset: Dataset, eps_a: float, config: AgentConfig,
                  oracle_samples: int = 1) -> tuple[Agent, ReplayBuffer]:
    """Agent with one-hot inputs, exact widened maximizer and oracle rows for widened pairs."""
    beta = build_empirical_behavior(dataset, mdp)
    wide = build_mildly_generalized(beta, eps_a, mdp)
    spaces = Spaces.for_tabular(mdp.n_states, mdp.n_actions)
    agent = Agent.create(replace(config, maximizer="support"), spaces, wide.widened)
    buf = buffer_from_dataset(dataset, spaces)
    rng = np.random.default_rng([config.seed, 5])
    for s, a, r, s2 in tabular_oracle_rows(mdp, wide.widened, beta.support, oracle_samples, rng):
        buf.add(spaces.encode_states(s), spaces.encode_actions(a), r, spaces.encode_states(s2), False, False, s2)
    return agent, buf
