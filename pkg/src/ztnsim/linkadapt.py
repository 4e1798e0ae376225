"""Per-link transmitter reconfiguration: factored tabular Q-learning and baselines.

Each downlink gets its own agent. An agent has three independent heads that
share one scalar reward:

* MCS head, indexed by (snr_bin, bler_bin), 12 actions
* repetition head, indexed by (snr_bin, bler_bin), 8 actions
* HARQ head, indexed by (bler_bin, latency_bin, throughput_bin), 6 actions

The learned policy and both baselines expose the same estimator surface
(``get_params`` / ``predict``) so they can be swapped in the simulator.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import radio
from .radio import N_ACTIONS, N_HARQ, N_MCS, N_REP, BlerModel, LinkKpi, TxConfig
from .validation import check_kpi_array, check_positive, check_probability

N_SNR_BINS = 16
N_BLER_BINS = 8
N_LAT_BINS = 8
N_TPUT_BINS = 8


class PolicyKind(enum.Enum):
    LEARNED = "learned"
    LOOKUP_TABLE = "lookup"
    RANDOM = "random"

    @classmethod
    def parse(cls, value: "str | PolicyKind") -> "PolicyKind":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        aliases = {"lookuptable": "lookup", "lookup_table": "lookup", "rl": "learned"}
        v = aliases.get(v, v)
        for kind in cls:
            if kind.value == v:
                return kind
        raise ValueError(f"unknown policy kind {value!r}; expected one of "
                         f"{[k.value for k in cls]}")


@dataclass(frozen=True)
class StateBin:
    snr_bin: int
    bler_bin: int
    latency_bin: int
    throughput_bin: int

    @property
    def link(self) -> tuple[int, int]:
        """Index used by the MCS and repetition heads."""
        return self.snr_bin, self.bler_bin

    @property
    def harq(self) -> tuple[int, int, int]:
        return self.bler_bin, self.latency_bin, self.throughput_bin


def _default_snr_edges():
    # bin 0 covers everything below -16 dB (nominally [-20, -16))
    return tuple(-16.0 + 4.0 * i for i in range(N_SNR_BINS - 1))


def threshold_snr_edges(model: BlerModel | None = None, below: int = 3) -> tuple[float, ...]:
    """SNR edges on the MCS switching points, so each in-range bin spans exactly
    one MCS interval; ``below`` extra edges continue the spacing under MCS 0."""
    t = list((model or BlerModel()).thresholds)
    step = t[1] - t[0]
    head = [t[0] - step * k for k in range(below, 0, -1)]
    edges = head + t
    return tuple(edges[: N_SNR_BINS - 1])


def _default_bler_edges():
    return tuple((i + 1) / N_BLER_BINS for i in range(N_BLER_BINS - 1))


def _default_latency_edges():
    return tuple(float(v) for v in np.geomspace(1.0, 64.0, N_LAT_BINS - 1))


def _default_throughput_edges():
    return tuple(float(v) for v in np.geomspace(1.0, 1000.0, N_TPUT_BINS - 1))


@dataclass(frozen=True)
class KpiEdges:
    snr: tuple[float, ...] = field(default_factory=_default_snr_edges)
    bler: tuple[float, ...] = field(default_factory=_default_bler_edges)
    latency: tuple[float, ...] = field(default_factory=_default_latency_edges)
    throughput: tuple[float, ...] = field(default_factory=_default_throughput_edges)

    def __post_init__(self):
        for name, n_bins in (("snr", N_SNR_BINS), ("bler", N_BLER_BINS),
                             ("latency", N_LAT_BINS), ("throughput", N_TPUT_BINS)):
            edges = tuple(float(e) for e in getattr(self, name))
            object.__setattr__(self, name, edges)
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError(f"{name} edges must be strictly increasing")
            if len(edges) > n_bins - 1:
                raise ValueError(f"at most {n_bins - 1} {name} edges allowed")


def _bin(value: float, edges: Sequence[float], n_bins: int) -> int:
    # number of edges <= value: half-open [e_i, e_{i+1}) intervals
    idx = int(np.searchsorted(edges, value, side="right"))
    return min(max(idx, 0), n_bins - 1)


def quantize(kpi: LinkKpi, edges: KpiEdges | None = None) -> StateBin:
    edges = edges or KpiEdges()
    return StateBin(
        _bin(kpi.snr_db, edges.snr, N_SNR_BINS),
        _bin(kpi.bler, edges.bler, N_BLER_BINS),
        _bin(kpi.latency_ms, edges.latency, N_LAT_BINS),
        _bin(kpi.throughput_kbps, edges.throughput, N_TPUT_BINS),
    )


@dataclass(frozen=True)
class RewardWeights:
    """Reward = -bler*w_b - norm_latency*w_l + norm_throughput*w_t.

    Latency and throughput are normalized by the reference values and clipped
    to [0, 1]. The defaults select plain -BLER.
    """

    bler: float = 1.0
    latency: float = 0.0
    throughput: float = 0.0
    latency_ref_ms: float = 10.0
    throughput_ref_kbps: float = 300.0

    def __post_init__(self):
        for name in ("bler", "latency", "throughput"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} weight must be finite")
        for name in ("latency_ref_ms", "throughput_ref_kbps"):
            check_positive(getattr(self, name), name)


def reward(kpi: LinkKpi, weights: RewardWeights | None = None) -> float:
    w = weights or RewardWeights()
    norm_lat = min(kpi.latency_ms / w.latency_ref_ms, 1.0)
    norm_tp = min(kpi.throughput_kbps / w.throughput_ref_kbps, 1.0)
    return -w.bler * kpi.bler - w.latency * norm_lat + w.throughput * norm_tp


class FactoredPolicy(BaseEstimator):
    """Three-headed tabular Q-learner for one downlink.

    Parameters
    ----------
    epsilon : float
        Exploration probability, applied independently per head.
    alpha : float
        Learning rate.
    beta : float, optional
        Learning rate for negative TD errors. ``None`` uses ``alpha`` (plain
        Q-learning); a smaller value gives hysteretic learners, which helps
        the three heads settle on a jointly good action instead of a poor
        equilibrium of their shared reward.
    gamma : float
        Discount factor, in [0, 1).
    edges : KpiEdges, optional
        Quantization edges; defaults to :class:`KpiEdges`.
    """

    def __init__(self, epsilon=1.0, alpha=0.1, gamma=0.9, edges=None, beta=None):
        self.epsilon = epsilon
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.edges = edges
        self._init_tables()

    def _init_tables(self):
        self.q_mcs_ = np.zeros((N_SNR_BINS, N_BLER_BINS, N_MCS))
        self.q_rep_ = np.zeros((N_SNR_BINS, N_BLER_BINS, N_REP))
        self.q_harq_ = np.zeros((N_BLER_BINS, N_LAT_BINS, N_TPUT_BINS, N_HARQ))

    def validate(self):
        check_probability(self.epsilon, "epsilon")
        check_probability(self.alpha, "alpha")
        if self.beta is not None:
            check_probability(self.beta, "beta")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        for name, table in self.tables().items():
            if not np.all(np.isfinite(table)):
                raise ValueError(f"non-finite values in {name} table")
        return self

    def tables(self) -> dict[str, np.ndarray]:
        return {"mcs": self.q_mcs_, "rep": self.q_rep_, "harq": self.q_harq_}

    def head_values(self, state: StateBin):
        return self.q_mcs_[state.link], self.q_rep_[state.link], self.q_harq_[state.harq]

    def greedy(self, state: StateBin) -> TxConfig:
        # np.argmax returns the first maximum, i.e. lowest-index tie-break
        m, r, h = (int(np.argmax(v)) for v in self.head_values(state))
        return TxConfig.from_indices(m, r, h)

    def act(self, kpi: LinkKpi, rng: np.random.Generator) -> TxConfig:
        return select_action(self, quantize(kpi, self.edges), rng)

    def predict(self, X) -> np.ndarray:
        """Greedy joint action index for each KPI row ``[snr, bler, latency, tput]``."""
        X = check_kpi_array(X)
        out = np.empty(len(X), dtype=int)
        for i, row in enumerate(X):
            out[i] = self.greedy(quantize(LinkKpi(*row), self.edges)).flat_index
        return out

    def copy(self) -> "FactoredPolicy":
        other = FactoredPolicy(**self.get_params())
        for name, table in self.tables().items():
            other.tables()[name][...] = table
        return other

    def __eq__(self, other):
        if not isinstance(other, FactoredPolicy):
            return NotImplemented
        return (self.get_params() == other.get_params()
                and all(np.array_equal(a, b) for a, b in zip(self.tables().values(), other.tables().values())))

    __hash__ = None


def select_action(policy: FactoredPolicy, state: StateBin, rng: np.random.Generator) -> TxConfig:
    """Per-head epsilon-greedy selection.

    Always consumes six uniforms (explore draw + candidate per head) so the rng
    stream advances identically whatever epsilon is.
    """
    explore = rng.random(3)
    cand = rng.random(3)
    choice = []
    for values, e, c in zip(policy.head_values(state), explore, cand):
        if e < policy.epsilon:
            choice.append(int(c * len(values)))
        else:
            choice.append(int(np.argmax(values)))
    return TxConfig.from_indices(*choice)


def q_update(policy: FactoredPolicy, state: StateBin, action: TxConfig, r: float,
             next_state: StateBin) -> FactoredPolicy:
    """One Q-learning step applied to each head independently (in place)."""
    a = action.indices
    for table, idx, nidx, ai in (
        (policy.q_mcs_, state.link, next_state.link, a[0]),
        (policy.q_rep_, state.link, next_state.link, a[1]),
        (policy.q_harq_, state.harq, next_state.harq, a[2]),
    ):
        row = table[idx]
        target = r + policy.gamma * float(np.max(table[nidx]))
        delta = target - row[ai]
        rate = policy.alpha if delta >= 0 or policy.beta is None else policy.beta
        row[ai] += rate * delta
    return policy


def lookup_thresholds(model: BlerModel | None = None, target_bler: float = 0.5) -> tuple[float, ...]:
    """SNR switching points where each MCS reaches ``target_bler`` on one attempt.

    The default (0.5) is the model's own per-MCS thresholds.
    """
    model = model or BlerModel()
    offset = math.log((1.0 - target_bler) / target_bler) / model.slope
    return tuple(t + offset for t in model.thresholds)


def lookup_policy(snr: float, table: Sequence[float]) -> TxConfig:
    idx = int(np.searchsorted(np.asarray(table), snr, side="right")) - 1
    return TxConfig(min(max(idx, 0), N_MCS - 1), 1, 5)


def random_policy(rng: np.random.Generator) -> TxConfig:
    return TxConfig.from_flat(int(rng.integers(N_ACTIONS)))


class LookupTablePolicy(BaseEstimator):
    """SNR-only MCS table, no repetition, maximum HARQ."""

    def __init__(self, thresholds=None):
        self.thresholds = thresholds

    @property
    def table_(self):
        return lookup_thresholds() if self.thresholds is None else tuple(self.thresholds)

    def act(self, kpi: LinkKpi, rng=None) -> TxConfig:
        return lookup_policy(kpi.snr_db, self.table_)

    def predict(self, X) -> np.ndarray:
        X = check_kpi_array(X)
        return np.array([lookup_policy(s, self.table_).flat_index for s in X[:, 0]], dtype=int)


class RandomPolicy(BaseEstimator):
    def __init__(self, random_state=None):
        self.random_state = random_state

    def act(self, kpi: LinkKpi, rng: np.random.Generator) -> TxConfig:
        return random_policy(rng)

    def predict(self, X) -> np.ndarray:
        X = check_kpi_array(X)
        rng = np.random.default_rng(self.random_state)
        return rng.integers(N_ACTIONS, size=len(X))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainingSchedule:
    episodes: int = 500
    episode_ttis: int = 1000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    decay_fraction: float = 0.8
    alpha: float = 0.1
    gamma: float = 0.9
    weights: RewardWeights = field(default_factory=RewardWeights)
    beta: float | None = None
    alpha_end: float | None = None

    def validate(self):
        if self.episodes <= 0:
            raise ValueError("training schedule needs at least one episode")
        if self.episode_ttis <= 0:
            raise ValueError("episode_ttis must be positive")
        check_probability(self.epsilon_start, "epsilon_start")
        check_probability(self.epsilon_end, "epsilon_end")
        check_probability(self.alpha, "alpha")
        if self.alpha_end is not None:
            check_probability(self.alpha_end, "alpha_end")
        if self.beta is not None:
            check_probability(self.beta, "beta")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")
        if not 0.0 < self.decay_fraction <= 1.0:
            raise ValueError("decay_fraction must be in (0, 1]")
        return self

    def _progress(self, episode: int) -> float:
        span = max(1, round(self.decay_fraction * self.episodes))
        return min(episode / span, 1.0)

    def epsilon(self, episode: int) -> float:
        """Linear decay over the first ``decay_fraction`` of episodes, then flat."""
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * self._progress(episode)

    def learning_rates(self, episode: int) -> tuple[float, float | None]:
        """(alpha, beta) for ``episode``.

        Without ``alpha_end`` both stay constant. With it, alpha follows the same
        linear decay as epsilon and beta keeps its ratio to alpha.
        """
        if self.alpha_end is None:
            return self.alpha, self.beta
        alpha = self.alpha + (self.alpha_end - self.alpha) * self._progress(episode)
        if self.beta is None:
            return alpha, None
        return alpha, (self.beta * alpha / self.alpha if self.alpha > 0 else self.beta)


class LinkEnv(Protocol):
    """What :func:`train` needs from an environment (one KPI per agent)."""

    def reset(self, episode: int) -> list[LinkKpi]: ...

    def step(self, actions: list[TxConfig]) -> list[LinkKpi]: ...

    def steps_per_episode(self, episode_ttis: int) -> int: ...


ONE_STATE_EDGES = KpiEdges((), (), (), ())


class StationaryLinkEnv:
    """Fixed-SNR link that answers each action with its expected KPIs.

    Per-attempt BLER is stationary, so residual BLER and expected transmissions
    follow :func:`radio.harq_stats`; goodput is the stop-and-wait rate
    ``rate / rep * (1 - residual) / E[transmissions]``. Pair it with
    ``ONE_STATE_EDGES`` for a single-state problem.
    """

    def __init__(self, snr_db: float, model: BlerModel | None = None, rate_table=None,
                 n_agents: int = 1, prbs: int = 1, tti_ms: float = 1.0, report_period_ttis: int = 10):
        self.snr_db = float(snr_db)
        self.model = model or BlerModel()
        self.rates = np.asarray(radio.default_rate_table() if rate_table is None else rate_table, dtype=float)
        self.n_agents = n_agents
        self.prbs = prbs
        self.tti_ms = tti_ms
        self.report_period_ttis = report_period_ttis

    def kpi(self, action: TxConfig) -> LinkKpi:
        p = radio.bler(radio.effective_snr_db(self.snr_db, action.repetition), action.mcs, self.model)
        expected_tx, residual = radio.harq_stats(p, action.harq_max_retx)
        tput = radio.link_throughput_kbps(action.mcs, action.repetition, residual, self.prbs, self.rates) / expected_tx
        return LinkKpi(self.snr_db, float(residual), float(expected_tx * self.tti_ms), float(tput))

    def steps_per_episode(self, episode_ttis: int) -> int:
        return max(1, episode_ttis // self.report_period_ttis)

    def reset(self, episode: int) -> list[LinkKpi]:
        return [LinkKpi(self.snr_db, 0.0, 0.0, 0.0)] * self.n_agents

    def step(self, actions: list[TxConfig]) -> list[LinkKpi]:
        return [self.kpi(a) for a in actions]


def train(env: LinkEnv, agents: list[FactoredPolicy], schedule: TrainingSchedule,
          rng: np.random.Generator, progress: Callable[[int, float], None] | None = None):
    """Train ``agents`` in place against ``env``.

    Returns the agents and the per-episode mean reward (averaged over agents
    and decision steps).
    """
    schedule.validate()
    if not agents:
        raise ValueError("need at least one agent")
    for agent in agents:
        agent.alpha, agent.gamma, agent.beta = schedule.alpha, schedule.gamma, schedule.beta
    curve = np.empty(schedule.episodes)
    n_steps = env.steps_per_episode(schedule.episode_ttis)
    for ep in range(schedule.episodes):
        eps = schedule.epsilon(ep)
        alpha, beta = schedule.learning_rates(ep)
        for agent in agents:
            agent.epsilon, agent.alpha, agent.beta = eps, alpha, beta
        kpis = env.reset(ep)
        states = [quantize(k, a.edges) for k, a in zip(kpis, agents)]
        total = 0.0
        for _ in range(n_steps):
            actions = [select_action(a, s, rng) for a, s in zip(agents, states)]
            kpis = env.step(actions)
            next_states = [quantize(k, a.edges) for k, a in zip(kpis, agents)]
            for agent, s, act, k, ns in zip(agents, states, actions, kpis, next_states):
                r = reward(k, schedule.weights)
                q_update(agent, s, act, r, ns)
                total += r
            states = next_states
        curve[ep] = total / (n_steps * len(agents))
        if progress is not None:
            progress(ep, curve[ep])
    for agent in agents:
        agent.epsilon = 0.0
    return agents, curve


# ----------------------------------------------------------- serialization

_POLICY_HEADER = "# ztnsim factored policy v1"


def dump_policy(policy: FactoredPolicy, path) -> None:
    """Flat ``head|state|action = value`` text; floats written with repr (round-trips)."""
    lines = [_POLICY_HEADER,
             f"param|epsilon = {policy.epsilon!r}",
             f"param|alpha = {policy.alpha!r}",
             f"param|gamma = {policy.gamma!r}"]
    if policy.beta is not None:
        lines.append(f"param|beta = {policy.beta!r}")
    edges = policy.edges or KpiEdges()
    for dim in ("snr", "bler", "latency", "throughput"):
        lines.append(f"edges|{dim} = {','.join(repr(v) for v in getattr(edges, dim))}")
    for name, table in policy.tables().items():
        for idx in np.ndindex(table.shape):
            *state, action = idx
            lines.append(f"{name}|{','.join(map(str, state))}|{action} = {float(table[idx])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_policy(path, edges: KpiEdges | None = None) -> FactoredPolicy:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != _POLICY_HEADER:
        raise ValueError(f"{path}: not a policy file (bad header)")
    params: dict[str, float] = {}
    stored_edges: dict[str, tuple[float, ...]] = {}
    entries = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            key, value = (s.strip() for s in line.split("=", 1))
            parts = key.split("|")
            if parts[0] == "param":
                params[parts[1]] = float(value)
            elif parts[0] == "edges":
                stored_edges[parts[1]] = tuple(float(v) for v in value.split(",") if v)
            else:
                name, state, action = parts
                entries.append((name, tuple(int(v) for v in state.split(",")) + (int(action),), float(value)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed entry {line!r}") from exc
    if edges is None and stored_edges:
        try:
            edges = KpiEdges(**stored_edges)
        except TypeError as exc:
            raise ValueError(f"{path}: unknown edge dimension in {sorted(stored_edges)}") from exc
    policy = FactoredPolicy(edges=edges, **params)
    tables = policy.tables()
    for name, idx, value in entries:
        if name not in tables:
            raise ValueError(f"{path}: unknown head {name!r}")
        tables[name][idx] = value
    return policy.validate()


def make_controller(kind: PolicyKind, lookup_table=None, policy: FactoredPolicy | None = None):
    if kind is PolicyKind.LEARNED:
        if policy is None:
            raise ValueError("learned controller needs a trained policy")
        return policy
    if kind is PolicyKind.LOOKUP_TABLE:
        return LookupTablePolicy(lookup_table)
    return RandomPolicy()

