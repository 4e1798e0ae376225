import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from oracles import toy_best_action
from ztnsim import radio
from ztnsim.linkadapt import (
    ONE_STATE_EDGES, FactoredPolicy, KpiEdges, LookupTablePolicy, PolicyKind, RandomPolicy,
    RewardWeights, StateBin, StationaryLinkEnv, TrainingSchedule, dump_policy, load_policy,
    lookup_policy, lookup_thresholds, q_update, quantize, random_policy, reward, select_action,
    threshold_snr_edges, train,
)
from ztnsim.radio import LinkKpi, TxConfig

FOUR_DB_FROM_MINUS_20 = tuple(-20.0 + 4.0 * i for i in range(15))


def kpi(snr=0.0, bler=0.0, lat=0.0, tp=0.0):
    return LinkKpi(snr, bler, lat, tp)


# ------------------------------------------------------------------ quantize

def test_quantize_below_first_edge_is_bin_zero():
    assert quantize(kpi(snr=-80.0)).snr_bin == 0


def test_quantize_edge_value_goes_right():
    edges = KpiEdges(snr=(0.0, 4.0, 8.0))
    assert quantize(kpi(snr=4.0), edges).snr_bin == 2
    assert quantize(kpi(snr=3.999), edges).snr_bin == 1


def test_quantize_default_edges_place_12_3_db_in_bin_8():
    # 4 dB bins nominally starting at -20: edges -16, -12, ..., 12 lie at or below 12.3
    assert quantize(kpi(snr=12.3)).snr_bin == 8


def test_quantize_count_rule_with_explicit_edges():
    # the "count edges <= value" rule on a grid whose first edge is -20
    assert quantize(kpi(snr=12.3), KpiEdges(snr=FOUR_DB_FROM_MINUS_20)).snr_bin == 9


def test_quantize_clamps_to_last_bin():
    s = quantize(kpi(snr=1e3, bler=1.0, lat=1e6, tp=1e9))
    assert s == StateBin(15, 7, 7, 7)


def test_threshold_edges_sit_on_mcs_switch_points():
    edges = threshold_snr_edges()
    assert len(edges) == 15
    assert edges[3:] == radio.BlerModel().thresholds
    assert edges[:3] == (-11.0, -9.0, -7.0)


def test_edges_must_increase():
    with pytest.raises(ValueError):
        KpiEdges(snr=(1.0, 0.0))
    with pytest.raises(ValueError):
        KpiEdges(bler=tuple(range(8)))


@given(st.floats(-100, 100), st.floats(0, 1), st.floats(0, 1e4), st.floats(0, 1e4))
def test_quantize_ranges(s, b, lat, tp):
    q = quantize(kpi(s, b, lat, tp))
    assert 0 <= q.snr_bin <= 15 and 0 <= q.bler_bin <= 7
    assert 0 <= q.latency_bin <= 7 and 0 <= q.throughput_bin <= 7


# ------------------------------------------------------------------ reward

def test_default_reward_is_negative_bler():
    assert reward(kpi(bler=0.2, lat=5, tp=100)) == pytest.approx(-0.2)


def test_composite_reward():
    w = RewardWeights(bler=1.0, latency=2.0, throughput=3.0)
    # -0.1 - 2 * (5/10) + 3 * (150/300)
    assert reward(kpi(bler=0.1, lat=5.0, tp=150.0), w) == pytest.approx(0.4)


def test_reward_normalization_is_clipped():
    w = RewardWeights(bler=0.0, latency=1.0, throughput=1.0)
    assert reward(kpi(lat=1e4, tp=1e4), w) == pytest.approx(0.0)


def test_reward_weights_validation():
    with pytest.raises(ValueError):
        RewardWeights(latency_ref_ms=0.0)
    with pytest.raises(ValueError):
        RewardWeights(bler=float("inf"))


# ------------------------------------------------------------------ selection

def test_epsilon_zero_all_zero_q_picks_lowest_indices():
    p = FactoredPolicy(epsilon=0.0)
    assert select_action(p, StateBin(3, 1, 2, 4), np.random.default_rng(0)) == TxConfig(0, 1, 0)


def test_epsilon_zero_known_maxima():
    p = FactoredPolicy(epsilon=0.0)
    s = StateBin(5, 2, 3, 4)
    p.q_mcs_[5, 2, 7] = 1.0
    p.q_rep_[5, 2, 3] = 2.0
    p.q_harq_[2, 3, 4, 1] = 0.5
    assert select_action(p, s, np.random.default_rng(0)) == TxConfig(7, 4, 1)


def test_tie_break_prefers_lowest_index():
    p = FactoredPolicy(epsilon=0.0)
    p.q_mcs_[0, 0, [4, 9]] = 3.0
    assert p.greedy(StateBin(0, 0, 0, 0)).mcs == 4


def test_epsilon_one_is_uniform_over_joint_actions():
    p = FactoredPolicy(epsilon=1.0)
    rng = np.random.default_rng(42)
    s = StateBin(0, 0, 0, 0)
    n = 200_000
    counts = np.zeros((12, 8, 6))
    for _ in range(n):
        counts[select_action(p, s, rng).indices] += 1
    for axis, k in ((0, 12), (1, 8), (2, 6)):
        marg = counts.sum(axis=tuple(a for a in range(3) if a != axis)) / n
        np.testing.assert_allclose(marg, 1.0 / k, rtol=0.03)
    assert (counts > 0).all()


def test_select_action_consumes_fixed_draws():
    s = StateBin(0, 0, 0, 0)
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    select_action(FactoredPolicy(epsilon=0.0), s, r1)
    select_action(FactoredPolicy(epsilon=1.0), s, r2)
    assert r1.random() == r2.random()


q_tables = st.integers(0, 2**32 - 1)


@settings(max_examples=60)
@given(seed=q_tables, scale=st.floats(0.01, 100))
def test_greedy_invariant_under_positive_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    p = FactoredPolicy(epsilon=0.0)
    for t in p.tables().values():
        t[...] = rng.normal(size=t.shape)
    q = p.copy()
    for t in q.tables().values():
        t *= scale
    for state in [StateBin(*rng.integers(0, [16, 8, 8, 8])) for _ in range(20)]:
        assert p.greedy(state) == q.greedy(state)


# ------------------------------------------------------------------ q_update

def test_q_update_hand_example():
    p = FactoredPolicy(alpha=0.5, gamma=0.9)
    s = StateBin(0, 0, 0, 0)
    q_update(p, s, TxConfig(2, 4, 3), 1.0, StateBin(1, 0, 1, 0))
    assert p.q_mcs_[0, 0, 2] == 0.5
    assert p.q_rep_[0, 0, 3] == 0.5
    assert p.q_harq_[0, 0, 0, 3] == 0.5


def test_q_update_alpha_zero_is_noop():
    p = FactoredPolicy(alpha=0.0)
    before = p.copy()
    q_update(p, StateBin(1, 1, 1, 1), TxConfig(5, 2, 2), 7.0, StateBin(2, 2, 2, 2))
    assert p == before


def test_q_update_gamma_zero_converges_geometrically():
    p = FactoredPolicy(alpha=0.3, gamma=0.0)
    s = StateBin(0, 0, 0, 0)
    a = TxConfig(1, 1, 1)
    for n in range(1, 30):
        q_update(p, s, a, 2.0, s)
        assert p.q_mcs_[0, 0, 1] == pytest.approx(2.0 * (1 - 0.7**n))


def test_hysteretic_rate_on_negative_error():
    p = FactoredPolicy(alpha=0.5, gamma=0.0, beta=0.0)
    s = StateBin(0, 0, 0, 0)
    a = TxConfig(0, 1, 0)
    q_update(p, s, a, 1.0, s)
    q_update(p, s, a, -5.0, s)
    assert p.q_mcs_[0, 0, 0] == 0.5
    p.beta = 0.1
    q_update(p, s, a, -5.0, s)
    assert p.q_mcs_[0, 0, 0] == pytest.approx(0.5 + 0.1 * (-5.5))


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1), r=st.floats(-10, 10), alpha=st.floats(0.01, 1), gamma=st.floats(0, 0.99))
def test_q_update_touches_one_entry_per_head(seed, r, alpha, gamma):
    rng = np.random.default_rng(seed)
    p = FactoredPolicy(alpha=alpha, gamma=gamma)
    for t in p.tables().values():
        t[...] = rng.normal(size=t.shape)
    before = p.copy()
    s = StateBin(*rng.integers(0, [16, 8, 8, 8]))
    ns = StateBin(*rng.integers(0, [16, 8, 8, 8]))
    q_update(p, s, TxConfig.from_flat(int(rng.integers(576))), r, ns)
    for name in ("mcs", "rep", "harq"):
        assert np.count_nonzero(p.tables()[name] != before.tables()[name]) <= 1
    assert np.all(np.isfinite(p.q_mcs_))


# ------------------------------------------------------------------ baselines

def test_lookup_floor_ceiling_and_inclusive_threshold():
    table = radio.BlerModel().thresholds
    assert lookup_policy(-50.0, table).mcs == 0
    assert lookup_policy(50.0, table).mcs == 11
    assert lookup_policy(table[4], table).mcs == 4
    assert lookup_policy(np.nextafter(table[4], -1), table).mcs == 3
    assert lookup_policy(3.0, table) == TxConfig(4, 1, 5)


def test_lookup_thresholds_for_target():
    assert lookup_thresholds() == radio.BlerModel().thresholds
    # 10% first-attempt BLER sits ln(9) dB above each midpoint
    t = lookup_thresholds(target_bler=0.1)
    assert t[0] == pytest.approx(-5.0 + 2.1972245773)


def test_lookup_estimator_predict():
    est = LookupTablePolicy()
    X = np.array([[3.0, 0, 0, 0], [-40.0, 0, 0, 0]])
    assert est.predict(X).tolist() == [TxConfig(4, 1, 5).flat_index, TxConfig(0, 1, 5).flat_index]
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3)))


def test_random_policy_marginals_and_coverage():
    rng = np.random.default_rng(11)
    n = 1_000_000
    counts = np.zeros(576, dtype=int)
    for _ in range(n):
        counts[random_policy(rng).flat_index] += 1
    assert (counts > 0).all()
    grid = counts.reshape(12, 8, 6)
    for axis, k in ((0, 12), (1, 8), (2, 6)):
        marg = grid.sum(axis=tuple(a for a in range(3) if a != axis)) / n
        np.testing.assert_allclose(marg, 1.0 / k, rtol=0.01)


def test_random_policy_reproducible():
    a = [random_policy(np.random.default_rng(5)) for _ in range(3)]
    r = np.random.default_rng(5)
    b = [random_policy(r) for _ in range(3)]
    assert a[0] == b[0]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [random_policy(r1) for _ in range(50)] == [random_policy(r2) for _ in range(50)]


def test_random_estimator_is_seeded():
    X = np.zeros((10, 4))
    assert np.array_equal(RandomPolicy(3).predict(X), RandomPolicy(3).predict(X))


# ------------------------------------------------------------------ estimator shape

def test_policy_params_and_clone():
    p = FactoredPolicy(epsilon=0.2, alpha=0.3, gamma=0.5, beta=0.05)
    assert p.get_params() == {"epsilon": 0.2, "alpha": 0.3, "gamma": 0.5, "edges": None, "beta": 0.05}
    c = clone(p)
    assert c.get_params() == p.get_params()
    p.set_params(epsilon=0.0)
    assert p.epsilon == 0.0


def test_policy_validate():
    with pytest.raises(ValueError):
        FactoredPolicy(epsilon=1.5).validate()
    with pytest.raises(ValueError):
        FactoredPolicy(gamma=1.0).validate()
    p = FactoredPolicy()
    p.q_rep_[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        p.validate()


def test_policy_predict_matches_greedy():
    p = FactoredPolicy(epsilon=0.0)
    p.q_mcs_[8, 0, 6] = 1.0
    X = np.array([[12.3, 0.0, 0.5, 10.0]])
    assert p.predict(X)[0] == TxConfig(6, 1, 0).flat_index


@pytest.mark.parametrize("kind, text", [
    (PolicyKind.LEARNED, "learned"), (PolicyKind.LOOKUP_TABLE, "LookupTable"), (PolicyKind.RANDOM, "random"),
])
def test_policy_kind_parse(kind, text):
    assert PolicyKind.parse(text) is kind


def test_policy_kind_rejects_unknown():
    with pytest.raises(ValueError):
        PolicyKind.parse("oracle")


# ------------------------------------------------------------------ serialization

@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_policy_file_round_trip_is_bit_exact(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    p = FactoredPolicy(epsilon=0.05, alpha=0.1, gamma=0.9, edges=KpiEdges(snr=threshold_snr_edges()))
    for t in p.tables().values():
        t[...] = rng.normal(size=t.shape) * 10.0 ** rng.integers(-300, 300, size=t.shape)
    path = tmp_path_factory.mktemp("pol") / "p.txt"
    dump_policy(p, path)
    q = load_policy(path)
    assert q == p
    assert q.edges == p.edges


def test_load_policy_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("hello\n")
    with pytest.raises(ValueError):
        load_policy(bad)
    p = FactoredPolicy()
    dump_policy(p, bad)
    bad.write_text(bad.read_text() + "nonsense line\n")
    with pytest.raises(ValueError):
        load_policy(bad)


# ------------------------------------------------------------------ training

def test_schedule_rejects_zero_episodes():
    with pytest.raises(ValueError):
        TrainingSchedule(episodes=0).validate()
    with pytest.raises(ValueError):
        train(StationaryLinkEnv(0.0), [FactoredPolicy()], TrainingSchedule(episodes=0), np.random.default_rng(0))


def test_epsilon_schedule_is_linear_then_flat():
    s = TrainingSchedule(episodes=100)
    assert s.epsilon(0) == 1.0
    assert s.epsilon(40) == pytest.approx(0.525)
    assert s.epsilon(80) == pytest.approx(0.05)
    assert s.epsilon(99) == pytest.approx(0.05)
    vals = [s.epsilon(e) for e in range(100)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_learning_rates_constant_without_alpha_end():
    s = TrainingSchedule(episodes=10, alpha=0.2, beta=0.05)
    assert {s.learning_rates(e) for e in range(10)} == {(0.2, 0.05)}


def test_learning_rates_decay_with_epsilon():
    s = TrainingSchedule(episodes=100, alpha=0.1, alpha_end=0.02, beta=0.05)
    # halfway through the 80-episode decay: 0.1 + (0.02 - 0.1) * 0.5
    alpha, beta = s.learning_rates(40)
    assert alpha == pytest.approx(0.06)
    assert beta == pytest.approx(0.03)  # keeps the 1:2 ratio to alpha
    assert s.learning_rates(95) == (pytest.approx(0.02), pytest.approx(0.01))
    with pytest.raises(ValueError):
        TrainingSchedule(alpha_end=1.5).validate()


def test_train_applies_final_learning_rate():
    s = TrainingSchedule(episodes=5, episode_ttis=20, alpha=0.5, alpha_end=0.1, decay_fraction=0.5)
    (agent,), _ = train(StationaryLinkEnv(3.0), [FactoredPolicy()], s, np.random.default_rng(0))
    assert agent.alpha == pytest.approx(0.1)


def test_stationary_env_kpis():
    env = StationaryLinkEnv(3.0)
    k = env.kpi(TxConfig(4, 1, 1))
    # threshold of MCS 4 is 3 dB, so p = 0.5: residual 0.25, 1.5 expected attempts,
    # goodput 125 * 0.75 / 1.5
    assert k.bler == pytest.approx(0.25)
    assert k.latency_ms == pytest.approx(1.5)
    assert k.throughput_kbps == pytest.approx(62.5)


def test_training_is_deterministic_per_seed():
    sched = TrainingSchedule(episodes=20, episode_ttis=200, weights=RewardWeights(throughput=1.0))
    runs = []
    for _ in range(2):
        agents = [FactoredPolicy(edges=ONE_STATE_EDGES) for _ in range(2)]
        agents, curve = train(StationaryLinkEnv(2.0, n_agents=2), agents, sched, np.random.default_rng(8))
        runs.append((agents, curve))
    assert np.array_equal(runs[0][1], runs[1][1])
    assert runs[0][0] == runs[1][0]


def test_trained_agent_bler_not_worse_than_lookup():
    snr = 1.0
    env = StationaryLinkEnv(snr)
    sched = TrainingSchedule(episodes=500, episode_ttis=200)
    agents, _ = train(env, [FactoredPolicy(edges=ONE_STATE_EDGES)], sched, np.random.default_rng(2))
    learned = env.kpi(agents[0].greedy(quantize(kpi(snr), ONE_STATE_EDGES)))
    lookup = env.kpi(lookup_policy(snr, radio.BlerModel().thresholds))
    assert learned.bler <= lookup.bler
    assert agents[0].epsilon == 0.0


@pytest.mark.parametrize("snr", [-8.0, 4.0, 15.0])
def test_one_state_training_finds_exhaustive_optimum(snr):
    w = RewardWeights(bler=1.0, latency=0.1, throughput=1.0)
    sched = TrainingSchedule(episodes=300, episode_ttis=1000, weights=w, beta=0.0)
    agents, _ = train(StationaryLinkEnv(snr), [FactoredPolicy(edges=ONE_STATE_EDGES)], sched,
                      np.random.default_rng(1))
    assert agents[0].greedy(quantize(kpi(snr), ONE_STATE_EDGES)) == toy_best_action(snr, w)
