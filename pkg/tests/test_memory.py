
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkagent.linksim import LinkAction
from linkagent.memory import (DEFAULT_RULES, Effect, EpisodeRecord, EpisodicStore, GuardExpression,
                              Rule, RuleBase, default_rules, evaluate_rules)
from linkagent.situation import SituationSummary


def rec(vec, t=0, mcs=5):
    return EpisodeRecord(np.asarray(vec, dtype=float), LinkAction(mcs, 1), 0.5, 0.01, t)


def summary(wb=0.0, vulnerable=False, forecast=(0.0,) * 5):
    return SituationSummary(20.0, 0.0, wb, tuple(forecast), vulnerable, "hold")


# ---- records

def test_record_validates_shape_and_finiteness():
    rec(np.zeros(16))
    with pytest.raises(ValueError):
        rec(np.zeros(15))
    bad = np.zeros(16)
    bad[3] = np.nan
    with pytest.raises(ValueError):
        rec(bad)


# ---- episodic store

def test_self_retrieval_distance_zero():
    s = EpisodicStore()
    v = np.arange(16.0)
    r = rec(v)
    s.store(r)
    s.store(rec(v + 3.0, 1))
    (got, d), = s.retrieve_similar(v, k=1)
    assert got is r and d == pytest.approx(0.0, abs=1e-9)


def test_empty_and_oversized_k():
    s = EpisodicStore()
    assert s.retrieve_similar(np.zeros(16)) == []
    for t in range(3):
        s.store(rec(np.full(16, float(t)), t))
    assert len(s.retrieve_similar(np.zeros(16), k=50)) == 3
    with pytest.raises(ValueError):
        s.retrieve_similar(np.zeros(16), k=0)


def test_eviction_drops_oldest():
    s = EpisodicStore(capacity=100_000)
    base = np.zeros(16)
    first = rec(base, 0)
    s.store(first)
    for t in range(1, 100_001):
        s.store(rec(base, t))
    assert len(s) == 100_000
    stamps = {r.timestamp_tti for r in s._records}
    assert 0 not in stamps and 100_000 in stamps


def test_three_records_nearest_in_order():
    s = EpisodicStore()
    # spread along feature 0 with a constant-variance standardiser
    vecs = [np.eye(16)[0] * d for d in (0.0, 1.0, 2.0)]
    for t, v in enumerate(vecs):
        s.store(rec(v, t))
    res = s.retrieve_similar(np.zeros(16), k=2)
    assert [r.timestamp_tti for r, _ in res] == [0, 1]
    assert res[0][1] < res[1][1]


def test_duplicates_newest_first():
    s = EpisodicStore()
    v = np.ones(16)
    for t in range(5):
        s.store(rec(v, t))
    s.store(rec(v * 9, 5))
    res = s.retrieve_similar(v, k=3)
    assert [r.timestamp_tti for r, _ in res] == [4, 3, 2]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 400), st.integers(1, 20), st.integers(0, 10**6), st.booleans())
def test_retrieval_matches_exhaustive_scan(n, k, seed, quantised):
    rng = np.random.default_rng(seed)
    s = EpisodicStore(capacity=300, restandardize_every=50)
    for t in range(n):
        v = rng.normal(size=16) * np.arange(1, 17)
        if quantised:
            v = np.round(v / 8.0)  # forces many exact ties
        s.store(rec(v, t))
    q = rng.normal(size=16) * np.arange(1, 17)
    if quantised:
        q = np.round(q / 8.0)
    fast = s.retrieve_similar(q, k)
    slow = s.brute_force(q, k)
    assert [r.timestamp_tti for r, _ in fast] == [r.timestamp_tti for r, _ in slow]
    assert [d for _, d in fast] == pytest.approx([d for _, d in slow], abs=1e-6)


def test_retrieval_exact_on_10k_store():
    rng = np.random.default_rng(1)
    s = EpisodicStore()
    for t in range(10_000):
        s.store(rec(rng.normal(size=16), t))
    for _ in range(5):
        q = rng.normal(size=16)
        assert ([r.timestamp_tti for r, _ in s.retrieve_similar(q, 8)]
                == [r.timestamp_tti for r, _ in s.brute_force(q, 8)])


# ---- rules

def test_urllc_high_bler_forces_decrement():
    eff = evaluate_rules(summary(wb=0.002), "urllc", LinkAction(10, 1))
    assert "force_mcs_decrement" in [e.kind for e in eff]


def test_embb_quiet_link_has_no_effects():
    assert evaluate_rules(summary(wb=0.01), "embb", LinkAction(10, 1)) == []


def test_urllc_rank2_forced_to_rank1():
    eff = evaluate_rules(summary(), "urllc", LinkAction(10, 2))
    assert Effect("force_rank", 1, "R2") in eff


def test_embb_cap_is_current_minus_one():
    eff = evaluate_rules(summary(wb=0.2), "embb", LinkAction(14, 1), current=LinkAction(12, 1))
    assert eff == [Effect("cap_mcs", 11, "R3")]


def test_vulnerability_vetoes_raise():
    eff = evaluate_rules(summary(vulnerable=True), "embb", LinkAction(3, 1))
    assert eff == [Effect("veto_goal", "raise", "R4")]


def test_effects_in_priority_order():
    eff = evaluate_rules(summary(wb=0.5, vulnerable=True), "urllc", LinkAction(10, 2))
    assert [e.rule_id for e in eff] == ["R1", "R2", "R4"]


@given(st.permutations(range(len(DEFAULT_RULES))), st.floats(0, 1), st.booleans(),
       st.sampled_from(["embb", "urllc"]), st.integers(0, 28), st.sampled_from([1, 2]))
def test_rule_order_independent_of_insertion(perm, wb, vuln, mode, mcs, rank):
    shuffled = RuleBase.from_dicts([DEFAULT_RULES[i] for i in perm])
    s = summary(wb=wb, vulnerable=vuln)
    a = LinkAction(mcs, rank)
    assert shuffled.evaluate(s, mode, a) == default_rules().evaluate(s, mode, a)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        RuleBase.from_dicts([DEFAULT_RULES[0], DEFAULT_RULES[0]])


def test_guard_rejects_calls_and_attributes():
    for src in ["__import__('os')", "mode.upper()", "x[0]", "lambda: 1"]:
        with pytest.raises(ValueError):
            GuardExpression(src)
    g = GuardExpression("a > 1 and not b")
    assert g({"a": 2, "b": False}) is True
    with pytest.raises(NameError):
        g({"a": 2})


def test_rule_base_loads_from_yaml(tmp_path):
    path = tmp_path / "rules.yaml"
    path.write_text("rules:\n  - {id: X, priority: 5, guard: 'windowed_bler > 0.3', effect: cap_mcs, value: 4}\n")
    rb = RuleBase.load(path)
    assert rb.evaluate(summary(wb=0.4), "embb", LinkAction(9, 1)) == [Effect("cap_mcs", 4, "X")]
    assert rb.evaluate(summary(wb=0.1), "embb", LinkAction(9, 1)) == []


def test_unknown_effect_rejected():
    with pytest.raises(ValueError):
        Rule("Z", lambda ctx: True, "explode", 0).fire({})
