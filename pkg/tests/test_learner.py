import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkagent.linksim import MAX_MCS, MCS_TABLE, TransmissionOutcome, tbs_bits
from linkagent.learner import (ACTIONS, IMITATION_MIN_ACCURACY, N_ACTIONS, SE_MAX, STATE_DIM, TBS_MAX,
                               CandidateRanker, CheckpointError, DQNLearner, MLP, ReplayBuffer,
                               ShapeMismatch, Transition, action_id, action_of, encode_state,
                               epsilon_at, load_checkpoint, q_network, q_update, rank_anchor,
                               ranker_network, reward, save_checkpoint, softmax_xent_and_grads,
                               td_loss_and_grads, valid_action_mask)


def outcome(mcs, rank, ack):
    tbs = tbs_bits(MCS_TABLE[mcs], rank)
    return TransmissionOutcome(0, ack, tbs, tbs if ack else 0, 0.1, mcs, rank)


def random_state(rng, n=None):
    shape = (STATE_DIM,) if n is None else (n, STATE_DIM)
    return rng.uniform(-1.0, 1.5, size=shape)


# ---- actions and state

def test_action_ids_are_a_bijection():
    assert N_ACTIONS == 10
    assert sorted(action_id(*action_of(i)) for i in range(10)) == list(range(10))
    assert len(set(ACTIONS)) == 10


def test_rank_anchor_keeps_margin():
    assert rank_anchor(20, 1, 1) == 20
    up = rank_anchor(20, 1, 2)
    thr = [e.sinr_threshold_db for e in MCS_TABLE]
    assert thr[up] <= thr[20] - 3.0 + 1e-9 < thr[up + 1]
    assert rank_anchor(0, 1, 2) == 0


def test_valid_mask_blocks_off_table_and_urllc_rank2():
    s = encode_state(20, 0, 10, 0, [0] * 5, 0, 1, True, 0, True, 0)
    m = valid_action_mask(s)[0]
    for i, (d, r) in enumerate(ACTIONS):
        assert m[i] == (d >= 0 and r == 1)


def test_encode_layout_and_bounds():
    v = encode_state(20.0, 0.25, 15, 0.05, [0.1] * 5, 28, 2, True, 4000, False, -5.0)
    assert v.shape == (16,)
    assert v[0] == 0.5 and v[1] == 0.5 and v[2] == 1.0 and v[9] == 1.0 and v[10] == 1.0
    assert v[11] == 1.0 and v[12] == 1.0 and v[13] == 0.0 and v[14] == -0.5 and v[15] == 1.0


@given(st.floats(-50, 80), st.floats(-5, 5), st.integers(0, 15), st.floats(0, 1),
       st.lists(st.floats(0, 1), min_size=5, max_size=5), st.integers(0, 28), st.sampled_from([1, 2]),
       st.booleans(), st.integers(0, 10**6), st.booleans(), st.floats(-10, 10))
def test_state_components_in_range(sinr, trend, cqi, wb, fc, mcs, rank, urllc, since, ack, offset):
    v = encode_state(sinr, trend, cqi, wb, fc, mcs, rank, urllc, since, ack, offset)
    assert v.shape == (16,) and np.all(v >= -1.0) and np.all(v <= 1.5)


# ---- reward

def test_reward_examples():
    assert reward("embb", outcome(MAX_MCS, 2, True), 0.05) == pytest.approx(1.0)
    assert reward("urllc", outcome(5, 1, False), 0.0) == -10.0
    assert reward("embb", outcome(5, 1, False), 0.20) == pytest.approx(-0.2)
    assert reward("urllc", outcome(MAX_MCS, 1, True), 0.0) == pytest.approx(1.0)


@given(st.integers(0, 28), st.sampled_from([1, 2]), st.booleans(), st.floats(0, 1))
def test_reward_bounds(mcs, rank, ack, wb):
    o = outcome(mcs, rank, ack)
    assert -2.0 <= reward("embb", o, wb) <= 1.0
    assert -10.0 <= reward("urllc", o, wb) <= 1.0
    assert TBS_MAX == 436_732 and SE_MAX == pytest.approx(5.5547, abs=1e-4)


# ---- networks and gradients

def numeric_grad_check(net, loss_fn, grads, rng, coords=40, eps=1e-6):
    worst = 0.0
    for p, g in zip(net.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in rng.choice(flat.size, size=min(coords, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + eps
            up = loss_fn()
            flat[j] = old - eps
            down = loss_fn()
            flat[j] = old
            num = (up - down) / (2 * eps)
            denom = max(abs(num), abs(gflat[j]), 1e-8)
            worst = max(worst, abs(num - gflat[j]) / denom)
    return worst


@pytest.mark.parametrize("probe", range(10))
def test_q_network_gradient_check(probe):
    rng = np.random.default_rng(100 + probe)
    net, target = q_network(probe), q_network(probe + 50)
    s, s2 = random_state(rng, 8), random_state(rng, 8)
    a = rng.integers(0, N_ACTIONS, 8)
    r = rng.normal(size=8)
    done = (rng.random(8) < 0.3).astype(float)
    _, grads = td_loss_and_grads(net, target, s, a, r, s2, done, 0.9)
    fn = lambda: td_loss_and_grads(net, target, s, a, r, s2, done, 0.9)[0]
    assert numeric_grad_check(net, fn, grads, rng) <= 1e-4


@pytest.mark.parametrize("probe", range(10))
def test_ranker_gradient_check(probe):
    rng = np.random.default_rng(200 + probe)
    net = ranker_network(probe)
    s = random_state(rng, 8)
    labels = rng.integers(0, N_ACTIONS, 8)
    _, grads = softmax_xent_and_grads(net, s, labels)
    fn = lambda: softmax_xent_and_grads(net, s, labels)[0]
    assert numeric_grad_check(net, fn, grads, rng) <= 1e-4


def test_network_shapes_and_purity():
    net = q_network(3)
    assert net.dims == (16, 64, 64, 10)
    assert ranker_network().dims == (16, 32, 10)
    x = random_state(np.random.default_rng(0))
    a, b = net.forward(x), net.forward(x)
    assert a.shape == (10,) and a.tobytes() == b.tobytes()


# ---- Bellman update

def constant_net(values):
    """Q-network whose output ignores the input and equals ``values``."""
    net = q_network(0)
    for w in net.weights:
        w[...] = 0.0
    for b in net.biases:
        b[...] = 0.0
    net.biases[-1][...] = values
    return net


def test_q_update_hand_example():
    net = constant_net(np.full(10, 0.5))
    target = constant_net(np.linspace(0.0, 1.0, 10))
    s = np.zeros(16)
    loss = q_update([Transition(s, 3, 0.2, s, False)], net, target, gamma=0.9, lr=0.0)
    assert loss == pytest.approx((0.5 - 1.1) ** 2)
    assert loss == pytest.approx(0.36)


def test_zero_discount_and_terminal_targets():
    rng = np.random.default_rng(0)
    net, target = q_network(1), q_network(2)
    s, s2 = random_state(rng, 6), random_state(rng, 6)
    a = rng.integers(0, 10, 6)
    r = rng.normal(size=6)
    q = net.forward(s)[np.arange(6), a]
    expect = np.mean((q - r) ** 2)
    loss0, _ = td_loss_and_grads(net, target, s, a, r, s2, np.zeros(6), 0.0)
    loss_done, _ = td_loss_and_grads(net, target, s, a, r, s2, np.ones(6), 0.9)
    assert loss0 == pytest.approx(expect) and loss_done == pytest.approx(expect)


def test_masked_bootstrap_ignores_invalid_actions():
    net = constant_net(np.zeros(10))
    target = constant_net(np.arange(10.0))
    s = np.zeros((1, 16))
    mask = np.zeros((1, 10), dtype=bool)
    mask[0, 2] = True
    loss, _ = td_loss_and_grads(net, target, s, np.array([0]), np.array([0.0]), s, np.zeros(1), 1.0, mask)
    assert loss == pytest.approx(4.0)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        q_update((np.zeros((4, 15)), np.zeros(4, int), np.zeros(4), np.zeros((4, 15)), np.zeros(4)),
                 q_network(), q_network())
    with pytest.raises(ShapeMismatch):
        q_network().copy_from(ranker_network())


def test_target_sync_every_500_updates():
    rng = np.random.default_rng(0)
    learner = DQNLearner(q_network(0), sync_every=500)
    buf = ReplayBuffer(seed=0)
    for _ in range(200):
        buf.push(Transition(random_state(rng), int(rng.integers(10)), float(rng.normal()), random_state(rng)))
    for _ in range(499):
        learner.q_update(buf.sample(64))
    assert any(not np.array_equal(a, b) for a, b in zip(learner.net.params, learner.target.params))
    learner.q_update(buf.sample(64))
    assert all(np.array_equal(a, b) for a, b in zip(learner.net.params, learner.target.params))


def test_epsilon_schedule():
    assert epsilon_at(0) == 1.0
    assert epsilon_at(10_000) == pytest.approx(0.525)
    assert epsilon_at(20_000) == epsilon_at(10**7) == 0.05


def toy_mdp(seed=0):
    rng = np.random.default_rng(seed)
    rew = rng.random((3, N_ACTIONS))
    nxt = (np.arange(3)[:, None] + np.arange(N_ACTIONS)[None, :]) % 3
    return rew, nxt


def value_iteration(rew, nxt, gamma=0.9, iters=2000):
    q = np.zeros_like(rew)
    for _ in range(iters):
        q = rew + gamma * q.max(axis=1)[nxt]
    return q


def test_dqn_recovers_toy_mdp_optimum():
    rew, nxt = toy_mdp()
    q_star = value_iteration(rew, nxt)
    states = np.zeros((3, 16))
    states[np.arange(3), np.arange(3)] = 1.0
    states[:, 15] = 1.0
    buf = ReplayBuffer(capacity=1000, seed=1)
    for s in range(3):
        for a in range(N_ACTIONS):
            buf.push(Transition(states[s], a, float(rew[s, a]), states[nxt[s, a]]))
    learner = DQNLearner(q_network(0), gamma=0.9, lr=1e-2, sync_every=50,
                         max_grad_norm=None, mask_invalid=False)
    for _ in range(10_000):
        learner.q_update(buf.sample(64))
    assert np.abs(learner.net.forward(states) - q_star).max() <= 1e-2


def run_training(seed):
    rng = np.random.default_rng(seed)
    learner = DQNLearner(q_network(seed))
    buf = ReplayBuffer(seed=seed)
    for _ in range(300):
        buf.push(Transition(random_state(rng), int(rng.integers(10)), float(rng.normal()), random_state(rng)))
    return [learner.q_update(buf.sample(64)) for _ in range(50)]


def test_training_reproducible():
    assert run_training(4) == run_training(4)


# ---- ranker

def test_untrained_ranker_keeps_order():
    r = CandidateRanker()
    assert r.rank_candidates(np.zeros(16), [7, 2, 5]) == [0, 1, 2]


def test_hand_set_logits_order():
    net = ranker_network()
    for w in net.weights:
        w[...] = 0.0
    net.biases[-1][...] = [2.0, 1.0] + [0.0] * 8
    r = CandidateRanker(net, trained=True)
    assert r.rank_candidates(np.zeros(16), [5, 1, 0, 9]) == [2, 1, 0, 3]  # ties keep order


def fixed_policy(states):
    """Teacher: bin the SINR feature into five steps, flip rank on the mode flag."""
    bins = np.clip(((states[:, 0] + 1.0) / 2.5 * 5).astype(int), 0, 4)
    return bins * 2 + (states[:, 11] > 0.25)


def test_ranker_imitates_fixed_policy():
    rng = np.random.default_rng(0)
    train_s, test_s = random_state(rng, 5000), random_state(rng, 1000)
    r = CandidateRanker()
    r.fit(train_s, fixed_policy(train_s), epochs=100, seed=0)
    assert r.accuracy(test_s, fixed_policy(test_s)) >= IMITATION_MIN_ACCURACY


# ---- checkpoint

def test_checkpoint_round_trip_bit_exact(tmp_path):
    nets = {"qnet": q_network(5), "ranker": ranker_network(6)}
    path = tmp_path / "w.laqn"
    save_checkpoint(path, nets, {"ranker": False})
    loaded, flags = load_checkpoint(path)
    assert flags == {"qnet": True, "ranker": False}
    for name, net in nets.items():
        assert loaded[name].dims == net.dims
        for a, b in zip(net.params, loaded[name].params):
            assert a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "again.laqn", loaded, flags)
    assert (tmp_path / "again.laqn").read_bytes() == path.read_bytes()


def test_checkpoint_header_is_versioned(tmp_path):
    path = tmp_path / "w.laqn"
    save_checkpoint(path, {"qnet": q_network()})
    raw = path.read_bytes()
    assert raw[:4] == b"LAQN" and int.from_bytes(raw[4:8], "little") == 1
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
