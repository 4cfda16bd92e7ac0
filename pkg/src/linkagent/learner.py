"""Value learning: state encoding, rewards, numpy MLPs, DQN updates, checkpoints."""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linksim import (MAX_MCS, MCS_TABLE, RANK_PENALTY_DB, SPECTRAL_EFFICIENCY, THRESHOLDS_DB,
                      TransmissionOutcome, tbs_bits)

STATE_DIM = 16
DELTAS = (-2, -1, 0, 1, 2)
RANKS = (1, 2)
ACTIONS = tuple((d, r) for d in DELTAS for r in RANKS)
N_ACTIONS = len(ACTIONS)
_ACTION_ID = {a: i for i, a in enumerate(ACTIONS)}

EMBB_TARGET = 0.10
TBS_MAX = tbs_bits(MCS_TABLE[MAX_MCS], 2)
SE_MAX = float(SPECTRAL_EFFICIENCY[-1])
IMITATION_MIN_ACCURACY = 0.8  # top-1 agreement a ranker must reach on held-out states


class ShapeMismatch(ValueError):
    pass


def action_id(delta: int, rank: int) -> int:
    return _ACTION_ID[(delta, rank)]


def action_of(aid: int) -> tuple[int, int]:
    return ACTIONS[aid]


def rank_anchor(mcs_index: int, current_rank: int, rank: int, penalties=RANK_PENALTY_DB) -> int:
    """MCS at ``rank`` whose threshold sits the rank-penalty difference below ``mcs_index``.

    Grid steps toward the other rank start here, so Δ=0 keeps the link margin.
    """
    if rank == current_rank:
        return mcs_index
    limit = THRESHOLDS_DB[mcs_index] - (penalties[rank] - penalties[current_rank])
    return max(0, bisect.bisect_right(THRESHOLDS_DB, limit + 1e-9) - 1)


# [current_rank - 1, mcs, rank - 1] -> anchor
_ANCHORS = np.array([[[rank_anchor(m, cr, r) for r in RANKS] for m in range(MAX_MCS + 1)]
                     for cr in RANKS])
_ACT_DELTA = np.array([d for d, _ in ACTIONS])
_ACT_RANK = np.array([r for _, r in ACTIONS])


def valid_action_mask(states) -> np.ndarray:
    """Which grid actions can be executed from each encoded state.

    Steps off the table edge are invalid, and so is rank 2 in URLLC mode.
    """
    s = np.atleast_2d(states)
    mcs = np.clip(np.rint(s[:, 9] * MAX_MCS).astype(int), 0, MAX_MCS)
    cur = np.clip(np.rint(s[:, 10]).astype(int), 0, 1)
    urllc = s[:, 11] > 0.5
    target = _ANCHORS[cur[:, None], mcs[:, None], _ACT_RANK[None, :] - 1] + _ACT_DELTA[None, :]
    return (target >= 0) & (target <= MAX_MCS) & ~(urllc[:, None] & (_ACT_RANK[None, :] == 2))


def encode_state(filtered_sinr_db: float, sinr_trend: float, cqi: int, windowed_bler: float,
                 bler_forecast, mcs_index: int, rank: int, urllc: bool,
                 ttis_since_mode_switch: int, last_ack: bool, olla_offset_db: float) -> np.ndarray:
    v = np.empty(STATE_DIM)
    v[0] = filtered_sinr_db / 40.0
    v[1] = sinr_trend / 0.5
    v[2] = cqi / 15.0
    v[3] = windowed_bler
    v[4:9] = bler_forecast
    v[9] = mcs_index / MAX_MCS
    v[10] = rank - 1
    v[11] = 1.0 if urllc else 0.0
    v[12] = min(ttis_since_mode_switch / 2000.0, 1.0)
    v[13] = 1.0 if last_ack else 0.0
    v[14] = olla_offset_db / 10.0
    v[15] = 1.0
    np.clip(v, -1.0, 1.5, out=v)
    return v


def reward(mode: str, outcome: TransmissionOutcome, windowed_bler: float) -> float:
    """Mode-weighted per-TB reward (throughput for eMBB, reliability for URLLC)."""
    if mode == "urllc":
        if outcome.ack:
            return float(SPECTRAL_EFFICIENCY[outcome.mcs_index]) / SE_MAX
        return -10.0
    return outcome.delivered_bits / TBS_MAX - 2.0 * max(0.0, windowed_bler - EMBB_TARGET)


# ---------------------------------------------------------------- networks

class MLP:
    """Fully connected ReLU network with a linear head, float64 throughout."""

    def __init__(self, dims, seed: int = 0):
        self.dims = tuple(int(d) for d in dims)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))
        self.weights[-1] *= 0.1

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy_from(self, other: MLP):
        if other.dims != self.dims:
            raise ShapeMismatch(f"{other.dims} vs {self.dims}")
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def clone(self) -> MLP:
        twin = MLP.__new__(MLP)
        twin.dims = self.dims
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def forward_cache(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients (same order as :attr:`params`) given dL/d(output)."""
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = acts[i]
            grads[2 * i] = a_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i:
                g = (g @ self.weights[i].T) * (acts[i] > 0.0)
        return grads


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def q_network(seed: int = 0) -> MLP:
    return MLP((STATE_DIM, 64, 64, N_ACTIONS), seed)


def ranker_network(seed: int = 0) -> MLP:
    return MLP((STATE_DIM, 32, N_ACTIONS), seed)


def td_loss_and_grads(net: MLP, target_net: MLP, s, a, r, s_next, done, gamma: float,
                      next_mask=None, double: bool = False):
    """Mean squared TD error and its parameter gradients for one batch.

    ``next_mask`` restricts the bootstrap max to actions available in ``s_next``.
    With ``double`` the online network picks the bootstrap action and the
    target network scores it.
    """
    q, acts = net.forward_cache(s)
    if q.shape[1] != target_net.dims[-1] or s_next.shape[1] != target_net.dims[0]:
        raise ShapeMismatch("online and target networks disagree on shape")
    q_all = target_net.forward(s_next)
    if double:
        pick = net.forward(s_next)
        if next_mask is not None:
            pick = np.where(next_mask, pick, -np.inf)
        q_next = q_all[np.arange(len(q_all)), pick.argmax(axis=1)]
    else:
        if next_mask is not None:
            q_all = np.where(next_mask, q_all, -np.inf)
        q_next = q_all.max(axis=1)
    y = r + gamma * q_next * (1.0 - done)
    idx = np.arange(len(a))
    err = q[idx, a] - y
    loss = float(np.mean(err * err))
    grad_out = np.zeros_like(q)
    grad_out[idx, a] = 2.0 * err / len(a)
    return loss, net.backward(acts, grad_out)


def softmax_xent_and_grads(net: MLP, s, labels):
    logits, acts = net.forward_cache(s)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    idx = np.arange(len(labels))
    loss = float(-np.mean(np.log(p[idx, labels] + 1e-300)))
    g = p.copy()
    g[idx, labels] -= 1.0
    return loss, net.backward(acts, g / len(labels))


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool = False


class ReplayBuffer:
    def __init__(self, capacity: int = 10_000, dim: int = STATE_DIM, seed: int = 0):
        self.capacity = capacity
        self.s = np.zeros((capacity, dim))
        self.s_next = np.zeros((capacity, dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.n = 0
        self.pos = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.n

    def push(self, t: Transition):
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = t.s, t.a, t.r, t.s_next, t.done
        self.pos = (i + 1) % self.capacity
        self.n = min(self.n + 1, self.capacity)

    def sample(self, batch_size: int):
        idx = self.rng.integers(0, self.n, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]


def epsilon_at(step: int, start: float = 1.0, end: float = 0.05, decay_steps: int = 20_000) -> float:
    if step >= decay_steps:
        return end
    return start + (end - start) * step / decay_steps


class DQNLearner:
    """Online Q-network, frozen target copy, and the optimiser that links them."""

    def __init__(self, net: MLP | None = None, gamma: float = 0.9, lr: float = 1e-3,
                 sync_every: int = 500, batch_size: int = 64, max_grad_norm: float | None = 10.0,
                 optimizer: str = "sgd", mask_invalid: bool = True, double: bool = False):
        self.net = net or q_network()
        self.double = double
        self.max_grad_norm = max_grad_norm
        self.mask_invalid = mask_invalid
        self.target = self.net.clone()
        self.gamma = gamma
        self.sync_every = sync_every
        self.batch_size = batch_size
        self.lr = lr
        self.opt = Adam(self.net.params, lr) if optimizer == "adam" else None
        self.updates = 0

    def q_update(self, batch) -> float:
        s, a, r, s_next, done = batch
        if s.ndim != 2 or s.shape[1] != self.net.dims[0]:
            raise ShapeMismatch(f"state batch shape {s.shape} does not fit {self.net.dims}")
        mask = valid_action_mask(s_next) if self.mask_invalid else None
        loss, grads = td_loss_and_grads(self.net, self.target, s, a, r, s_next, done, self.gamma, mask,
                                        self.double)
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        if self.opt is not None:
            self.opt.step(grads)
        else:
            for p, g in zip(self.net.params, grads):
                p -= self.lr * g
        self.updates += 1
        if self.updates % self.sync_every == 0:
            self.target.copy_from(self.net)
        return loss


def q_update(batch, net: MLP, target_net: MLP, gamma: float = 0.9, lr: float = 1e-3,
             opt: Adam | None = None) -> float:
    """One gradient step on ``net`` toward Bellman targets from ``target_net``.

    ``batch`` is a list of :class:`Transition` or the array tuple returned by
    :meth:`ReplayBuffer.sample`. Without an optimiser a plain SGD step is taken.
    """
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], Transition):
        s = np.stack([t.s for t in batch])
        a = np.array([t.a for t in batch])
        r = np.array([t.r for t in batch], dtype=float)
        s_next = np.stack([t.s_next for t in batch])
        done = np.array([t.done for t in batch], dtype=float)
    else:
        s, a, r, s_next, done = batch
    if s.ndim != 2 or s.shape[1] != net.dims[0]:
        raise ShapeMismatch(f"state batch shape {s.shape} does not fit {net.dims}")
    loss, grads = td_loss_and_grads(net, target_net, s, a, r, s_next, done, gamma)
    if opt is not None:
        opt.step(grads)
    else:
        for p, g in zip(net.params, grads):
            p -= lr * g
    return loss


class CandidateRanker:
    """Imitation MLP that orders candidate actions; advisory only."""

    def __init__(self, net: MLP | None = None, trained: bool = False):
        self.net = net or ranker_network()
        self.trained = trained

    def probabilities(self, state: np.ndarray) -> np.ndarray:
        logits = self.net.forward(state)
        z = np.exp(logits - logits.max())
        return z / z.sum()

    def rank_candidates(self, state: np.ndarray, candidate_ids) -> list[int]:
        """Positions of ``candidate_ids`` sorted by descending probability (stable)."""
        ids = list(candidate_ids)
        if not self.trained:
            return list(range(len(ids)))
        p = self.probabilities(state)
        return sorted(range(len(ids)), key=lambda i: -p[ids[i]])

    def fit(self, states, labels, epochs: int = 20, batch_size: int = 256, lr: float = 1e-3,
            seed: int = 0) -> list[float]:
        rng = np.random.default_rng(seed)
        opt = Adam(self.net.params, lr)
        states = np.asarray(states, dtype=float)
        labels = np.asarray(labels, dtype=np.int64)
        history = []
        for _ in range(epochs):
            order = rng.permutation(len(labels))
            total = 0.0
            for lo in range(0, len(order), batch_size):
                idx = order[lo:lo + batch_size]
                loss, grads = softmax_xent_and_grads(self.net, states[idx], labels[idx])
                opt.step(grads)
                total += loss * len(idx)
            history.append(total / max(1, len(labels)))
        self.trained = True
        return history

    def accuracy(self, states, labels) -> float:
        logits = self.net.forward(np.asarray(states, dtype=float))
        return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"LAQN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, networks: dict[str, MLP], flags: dict[str, bool] | None = None):
    """Write named networks: header, then row-major little-endian float64 weights.

    Layout: magic, u32 version, u32 count; per network: u16 name length, name,
    u8 flags, u32 layer count + 1, u32 dims, then W0, b0, W1, b1, ...
    """
    flags = flags or {}
    parts = [MAGIC, struct.pack("<II", VERSION, len(networks))]
    for name, net in networks.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", 1 if flags.get(name, True) else 0))
        parts.append(struct.pack("<I", len(net.dims)) + struct.pack(f"<{len(net.dims)}I", *net.dims))
        for p in net.params:
            parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, MLP], dict[str, bool]]:
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None


def _parse_checkpoint(data: bytes, path) -> tuple[dict[str, MLP], dict[str, bool]]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    nets, flags = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (flag,) = struct.unpack_from("<B", data, off)
        off += 1
        (ndims,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{ndims}I", data, off)
        off += 4 * ndims
        net = MLP.__new__(MLP)
        net.dims = tuple(dims)
        net.weights, net.biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            n = fan_in * fan_out
            net.weights.append(np.frombuffer(data, "<f8", n, off).reshape(fan_in, fan_out).astype(float))
            off += 8 * n
            net.biases.append(np.frombuffer(data, "<f8", fan_out, off).astype(float))
            off += 8 * fan_out
        nets[name] = net
        flags[name] = bool(flag)
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return nets, flags
