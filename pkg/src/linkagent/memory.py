"""Long-term memory: episodic store with exact k-NN recall, and the rule base."""

from __future__ import annotations

import ast
import logging
import operator
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .linksim import LinkAction

logger = logging.getLogger(__name__)

STATE_DIM = 16


@dataclass(frozen=True)
class EpisodeRecord:
    state_vector: np.ndarray
    action: LinkAction
    outcome_reward: float
    windowed_bler_after: float
    timestamp_tti: int

    def __post_init__(self):
        v = np.asarray(self.state_vector, dtype=float)
        if v.shape != (STATE_DIM,):
            raise ValueError(f"state vector must have length {STATE_DIM}, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("state vector has non-finite features")
        object.__setattr__(self, "state_vector", v)


class EpisodicStore:
    """Bounded experience store with exact nearest-neighbour retrieval.

    Distances are Euclidean on z-scored features. The z-score statistics are
    a snapshot refreshed every ``restandardize_every`` inserts; between
    refreshes every query uses the same snapshot, so results are exact with
    respect to :attr:`scaler`. Ties are broken newest first.
    """

    def __init__(self, capacity: int = 100_000, dim: int = STATE_DIM,
                 restandardize_every: int = 1000):
        self.capacity = capacity
        self.dim = dim
        self.restandardize_every = restandardize_every
        self._raw = np.zeros((capacity, dim))
        self._z = np.zeros((capacity, dim))
        self._sq = np.zeros(capacity)
        self._seq = np.zeros(capacity, dtype=np.int64)
        self._records: list[EpisodeRecord | None] = [None] * capacity
        self._count = 0  # total inserts ever
        self._mean = np.zeros(dim)
        self._std = np.ones(dim)
        self._since_scale = None  # None: no snapshot yet

    def __len__(self):
        return min(self._count, self.capacity)

    @property
    def scaler(self) -> tuple[np.ndarray, np.ndarray]:
        self._ensure_scale()
        return self._mean.copy(), self._std.copy()

    def store(self, record: EpisodeRecord):
        slot = self._count % self.capacity
        self._raw[slot] = record.state_vector
        self._records[slot] = record
        self._seq[slot] = self._count
        self._count += 1
        if self._since_scale is not None:
            self._since_scale += 1
            z = (record.state_vector - self._mean) / self._std
            self._z[slot] = z
            self._sq[slot] = z @ z

    def restandardize(self):
        n = len(self)
        raw = self._raw[:n]
        self._mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        self._std = np.where(std > 1e-9, std, 1.0)
        z = (raw - self._mean) / self._std
        self._z[:n] = z
        self._sq[:n] = np.einsum("ij,ij->i", z, z)
        self._since_scale = 0

    def _ensure_scale(self):
        if len(self) and (self._since_scale is None or self._since_scale >= self.restandardize_every):
            self.restandardize()

    def retrieve_similar(self, state_vector, k: int = 8) -> list[tuple[EpisodeRecord, float]]:
        """Up to ``k`` (record, distance) pairs, nearest first."""
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self)
        if n == 0:
            return []
        self._ensure_scale()
        q = (np.asarray(state_vector, dtype=float) - self._mean) / self._std
        d2 = self._sq[:n] - 2.0 * (self._z[:n] @ q) + q @ q
        np.maximum(d2, 0.0, out=d2)
        if n > k:
            part = np.argpartition(d2, k - 1)[:k]
            kth = d2[part].max()
            # every slot tied with the k-th distance competes on recency
            pool = np.flatnonzero(d2 <= kth)
        else:
            pool = np.arange(n)
        order = np.lexsort((-self._seq[pool], d2[pool]))[:k]
        idx = pool[order]
        return [(self._records[i], float(np.sqrt(d2[i]))) for i in idx]

    def brute_force(self, state_vector, k: int = 8) -> list[tuple[EpisodeRecord, float]]:
        """Reference scan: recompute every distance from raw features."""
        mean, std = self.scaler
        q = (np.asarray(state_vector, dtype=float) - mean) / std
        rows = []
        for i in range(len(self)):
            rec = self._records[i]
            z = (rec.state_vector - mean) / std
            rows.append((float(np.sqrt(np.sum((z - q) ** 2))), -int(self._seq[i]), i))
        rows.sort()
        return [(self._records[i], d) for d, _, i in rows[:k]]


# ---------------------------------------------------------------- rules

EFFECT_KINDS = ("force_mode", "cap_mcs", "force_mcs_decrement", "force_rank", "veto_goal")


@dataclass(frozen=True)
class Effect:
    kind: str
    value: object = None
    rule_id: str = ""

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise ValueError(f"unknown effect {self.kind!r}")


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv}
_CMPOPS = {ast.Gt: operator.gt, ast.GtE: operator.ge, ast.Lt: operator.lt, ast.LtE: operator.le,
           ast.Eq: operator.eq, ast.NotEq: operator.ne}


class GuardExpression:
    """Tiny expression language over named situation fields.

    Supports literals, names, ``and``/``or``/``not``, comparisons and
    arithmetic. Anything else (calls, attributes, subscripts) is rejected at
    parse time, so the compiled code only ever reads the context mapping.
    """

    def __init__(self, source: str):
        self.source = source
        tree = ast.parse(source, mode="eval")
        self._check(tree.body)
        self._code = compile(tree, f"<guard {source}>", "eval")

    def _check(self, node):
        allowed = (ast.BoolOp, ast.And, ast.Or, ast.UnaryOp, ast.Not, ast.USub, ast.Compare,
                   ast.BinOp, ast.Name, ast.Constant, ast.Load) + tuple(_BINOPS) + tuple(_CMPOPS)
        for sub in ast.walk(node):
            if not isinstance(sub, allowed):
                raise ValueError(f"unsupported syntax in guard {self.source!r}: {type(sub).__name__}")

    def __call__(self, ctx: dict):
        try:
            return eval(self._code, {"__builtins__": {}}, ctx)
        except NameError as exc:
            raise NameError(f"{exc} in guard {self.source!r}") from None


@dataclass(frozen=True)
class Rule:
    id: str
    guard: Callable[[dict], bool]
    effect: str
    priority: int
    value: object = None  # literal, or GuardExpression evaluated when the rule fires

    def fire(self, ctx: dict) -> Effect | None:
        if not self.guard(ctx):
            return None
        val = self.value
        if isinstance(val, GuardExpression):
            val = int(val(ctx))
        return Effect(self.effect, val, self.id)


def rule_context(summary, mode: str, proposed: LinkAction, current: LinkAction | None = None) -> dict:
    current = current or proposed
    return {
        "mode": mode,
        "urllc": mode == "urllc",
        "embb": mode == "embb",
        "windowed_bler": summary.windowed_bler,
        "vulnerability": summary.vulnerability,
        "filtered_sinr": summary.filtered_sinr_db,
        "trend": summary.sinr_trend_db_per_tti,
        "max_forecast": max(summary.bler_forecast),
        "direction": summary.suggested_direction,
        "proposed_mcs": proposed.mcs_index,
        "proposed_rank": proposed.rank,
        "current_mcs": current.mcs_index,
        "current_rank": current.rank,
    }


class RuleBase:
    """Immutable, totally ordered rule set; evaluation order is (priority, id)."""

    def __init__(self, rules):
        rules = list(rules)
        ids = [r.id for r in rules]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate rule ids")
        self.rules = tuple(sorted(rules, key=lambda r: (r.priority, r.id)))

    def __len__(self):
        return len(self.rules)

    def evaluate(self, summary, mode: str, proposed: LinkAction,
                 current: LinkAction | None = None) -> list[Effect]:
        ctx = rule_context(summary, mode, proposed, current)
        effects = []
        for rule in self.rules:
            eff = rule.fire(ctx)
            if eff is not None:
                effects.append(eff)
        return effects

    @classmethod
    def from_dicts(cls, entries) -> RuleBase:
        rules = []
        for e in entries:
            value = e.get("value")
            if isinstance(value, str) and e["effect"] in ("cap_mcs", "force_rank"):
                value = GuardExpression(value)
            rules.append(Rule(str(e["id"]), GuardExpression(str(e["guard"])), e["effect"],
                              int(e["priority"]), value))
        return cls(rules)

    @classmethod
    def load(cls, path) -> RuleBase:
        data = yaml.safe_load(Path(path).read_text())
        return cls.from_dicts(data["rules"] if isinstance(data, dict) else data)


DEFAULT_RULES = [
    {"id": "R1", "priority": 0, "guard": "urllc and windowed_bler > 0.001",
     "effect": "force_mcs_decrement"},
    {"id": "R2", "priority": 1, "guard": "urllc", "effect": "force_rank", "value": 1},
    {"id": "R3", "priority": 2, "guard": "embb and windowed_bler > 0.10",
     "effect": "cap_mcs", "value": "current_mcs - 1"},
    {"id": "R4", "priority": 3, "guard": "vulnerability", "effect": "veto_goal", "value": "raise"},
]


def default_rules() -> RuleBase:
    return RuleBase.from_dicts(DEFAULT_RULES)


def evaluate_rules(summary, mode: str, proposed: LinkAction, current: LinkAction | None = None,
                   rules: RuleBase | None = None) -> list[Effect]:
    return (rules or default_rules()).evaluate(summary, mode, proposed, current)
