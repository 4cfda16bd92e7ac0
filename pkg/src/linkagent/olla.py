"""Outer loop link adaptation baseline."""

from __future__ import annotations

import bisect
import dataclasses
import math
from dataclasses import dataclass

from .linksim import (BLER_SLOPE_DB, MCS_TABLE, RANK_PENALTY_DB, LinkAction, Observation,
                      cqi_to_sinr)


@dataclass(frozen=True)
class OllaState:
    offset_db: float = 0.0
    step_up_db: float = 0.5
    step_down_db: float = 0.5 * 0.1 / 0.9
    bler_target: float = 0.1
    offset_min_db: float = -10.0
    offset_max_db: float = 10.0

    @classmethod
    def create(cls, bler_target: float = 0.1, step_up_db: float = 0.5, offset_db: float = 0.0,
               offset_min_db: float = -10.0, offset_max_db: float = 10.0) -> OllaState:
        return cls(offset_db, step_up_db, step_down_for(step_up_db, bler_target), bler_target,
                   offset_min_db, offset_max_db)

    def retarget(self, bler_target: float) -> OllaState:
        return dataclasses.replace(self, bler_target=bler_target,
                                   step_down_db=step_down_for(self.step_up_db, bler_target))


def step_down_for(step_up_db: float, bler_target: float) -> float:
    """Step that makes the expected offset drift zero at the target BLER."""
    return step_up_db * bler_target / (1.0 - bler_target)


def outer_loop_update(state: OllaState, ack: bool) -> OllaState:
    offset = state.offset_db - state.step_down_db if ack else state.offset_db + state.step_up_db
    offset = min(state.offset_max_db, max(state.offset_min_db, offset))
    return dataclasses.replace(state, offset_db=offset)


def inner_loop_select(cqi_sinr_db: float, offset_db: float, table=MCS_TABLE,
                      bler_target: float = 0.1, slope_db: float = BLER_SLOPE_DB,
                      thresholds=None) -> int:
    """Highest MCS whose ideal-table BLER at ``cqi_sinr_db - offset_db`` meets the target.

    The logistic curve is inverted once, so the test reduces to
    ``threshold <= sinr - slope * ln(1/target - 1)``. Falls back to index 0.
    """
    if thresholds is None:
        thresholds = [e.sinr_threshold_db for e in table]
    limit = cqi_sinr_db - offset_db - slope_db * math.log(1.0 / bler_target - 1.0)
    return max(0, bisect.bisect_right(thresholds, limit) - 1)


class OllaController:
    """CQI lookup plus ACK/NACK driven offset, with throughput-greedy rank choice.

    Rank is chosen by comparing ``rank * SE`` of the inner-loop pick at each
    rank's per-layer SINR; ties keep rank 1, and a higher rank whose pick is
    only the index-0 fallback is skipped.
    """

    def __init__(self, bler_target: float = 0.1, step_up_db: float = 0.5,
                 offset_min_db: float = -10.0, offset_max_db: float = 10.0,
                 rank_penalty_db: dict | None = None, slope_db: float = BLER_SLOPE_DB,
                 ranks=(1, 2)):
        self.state = OllaState.create(bler_target, step_up_db, 0.0, offset_min_db, offset_max_db)
        self.rank_penalty_db = dict(RANK_PENALTY_DB if rank_penalty_db is None else rank_penalty_db)
        self.slope_db = slope_db
        self.ranks = tuple(ranks)
        self._thresholds = [e.sinr_threshold_db for e in MCS_TABLE]

    @property
    def offset_db(self) -> float:
        return self.state.offset_db

    def set_target(self, bler_target: float):
        if bler_target != self.state.bler_target:
            self.state = self.state.retarget(bler_target)

    def update(self, ack: bool):
        self.state = outer_loop_update(self.state, ack)

    def select(self, cqi: int, ranks=None) -> LinkAction:
        sinr = cqi_to_sinr(cqi)
        best = None
        for rank in ranks or self.ranks:
            idx = inner_loop_select(sinr - self.rank_penalty_db[rank], self.state.offset_db,
                                    MCS_TABLE, self.state.bler_target, self.slope_db,
                                    self._thresholds)
            limit = sinr - self.rank_penalty_db[rank] - self.state.offset_db \
                - self.slope_db * math.log(1.0 / self.state.bler_target - 1.0)
            if best is not None and self._thresholds[idx] > limit:
                continue  # floor fallback that misses the target: not a real option
            value = rank * MCS_TABLE[idx].spectral_efficiency
            if best is None or value > best[0]:
                best = (value, idx, rank)
        return LinkAction(best[1], best[2])

    def decide(self, obs: Observation) -> LinkAction:
        if obs.tti > 0:
            self.update(obs.ack_history_bit)
        return self.select(obs.cqi)
