"""Link adaptation agent: workflow coordinator with reactive and proactive runtimes.

The coordinator drains the directive inbox at the start of every TTI, runs
the proactive runtime once per pending trigger (directive, threshold event,
periodic review) and then the reactive runtime exactly once, which emits the
TTI's :class:`LinkAction`.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .learner import (DELTAS, MLP, CandidateRanker, Transition, action_id, encode_state, rank_anchor,
                      reward)
from .linksim import (BLER_SLOPE_DB, CQI_STEP_DB, FEEDBACK_DELAY, MAX_MCS, MCS_TABLE, RANK_PENALTY_DB,
                      THRESHOLDS_DB, LinkAction, Observation, TransmissionOutcome, cqi_to_sinr, tbs_bits)
from .memory import EpisodeRecord, EpisodicStore, RuleBase, default_rules
from .olla import OllaController
from .situation import (HISTORY_TTIS, ARForecaster, KalmanState, SignalWindow, SituationSummary,
                        cold_summary, kalman_update, summarize)

logger = logging.getLogger(__name__)

CQI_QUANT_VAR = CQI_STEP_DB ** 2 / 12.0
_GH_X, _GH_W = np.polynomial.hermite.hermgauss(9)
_GH_X = _GH_X * math.sqrt(2.0)
_GH_W = _GH_W / math.sqrt(math.pi)


class Mode(Enum):
    EMBB = "embb"
    URLLC = "urllc"

    @property
    def bler_target(self) -> float:
        return 0.10 if self is Mode.EMBB else 0.001

    @property
    def objective(self) -> str:
        return "max_throughput" if self is Mode.EMBB else "min_latency"


ORIGINS = ("directive", "event_trigger", "periodic_review")


@dataclass(frozen=True)
class MetaGoal:
    mode: Mode
    objective: str
    bler_bound: float
    origin: str
    feasible: bool = True
    recommended_action: LinkAction | None = None

    def __post_init__(self):
        if self.objective != self.mode.objective or self.bler_bound != self.mode.bler_target:
            raise ValueError(f"meta-goal {self.objective}/{self.bler_bound} inconsistent with {self.mode}")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")

    @classmethod
    def for_mode(cls, mode: Mode, origin: str, **kw) -> MetaGoal:
        return cls(mode, mode.objective, mode.bler_target, origin, **kw)


@dataclass(frozen=True)
class TechnicalGoal:
    kind: str
    delta: int
    resulting_action: LinkAction
    score: float = 0.0


def goal_kind(current: LinkAction, result: LinkAction) -> str:
    if result.rank != current.rank:
        return "adjust_rank"
    if MCS_TABLE[result.mcs_index].modulation_order != MCS_TABLE[current.mcs_index].modulation_order:
        return "adjust_modulation"
    return "adjust_code_rate"


def make_goal(current: LinkAction, result: LinkAction, score: float = 0.0) -> TechnicalGoal:
    return TechnicalGoal(goal_kind(current, result), result.mcs_index - current.mcs_index, result, score)


# ---------------------------------------------------------------- directives

class DirectiveError(ValueError):
    pass


@dataclass(frozen=True)
class Directive:
    verb: str
    arg: object = None


def parse_directive(text: str) -> Directive:
    """Parse ``mode embb|urllc``, ``bler_bound <p>``, ``pause`` or ``resume``."""
    words = str(text).strip().lower().split()
    if not words:
        raise DirectiveError("empty directive")
    verb, args = words[0], words[1:]
    if verb in ("pause", "resume") and not args:
        return Directive(verb)
    if verb == "mode" and len(args) == 1 and args[0] in ("embb", "urllc"):
        return Directive("mode", Mode(args[0]))
    if verb == "bler_bound" and len(args) == 1:
        try:
            p = float(args[0])
        except ValueError:
            raise DirectiveError(f"bler_bound needs a number, got {args[0]!r}") from None
        for mode in Mode:
            if math.isclose(p, mode.bler_target, rel_tol=1e-9):
                return Directive("mode", mode)
        raise DirectiveError(f"bler_bound {p} matches no service mode (0.1 or 0.001)")
    raise DirectiveError(f"unrecognised directive {text!r}")


# ---------------------------------------------------------------- candidates

def generate_candidates(summary: SituationSummary | None, mode: Mode, current: LinkAction,
                        neighbors=(), state: np.ndarray | None = None,
                        ranker: CandidateRanker | None = None, cap: int = 12) -> list[TechnicalGoal]:
    """Δmcs × rank grid around ``current`` plus neighbour actions, ranker-ordered.

    For the other rank the Δmcs steps start from :func:`~.learner.rank_anchor`, the MCS
    with the same link margin once the rank penalty is accounted for.
    """
    ranks = (1,) if mode is Mode.URLLC else (1, 2)
    anchors = {r: anchor_for(current, r) for r in ranks}
    actions = []
    seen = set()
    for d in DELTAS:
        for r in ranks:
            m = anchors[r] + d
            if 0 <= m <= MAX_MCS and (m, r) not in seen:
                seen.add((m, r))
                actions.append(LinkAction(m, r))
    for item in neighbors:
        rec = item[0] if isinstance(item, tuple) else item
        a = rec.action
        if a.rank in ranks and (a.mcs_index, a.rank) not in seen:
            seen.add((a.mcs_index, a.rank))
            actions.append(a)
    if ranker is not None and ranker.trained and state is not None:
        ids = [grid_id(current, a) for a in actions]
        actions = [actions[i] for i in ranker.rank_candidates(state, ids)]
    return [make_goal(current, a) for a in actions[:cap]]


def anchor_for(current: LinkAction, rank: int) -> int:
    return rank_anchor(current.mcs_index, current.rank, rank)


def grid_delta(current: LinkAction, action: LinkAction) -> int:
    return action.mcs_index - anchor_for(current, action.rank)


def grid_id(current: LinkAction, action: LinkAction) -> int:
    """Action id of ``action`` on the grid around ``current`` (Δ clipped to ±2)."""
    d = max(-2, min(2, grid_delta(current, action)))
    return action_id(d, action.rank)


def select_goal(candidates, q_values=None) -> TechnicalGoal:
    """Highest score wins; ties go to smaller |Δmcs|, then lower rank, then lower MCS.

    ``q_values`` (one per candidate) overrides the candidates' own scores.
    """
    if not candidates:
        raise EmptyCandidates("no candidate goals")
    scores = [g.score for g in candidates] if q_values is None else list(q_values)
    best = min(range(len(candidates)),
               key=lambda i: (-scores[i], abs(candidates[i].delta), candidates[i].resulting_action.rank,
                               candidates[i].resulting_action.mcs_index))
    g = candidates[best]
    return g if g.score == scores[best] else TechnicalGoal(g.kind, g.delta, g.resulting_action, scores[best])


class EmptyCandidates(ValueError):
    pass


def reconcile(goal: TechnicalGoal, summary: SituationSummary, mode: Mode, current: LinkAction,
              rules: RuleBase | None = None, effects=None) -> LinkAction:
    """Apply rule effects in priority order; never raises MCS above the proposal."""
    proposal = goal.resulting_action
    if effects is None:
        effects = (rules or default_rules()).evaluate(summary, mode.value, proposal, current)
    mcs, rank = proposal.mcs_index, proposal.rank
    for eff in effects:
        if eff.kind == "force_mcs_decrement":
            if mcs >= current.mcs_index:
                mcs = current.mcs_index - 1
        elif eff.kind == "force_rank":
            rank = int(eff.value)
        elif eff.kind == "cap_mcs":
            mcs = min(mcs, int(eff.value))
        elif eff.kind == "veto_goal" and eff.value == "raise":
            mcs = min(mcs, current.mcs_index)
    mcs = max(0, min(MAX_MCS, mcs, proposal.mcs_index))
    return LinkAction(mcs, rank)


# ---------------------------------------------------------------- agent

@dataclass
class AgentConfig:
    kalman_q: float = 0.01
    kalman_r: float = 1.0
    retrieve_k: int = 8
    memory_stride: int = 50
    forecast_refit_ttis: int = 10
    memory_capacity: int = 100_000
    periodic_review_ttis: int = 2000
    event_persistence_ttis: int = 500
    calibration_rate: dict = field(default_factory=lambda: {"embb": 0.02, "urllc": 0.5})
    olla_step_up_db: float = 0.5
    rank_penalty_db: dict = field(default_factory=lambda: dict(RANK_PENALTY_DB))
    use_memory: bool = True
    feedback_delay: int = FEEDBACK_DELAY
    uncertainty_aware: bool = True
    uncertainty_rate: float = 0.002
    # optional (mode, outcome, windowed_bler) -> float; replaces learner.reward when set
    reward_fn: object = None


@dataclass
class TickResult:
    invocations: list
    action: LinkAction
    meta_goals: list


@dataclass
class Experience:
    """A finished decision: what the learner and the episodic store need."""
    state: np.ndarray
    action_id: int
    reward: float
    next_state: np.ndarray | None


class LinkAdaptationAgent:
    def __init__(self, qnet: MLP, ranker: CandidateRanker | None = None,
                 rules: RuleBase | None = None, config: AgentConfig | None = None,
                 mode: Mode = Mode.EMBB, seed: int = 0):
        self.qnet = qnet
        self.ranker = ranker or CandidateRanker()
        self.rules = rules or default_rules()
        self.config = cfg = config or AgentConfig()
        self.mode = mode
        self.memory = EpisodicStore(cfg.memory_capacity)
        self.window = SignalWindow(HISTORY_TTIS)
        self.kalman: KalmanState | None = None
        self.olla = OllaController(mode.bler_target, cfg.olla_step_up_db,
                                   rank_penalty_db=cfg.rank_penalty_db)
        self.calibration_db = 0.0
        self._est_hist: deque[float] = deque(maxlen=cfg.feedback_delay)
        self._res_mean = 0.0
        self._res_var = CQI_QUANT_VAR
        self.forecaster = ARForecaster()
        self._fit_age = cfg.forecast_refit_ttis
        self.current = LinkAction(0, 1)
        self.inbox: deque[str] = deque()
        self.meta_goal = MetaGoal.for_mode(mode, "periodic_review")
        self.meta_goal_log: list[MetaGoal] = [self.meta_goal]
        self.paused = False
        self.ttis_since_switch = 0
        self.violation_run = 0
        self.tpt_reference = None
        self.summary: SituationSummary | None = None
        self.state: np.ndarray | None = None
        self.last_reactive_ns = 0
        self.explore_epsilon = 0.0
        self.rng = np.random.default_rng(seed)
        self._pending = None  # (state or None, action, aid)
        self._last_cqi = 0
        self.experience: Experience | None = None
        self.chosen_log: list[tuple[np.ndarray, int]] | None = None
        self.transition_sink = None  # callable(Transition) while training

    # ---- coordinator

    def submit(self, directive: str):
        self.inbox.append(directive)

    def coordinator_tick(self, now_tti: int, inbox=None) -> list[str]:
        """Drain directives and decide which runtimes run this TTI (in order)."""
        if inbox is not None:
            self.inbox.extend(inbox)
        triggers = []
        while self.inbox:
            text = self.inbox.popleft()
            try:
                triggers.append(("directive", parse_directive(text)))
            except DirectiveError as exc:
                logger.warning("DirectiveError at tti %d: %s", now_tti, exc)
        if self.violation_run >= self.config.event_persistence_ttis:
            triggers.append(("event_trigger", None))
            self.violation_run = 0
        if now_tti > 0 and now_tti % self.config.periodic_review_ttis == 0:
            triggers.append(("periodic_review", None))
        self._triggers = triggers
        return ["proactive"] * len(triggers) + ["reactive"]

    def step(self, obs: Observation, directives=()) -> TickResult:
        invocations = self.coordinator_tick(obs.tti, directives)
        goals = [self.proactive_cycle(origin, d) for origin, d in self._triggers]
        t0 = time.perf_counter_ns()
        action = self.reactive_cycle(obs)
        self.last_reactive_ns = time.perf_counter_ns() - t0
        return TickResult(invocations, action, goals)

    # ---- proactive runtime

    def proactive_cycle(self, origin: str, directive: Directive | None = None) -> MetaGoal:
        mode = self.mode
        if directive is not None:
            if directive.verb == "pause":
                self.paused = True
            elif directive.verb == "resume":
                self.paused = False
            elif directive.verb == "mode":
                mode = directive.arg
        deviation = self.deviation()
        if deviation["bler_excess"] > 0:
            logger.debug("bler %.4f above bound %.4f (%s)", deviation["windowed_bler"],
                         self.mode.bler_target, origin)
        feasible, alt = self.feasibility(mode)
        goal = MetaGoal.for_mode(mode, origin, feasible=feasible, recommended_action=alt)
        self._adopt(goal)
        return goal

    def deviation(self) -> dict:
        wb = self.window.windowed_bler if len(self.window) else 0.0
        tpt = self.window.mean_delivered_bits if len(self.window) else 0.0
        ref = self.tpt_reference if self.tpt_reference is not None else tpt
        return {"windowed_bler": wb, "bler_excess": wb - self.mode.bler_target,
                "tpt_bits": tpt, "tpt_shortfall": ref - tpt}

    def feasibility(self, mode: Mode):
        """Does any table action meet the mode's bound under the current forecast?

        When the Q-preferred action breaks the bound, the bound-satisfying
        action with the smallest Q gap to it is recommended instead; with no
        bound-satisfying action at all the goal is flagged infeasible and the
        most robust action is recommended.
        """
        if self.summary is None or self.state is None:
            return True, None
        ranks = (1,) if mode is Mode.URLLC else (1, 2)
        table_actions = [LinkAction(m, r) for m in range(MAX_MCS + 1) for r in ranks]
        worst_sinr = min(self.summary.sinr_forecast_db)
        p = self.bler_matrix(table_actions, [worst_sinr])[:, 0]
        ok = [a for a, pa in zip(table_actions, p) if pa <= mode.bler_target]
        if not ok:
            return False, LinkAction(0, 1)
        scores = self.score_actions(self.state, table_actions)
        best = table_actions[int(np.argmax(scores))]
        if best in ok:
            return True, best
        q_best = float(np.max(scores))
        by_action = dict(zip(table_actions, scores))
        return True, min(ok, key=lambda a: (abs(q_best - by_action[a]), a.mcs_index))

    def _adopt(self, goal: MetaGoal):
        if goal.mode is not self.mode:
            self.mode = goal.mode
            self.olla.set_target(goal.mode.bler_target)
            self.ttis_since_switch = 0
            self.violation_run = 0
        self.meta_goal = goal
        self.meta_goal_log.append(goal)

    # ---- reactive runtime

    def bler_matrix(self, actions, sinr_db) -> np.ndarray:
        """Calibrated BLER per (action, SINR level), averaged over estimation error.

        The error is taken as Gaussian with the tracked variance and the
        average is a Gauss-Hermite rule; without it, tail risk is badly
        understated at URLLC operating points.
        """
        pen = self.config.rank_penalty_db
        thr = np.array([THRESHOLDS_DB[a.mcs_index] + pen[a.rank] for a in actions]) - self.calibration_db
        sigma = math.sqrt(self.estimation_error_var) if self.config.uncertainty_aware else 0.0
        x = (np.asarray(sinr_db, dtype=float)[None, :, None] + sigma * _GH_X[None, None, :]
             - thr[:, None, None]) / BLER_SLOPE_DB
        p = 1.0 / (1.0 + np.exp(np.clip(x, -700.0, 700.0)))
        return p @ _GH_W

    def predicted_bler(self, action: LinkAction, filtered_sinr_db: float) -> float:
        return float(self.bler_matrix([action], [filtered_sinr_db])[0, 0])

    @property
    def estimation_error_var(self) -> float:
        """Variance of (later CQI - estimate used at decision time), less quantisation noise."""
        return max(0.0, self._res_var - CQI_QUANT_VAR)

    def _track_error(self, z: float):
        hist = self._est_hist
        if len(hist) == hist.maxlen:
            res = z - hist[0]
            rate = self.config.uncertainty_rate
            self._res_mean += rate * (res - self._res_mean)
            self._res_var += rate * ((res - self._res_mean) ** 2 - self._res_var)

    def _perceive(self, obs: Observation):
        cfg = self.config
        z = cqi_to_sinr(obs.cqi)
        self._last_cqi = obs.cqi
        if self.kalman is None:
            self.kalman = KalmanState(z, 1.0, cfg.kalman_q, cfg.kalman_r)
        else:
            self._track_error(z)
            self.kalman = kalman_update(self.kalman, z)
        self._est_hist.append(self.kalman.estimate_db)
        self.ttis_since_switch += 1
        if self._pending is None:
            return
        ack = obs.ack_history_bit
        prev_state, prev_action, prev_aid, prev_sinr = self._pending
        self.window.push(self.kalman.estimate_db, ack, obs.delivered_bits)
        self.olla.update(ack)
        # online logistic fit of the table-vs-channel mismatch
        p = self.predicted_bler(prev_action, prev_sinr)
        self.calibration_db += cfg.calibration_rate[self.mode.value] * (p - (0.0 if ack else 1.0))
        self.calibration_db = max(-15.0, min(15.0, self.calibration_db))
        wb = self.window.windowed_bler
        self.violation_run = self.violation_run + 1 if wb > self.mode.bler_target else 0
        bits = obs.delivered_bits
        self.tpt_reference = bits if self.tpt_reference is None else 0.999 * self.tpt_reference + 0.001 * bits
        if prev_state is not None:
            tbs = tbs_bits(MCS_TABLE[prev_action.mcs_index], prev_action.rank)
            out = TransmissionOutcome(obs.tti - 1, ack, tbs, bits, p, prev_action.mcs_index, prev_action.rank)
            r = (self.config.reward_fn or reward)(self.mode.value, out, wb)
            self.experience = Experience(prev_state, prev_aid, r, None)
            if self.config.use_memory and obs.tti % self.config.memory_stride == 0:
                self.memory.store(EpisodeRecord(prev_state, prev_action, r, wb, obs.tti - 1))

    def score_actions(self, state: np.ndarray, actions) -> np.ndarray:
        """Q-value per action; off-grid actions are scored as 'hold' from their own MCS."""
        q = self.qnet.forward(state)
        current = self.current
        scores = np.empty(len(actions))
        off = []
        for i, a in enumerate(actions):
            d = grid_delta(current, a)
            if -2 <= d <= 2:
                scores[i] = q[action_id(d, a.rank)]
            else:
                off.append(i)
        if off:
            shifted = np.repeat(state[None, :], len(off), axis=0)
            shifted[:, 9] = [actions[i].mcs_index / MAX_MCS for i in off]
            shifted[:, 10] = [actions[i].rank - 1 for i in off]
            q_off = self.qnet.forward(shifted)
            for row, i in enumerate(off):
                scores[i] = q_off[row, action_id(0, actions[i].rank)]
        return scores

    def reactive_cycle(self, obs: Observation) -> LinkAction:
        self._perceive(obs)
        mode = self.mode
        target = mode.bler_target
        ranks = (1,) if mode is Mode.URLLC else (1, 2)
        current = self.current
        if len(self.window) < HISTORY_TTIS or self.paused:
            summary = cold_summary(self.window, self.kalman, target)
            fallback = self.olla.select(obs.cqi, ranks)
            action = reconcile(make_goal(current, fallback), summary, mode, current, self.rules)
            self.summary = None
            self.state = None
            return self._commit(None, action, None)

        offset = self.calibration_db - self.config.rank_penalty_db[current.rank]
        series = self.window.sinr_estimates_db
        if self._fit_age >= self.config.forecast_refit_ttis:
            self.forecaster.fit(series)
            self._fit_age = 0
        self._fit_age += 1
        path = self.forecaster.predict(series)
        summary = summarize(self.window, self.kalman, target, current.mcs_index,
                            sinr_offset_db=offset, sinr_path=path)
        self.summary = summary
        state = encode_state(summary.filtered_sinr_db, summary.sinr_trend_db_per_tti, obs.cqi,
                             summary.windowed_bler, summary.bler_forecast, current.mcs_index,
                             current.rank, mode is Mode.URLLC, self.ttis_since_switch,
                             obs.ack_history_bit, self.olla.offset_db)
        self.state = state
        exp = self.experience
        if exp is not None and exp.next_state is None:
            exp.next_state = state
            if self.transition_sink is not None and exp.action_id is not None:
                self.transition_sink(Transition(exp.state, exp.action_id, exp.reward, state))
        neighbors = []
        if self.config.use_memory and len(self.memory):
            neighbors = self.memory.retrieve_similar(state, self.config.retrieve_k)
        candidates = generate_candidates(summary, mode, current, neighbors, state, self.ranker)
        actions = [g.resulting_action for g in candidates]
        scores = self.score_actions(state, actions)
        kept = self.validate(candidates, summary)
        if self.explore_epsilon and self.rng.random() < self.explore_epsilon:
            goal = candidates[int(self.rng.integers(len(candidates)))]
        else:
            goal = select_goal([candidates[i] for i in kept], [scores[i] for i in kept])
            if self.chosen_log is not None:
                self.chosen_log.append((state, grid_id(current, goal.resulting_action)))
        action = reconcile(goal, summary, mode, current, self.rules)
        aid = grid_id(current, action) if abs(grid_delta(current, action)) <= 2 else None
        return self._commit(state, action, aid)

    def validate(self, candidates, summary: SituationSummary) -> list[int]:
        """Indices of candidates the predictive model accepts.

        A candidate whose next-TTI forecast BLER breaks the bound is flagged and
        re-checked once against the whole horizon; it is dropped only if the
        horizon average still breaks the bound. If everything is dropped the
        candidate with the lowest horizon BLER is kept.
        """
        bound = self.meta_goal.bler_bound
        p = self.bler_matrix([g.resulting_action for g in candidates], summary.sinr_forecast_db)
        horizon = p.mean(axis=1)
        ok = (p[:, 0] <= bound) | (horizon <= bound)
        kept = np.flatnonzero(ok).tolist()
        return kept if kept else [int(np.argmin(horizon))]

    def _commit(self, state, action: LinkAction, aid):
        sinr = self.kalman.estimate_db
        self._pending = (state, action, aid, sinr)
        self.current = action
        return action
