"""Scenario runner, KPI aggregation, baseline comparison and latency probe."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .agent import AgentConfig, DirectiveError, LinkAdaptationAgent, Mode, parse_directive
from .learner import (CandidateRanker, DQNLearner, ReplayBuffer, epsilon_at, load_checkpoint,
                      q_network, ranker_network, save_checkpoint)
from .linksim import TTI_S, LinkConfig, LinkSimulator
from .olla import OllaController

logger = logging.getLogger(__name__)

KPI_WINDOW_S = 0.1
TTIS_PER_SAMPLE = round(KPI_WINDOW_S / TTI_S)  # 200
WARMUP_SAMPLES = 10
DEFAULT_CHECKPOINT = Path(__file__).parent / "data" / "agent.laqn"
TRAIN_UPDATES_PER_STEP = 4  # gradient steps per simulated TTI
KPI_COLUMNS = ("sample_idx", "t_ms", "dl_tpt_mbps", "bler", "mcs_mean", "rank_mean", "mode")


class InvalidScenario(ValueError):
    pass


class CheckpointMissing(FileNotFoundError):
    pass


class LengthMismatch(ValueError):
    pass


class NoSamples(ValueError):
    pass


# ---------------------------------------------------------------- scenarios

@dataclass
class Segment:
    start_s: float
    end_s: float
    mean_sinr_db: float


@dataclass
class Scenario:
    name: str
    seed: int = 0
    duration_s: float = 300.0
    controller: str = "agent"
    mean_sinr_db: float = 27.0
    correlation: float = 0.98
    volatility_db: float = 3.0
    impairment_db: float = -2.0
    data_res_per_tti: int = 39312
    events: list = field(default_factory=list)  # [(t_ms, directive)]
    sinr_profile: list = field(default_factory=list)  # [Segment]

    def __post_init__(self):
        if not self.duration_s > 0:
            raise InvalidScenario(f"{self.name}: duration must be positive")
        if self.controller not in ("olla", "agent"):
            raise InvalidScenario(f"{self.name}: unknown controller {self.controller!r}")
        times = [t for t, _ in self.events]
        if times != sorted(times):
            raise InvalidScenario(f"{self.name}: events must be sorted by time")
        for seg in self.sinr_profile:
            if not 0 <= seg.start_s < seg.end_s:
                raise InvalidScenario(f"{self.name}: bad profile segment {seg}")

    @property
    def n_ttis(self) -> int:
        return round(self.duration_s / TTI_S)

    def link_config(self) -> LinkConfig:
        return LinkConfig(mean_sinr_db=self.mean_sinr_db, correlation=self.correlation,
                          volatility_db=self.volatility_db, impairment_offset_db=self.impairment_db,
                          data_res_per_tti=self.data_res_per_tti)

    def mean_changes(self) -> dict[int, float]:
        """TTI → new process mean, for every profile boundary."""
        changes = {}
        for seg in sorted(self.sinr_profile, key=lambda s: s.start_s):
            changes[round(seg.start_s / TTI_S)] = seg.mean_sinr_db
            changes.setdefault(round(seg.end_s / TTI_S), self.mean_sinr_db)
        return changes

    def with_(self, **kw) -> Scenario:
        d = {**self.__dict__, **kw}
        return Scenario(**d)

    @classmethod
    def from_dict(cls, data: dict) -> Scenario:
        if not isinstance(data, dict) or "name" not in data:
            raise InvalidScenario("scenario needs a mapping with a name")
        ch = data.get("channel", {}) or {}
        grid = data.get("grid", {}) or {}
        try:
            events = [(float(e["t_ms"]), str(e["directive"])) for e in data.get("events", []) or []]
            profile = [Segment(float(s["start_s"]), float(s["end_s"]), float(s["mean_sinr_db"]))
                       for s in data.get("sinr_profile", []) or []]
            return cls(name=str(data["name"]), seed=int(data.get("seed", 0)),
                       duration_s=float(data.get("duration_s", 300.0)),
                       controller=str(data.get("controller", "agent")),
                       mean_sinr_db=float(ch.get("mean_sinr_db", 27.0)),
                       correlation=float(ch.get("correlation", 0.98)),
                       volatility_db=float(ch.get("volatility_db", 3.0)),
                       impairment_db=float(ch.get("impairment_db", -2.0)),
                       data_res_per_tti=int(grid.get("data_res_per_tti", 39312)),
                       events=events, sinr_profile=profile)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidScenario):
                raise
            raise InvalidScenario(f"malformed scenario: {exc}") from exc

    @classmethod
    def load(cls, path) -> Scenario:
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise InvalidScenario(f"{path}: {exc}") from exc
        return cls.from_dict(data)


# ---------------------------------------------------------------- runs

@dataclass(frozen=True)
class KpiSample:
    sample_idx: int
    t_ms: float
    dl_tpt_mbps: float
    bler: float
    mcs_mean: float
    rank_mean: float
    mode: str


@dataclass
class Trace:
    """Per-TTI record of a run."""
    ack: np.ndarray
    delivered_bits: np.ndarray
    mcs: np.ndarray
    rank: np.ndarray
    urllc: np.ndarray


@dataclass
class RunResult:
    scenario: Scenario
    samples: list
    trace: Trace
    timings_ns: np.ndarray
    meta_goals: list = field(default_factory=list)

    @property
    def summary(self) -> dict:
        tpt = [s.dl_tpt_mbps for s in self.samples]
        bl = [s.bler for s in self.samples]
        out = {"scenario": self.scenario.name, "seed": self.scenario.seed,
               "controller": self.scenario.controller, "samples": len(self.samples),
               "mean_tpt_mbps": float(np.mean(tpt)), "mean_bler": float(np.mean(bl)),
               "total_delivered_bits": int(self.trace.delivered_bits.sum())}
        if self.timings_ns.size:
            p50, p99 = latency_probe(self)
            out.update(latency_p50_ms=p50, latency_p99_ms=p99)
        return out

    def kpi_csv(self) -> str:
        return kpi_csv(self.samples)


def load_agent(checkpoint=None, config: AgentConfig | None = None) -> LinkAdaptationAgent:
    path = Path(checkpoint) if checkpoint else DEFAULT_CHECKPOINT
    if not path.is_file():
        raise CheckpointMissing(f"checkpoint not found: {path}")
    nets, flags = load_checkpoint(path)
    ranker = CandidateRanker(nets["ranker"], flags.get("ranker", False)) if "ranker" in nets else None
    return LinkAdaptationAgent(nets["qnet"], ranker, config=config)


def run_scenario(scenario: Scenario, checkpoint=None, timing: bool = True,
                 agent: LinkAdaptationAgent | None = None) -> RunResult:
    """Drive one controller through the scenario; one KPI sample per 100 ms."""
    n = scenario.n_ttis
    sim = LinkSimulator(scenario.link_config(), scenario.seed)
    changes = scenario.mean_changes()
    events = [(math.ceil(t_ms * 1e-3 / TTI_S - 1e-9), d) for t_ms, d in scenario.events]
    use_agent = scenario.controller == "agent"
    if use_agent and agent is None:
        agent = load_agent(checkpoint)
    olla = None if use_agent else OllaController()
    ack = np.zeros(n, dtype=bool)
    bits = np.zeros(n, dtype=np.int64)
    mcs = np.zeros(n, dtype=np.int16)
    rank = np.zeros(n, dtype=np.int8)
    urllc = np.zeros(n, dtype=bool)
    timings = np.zeros(n if (use_agent and timing) else 0, dtype=np.int64)
    goals = []
    ev = 0
    olla_urllc = False
    for t in range(n):
        if t in changes:
            sim.set_mean(changes[t])
        due = []
        while ev < len(events) and events[ev][0] <= t:
            due.append(events[ev][1])
            ev += 1
        obs = sim.observe()
        if use_agent:
            res = agent.step(obs, due)
            action = res.action
            goals.extend(res.meta_goals)
            if timing:
                timings[t] = agent.last_reactive_ns
            urllc[t] = agent.mode is Mode.URLLC
        else:
            for text in due:
                try:
                    d = parse_directive(text)
                except DirectiveError as exc:
                    logger.warning("skipping directive: %s", exc)
                    continue
                if d.verb == "mode":
                    olla_urllc = d.arg is Mode.URLLC
                    olla.set_target(d.arg.bler_target)
            action = olla.decide(obs)
            urllc[t] = olla_urllc
        out = sim.transmit(action)
        ack[t] = out.ack
        bits[t] = out.delivered_bits
        mcs[t] = action.mcs_index
        rank[t] = action.rank
    trace = Trace(ack, bits, mcs, rank, urllc)
    return RunResult(scenario, kpi_samples(trace), trace, timings, goals)


def kpi_samples(trace: Trace, per_sample: int = TTIS_PER_SAMPLE) -> list[KpiSample]:
    n = len(trace.ack) // per_sample
    m = n * per_sample
    shape = (n, per_sample)
    bits = trace.delivered_bits[:m].reshape(shape).sum(axis=1)
    nacks = (~trace.ack[:m]).reshape(shape).sum(axis=1)
    mcs = trace.mcs[:m].reshape(shape).mean(axis=1)
    rank = trace.rank[:m].reshape(shape).mean(axis=1)
    urllc = trace.urllc[:m].reshape(shape)[:, -1]
    window_s = per_sample * TTI_S
    return [KpiSample(i, round((i + 1) * window_s * 1e3, 6), bits[i] / window_s / 1e6, nacks[i] / per_sample,
                      float(mcs[i]), float(rank[i]), "urllc" if urllc[i] else "embb")
            for i in range(n)]


def kpi_csv(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(KPI_COLUMNS)
    for s in samples:
        w.writerow([s.sample_idx, f"{s.t_ms:.1f}", f"{s.dl_tpt_mbps:.6f}", f"{s.bler:.6f}",
                    f"{s.mcs_mean:.4f}", f"{s.rank_mean:.4f}", s.mode])
    return buf.getvalue()


def read_kpi_csv(path) -> list[KpiSample]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [KpiSample(int(r["sample_idx"]), float(r["t_ms"]), float(r["dl_tpt_mbps"]),
                      float(r["bler"]), float(r["mcs_mean"]), float(r["rank_mean"]), r["mode"])
            for r in rows]


def write_run(result: RunResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{result.scenario.name}_{result.scenario.controller}_s{result.scenario.seed}"
    csv_path = out / f"{stem}.csv"
    json_path = out / f"{stem}.json"
    csv_path.write_text(result.kpi_csv())
    json_path.write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------- analysis

def _means(run) -> tuple[int, float, float]:
    samples = run.samples if isinstance(run, RunResult) else list(run)
    if not samples:
        raise NoSamples("run has no KPI samples")
    return (len(samples), float(np.mean([s.dl_tpt_mbps for s in samples])),
            float(np.mean([s.bler for s in samples])))


def compare(run_a, run_b) -> dict:
    """A relative to B: throughput gain and BLER reduction in percent."""
    na, tpt_a, bler_a = _means(run_a)
    nb, tpt_b, bler_b = _means(run_b)
    if na != nb:
        raise LengthMismatch(f"runs have {na} and {nb} samples")
    return {"samples": na, "tpt_a_mbps": tpt_a, "tpt_b_mbps": tpt_b,
            "tpt_delta_mbps": tpt_a - tpt_b,
            "tpt_gain_pct": 100.0 * (tpt_a - tpt_b) / tpt_b if tpt_b else 0.0,
            "bler_a": bler_a, "bler_b": bler_b, "bler_delta": bler_a - bler_b,
            "bler_reduction_pct": 100.0 * (bler_b - bler_a) / bler_b if bler_b else 0.0}


def latency_probe(run) -> tuple[float, float]:
    """p50 and p99 of reactive-cycle wall-clock time, in milliseconds."""
    t = run.timings_ns if isinstance(run, RunResult) else np.asarray(run)
    if t.size == 0:
        raise NoSamples("no reactive-cycle timings recorded")
    p50, p99 = np.percentile(t, [50, 99]) / 1e6
    return float(p50), float(p99)


def windowed_bler_series(ack: np.ndarray, window: int = 100) -> np.ndarray:
    """BLER over the ``window`` TBs before each TTI (the value a decision at t sees)."""
    nack = np.concatenate(([0], np.cumsum(~ack)))
    t = np.arange(len(ack))
    lo = np.maximum(0, t - window)
    n = t - lo
    out = np.zeros(len(ack))
    ok = n > 0
    out[ok] = (nack[t[ok]] - nack[lo[ok]]) / n[ok]
    return out


def convergence_ttis(ack: np.ndarray, event_tti: int, target: float, horizon: int = 20_000,
                     window: int = 100) -> int:
    """TTIs after ``event_tti`` until windowed BLER settles into [0.5, 2] x target.

    Settling is the first in-band TTI after the last excursion above 2 x target
    inside the horizon. Returns ``horizon`` if it never settles.
    """
    seg = ack[max(0, event_tti - window):event_tti + horizon]
    wb = windowed_bler_series(seg, window)[min(window, event_tti):]
    over = np.flatnonzero(wb > 2.0 * target)
    start = over[-1] + 1 if over.size else 0
    band = np.flatnonzero((wb[start:] >= 0.5 * target) & (wb[start:] <= 2.0 * target))
    return int(start + band[0]) if band.size else horizon


def urllc_violations(trace: Trace, window: int = 100) -> dict:
    """Count breaches of the URLLC rank and forced-decrement invariants."""
    wb = windowed_bler_series(trace.ack, window)
    u = trace.urllc
    rank_bad = int(np.sum(u & (trace.rank != 1)))
    prev = trace.mcs[:-1].astype(int)
    nxt = trace.mcs[1:].astype(int)
    need = u[1:] & (wb[1:] > 0.001) & (prev > 0)
    dec_bad = int(np.sum(need & (nxt >= prev)))
    return {"rank": rank_bad, "decrement": dec_bad}


# ---------------------------------------------------------------- training

@dataclass
class TrainReport:
    steps: int
    updates: int
    losses: list
    ranker_accuracy: float


def train(scenario: Scenario, steps: int = 200_000, out=None, seed: int = 0,
          warmup: int = 1000, ranker_epochs: int = 10, log_every: int = 20_000,
          updates_per_step: int = TRAIN_UPDATES_PER_STEP, learner_kwargs: dict | None = None) -> TrainReport:
    """DQN training on repeated episodes of ``scenario``; then imitation for the ranker."""
    qnet = q_network(seed)
    learner = DQNLearner(qnet, **(learner_kwargs or {}))
    buffer = ReplayBuffer(10_000, seed=seed)
    losses = []
    chosen = []
    done_steps = 0
    episode = 0
    while done_steps < steps:
        ep = scenario.with_(seed=scenario.seed + 1000 * seed + episode, controller="agent")
        agent = LinkAdaptationAgent(qnet, config=AgentConfig(), seed=seed + episode)
        agent.transition_sink = buffer.push
        agent.chosen_log = chosen
        budget = min(ep.n_ttis, steps - done_steps)
        sim = LinkSimulator(ep.link_config(), ep.seed)
        changes = ep.mean_changes()
        events = [(math.ceil(t * 1e-3 / TTI_S - 1e-9), d) for t, d in ep.events]
        ev = 0
        for t in range(budget):
            if t in changes:
                sim.set_mean(changes[t])
            due = []
            while ev < len(events) and events[ev][0] <= t:
                due.append(events[ev][1])
                ev += 1
            agent.explore_epsilon = epsilon_at(done_steps)
            action = agent.step(sim.observe(), due).action
            sim.transmit(action)
            done_steps += 1
            if len(buffer) >= warmup:
                for _ in range(updates_per_step):
                    losses.append(learner.q_update(buffer.sample(learner.batch_size)))
            if log_every and done_steps % log_every == 0:
                recent = losses[-1000:]
                q_mag = float(np.abs(qnet.forward(buffer.s[:len(buffer)])).max()) if len(buffer) else 0.0
                logger.info("step %d loss %.5f max|Q| %.2f", done_steps,
                            float(np.mean(recent)) if recent else 0.0, q_mag)
        episode += 1
    # imitation: greedy choices from the final quarter of training
    tail = chosen[len(chosen) * 3 // 4:]
    ranker = CandidateRanker(ranker_network(seed))
    acc = 0.0
    if tail:
        states = np.stack([s for s, _ in tail])
        labels = np.array([a for _, a in tail])
        ranker.fit(states, labels, epochs=ranker_epochs, seed=seed)
        acc = ranker.accuracy(states, labels)
    if out is not None:
        save_checkpoint(out, {"qnet": qnet, "ranker": ranker.net},
                        {"qnet": True, "ranker": ranker.trained})
    return TrainReport(done_steps, learner.updates, losses, acc)

