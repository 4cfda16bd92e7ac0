"""Seeded link-level downlink simulator.

One instance models a single UE link: an AR(1) SINR process, the 64-QAM
MCS table, a logistic SINR-to-BLER curve, delayed and quantized CQI
reports, and per-TTI transport block accounting.
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

TTI_S = 0.5e-3
N_PRB = 273
DATA_RE_PER_PRB = 144
DATA_RES_PER_TTI = N_PRB * DATA_RE_PER_PRB  # 39312
BLER_SLOPE_DB = 0.5
IMPLEMENTATION_LOSS_DB = 2.0
FEEDBACK_DELAY = 4
CQI_OFFSET_DB = 8.0
CQI_STEP_DB = 2.4
CQI_MAX = 15
RANK_PENALTY_DB = {1: 0.0, 2: 3.0}


class InvalidAction(ValueError):
    """Raised when a link action falls outside the MCS table or rank set."""


class ColdStart(RuntimeError):
    """Raised when a history-dependent quantity is asked for too early."""


@dataclass(frozen=True)
class McsEntry:
    index: int
    modulation_order: int
    code_rate: float
    spectral_efficiency: float
    sinr_threshold_db: float


@dataclass(frozen=True)
class LinkAction:
    mcs_index: int
    rank: int = 1

    def __post_init__(self):
        if not 0 <= self.mcs_index < len(MCS_TABLE):
            raise InvalidAction(f"mcs index {self.mcs_index} outside 0..{len(MCS_TABLE) - 1}")
        if self.rank not in RANK_PENALTY_DB:
            raise InvalidAction(f"rank {self.rank} not in {{1, 2}}")


def shannon_gap_threshold(spectral_efficiency: float, loss_db: float = IMPLEMENTATION_LOSS_DB) -> float:
    return 10.0 * math.log10(2.0 ** spectral_efficiency - 1.0) + loss_db


# (Qm, R x 1024, spectral efficiency) from the 64-QAM PDSCH MCS table.
# Row 17 uses R = 439 instead of 438 so efficiency never decreases with index.
_MCS_ROWS = [
    (2, 120, 0.2344), (2, 157, 0.3066), (2, 193, 0.3770), (2, 251, 0.4902),
    (2, 308, 0.6016), (2, 379, 0.7402), (2, 449, 0.8770), (2, 526, 1.0273),
    (2, 602, 1.1758), (2, 679, 1.3262), (4, 340, 1.3281), (4, 378, 1.4766),
    (4, 434, 1.6953), (4, 490, 1.9141), (4, 553, 2.1602), (4, 616, 2.4063),
    (4, 658, 2.5703), (6, 439, 2.5723), (6, 466, 2.7305), (6, 517, 3.0293),
    (6, 567, 3.3223), (6, 616, 3.6094), (6, 666, 3.9023), (6, 719, 4.2129),
    (6, 772, 4.5234), (6, 822, 4.8164), (6, 873, 5.1152), (6, 910, 5.3320),
    (6, 948, 5.5547),
]


def build_mcs_table(loss_db: float = IMPLEMENTATION_LOSS_DB) -> tuple[McsEntry, ...]:
    return tuple(
        McsEntry(i, qm, r / 1024.0, se, shannon_gap_threshold(se, loss_db))
        for i, (qm, r, se) in enumerate(_MCS_ROWS)
    )


MCS_TABLE: tuple[McsEntry, ...] = build_mcs_table()
MAX_MCS = len(MCS_TABLE) - 1
THRESHOLDS_DB = np.array([e.sinr_threshold_db for e in MCS_TABLE])
SPECTRAL_EFFICIENCY = np.array([e.spectral_efficiency for e in MCS_TABLE])


def bler(entry: McsEntry, effective_sinr_db: float, slope_db: float = BLER_SLOPE_DB) -> float:
    """Logistic block error probability, 0.5 at the entry's SINR threshold."""
    z = (effective_sinr_db - entry.sinr_threshold_db) / slope_db
    if z > 700.0:
        return math.exp(-z)
    return 1.0 / (1.0 + math.exp(z))


def tbs_bits(entry: McsEntry, rank: int, data_res_per_tti: int = DATA_RES_PER_TTI) -> int:
    # per-layer size floored first so rank 2 is exactly twice rank 1
    return rank * int(math.floor(entry.spectral_efficiency * data_res_per_tti))


def sinr_to_cqi(sinr_db: float) -> int:
    x = (sinr_db + CQI_OFFSET_DB) / CQI_STEP_DB
    return min(CQI_MAX, max(0, int(math.floor(x + 0.5))))


def cqi_to_sinr(cqi: int) -> float:
    """Centre of the SINR bin that reports ``cqi``."""
    return cqi * CQI_STEP_DB - CQI_OFFSET_DB


def quantize_cqi(state: ChannelState, delay_queue, feedback_delay: int = FEEDBACK_DELAY) -> int:
    """CQI reported at the current TTI.

    ``delay_queue`` holds past true SINR values, newest last, and must include
    the current TTI. The report is computed from the value ``feedback_delay``
    TTIs old and never sees ``state.impairment_offset_db``.
    """
    if len(delay_queue) <= feedback_delay:
        raise ColdStart(f"need {feedback_delay + 1} SINR samples, have {len(delay_queue)}")
    return sinr_to_cqi(delay_queue[-1 - feedback_delay])


@dataclass
class ChannelState:
    true_sinr_db: float
    mean_sinr_db: float
    correlation: float = 0.995
    volatility_db: float = 1.0
    impairment_offset_db: float = 0.0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False, compare=False)


def evolve_channel(state: ChannelState) -> ChannelState:
    """One AR(1) step around the process mean; draws exactly one normal."""
    rho = state.correlation
    eps = state.rng.standard_normal()
    nxt = state.mean_sinr_db + rho * (state.true_sinr_db - state.mean_sinr_db) \
        + state.volatility_db * math.sqrt(1.0 - rho * rho) * eps
    return dataclasses.replace(state, true_sinr_db=nxt)


@dataclass(frozen=True)
class TransmissionOutcome:
    tti: int
    ack: bool
    tbs_bits: int
    delivered_bits: int
    bler_prob: float
    mcs_index: int = 0
    rank: int = 1


@dataclass(frozen=True)
class Observation:
    tti: int
    cqi: int
    ack_history_bit: bool
    delivered_bits: int
    mode_flag: str = "embb"


def transmit(state: ChannelState, action: LinkAction, tti: int, rng: np.random.Generator,
             data_res_per_tti: int = DATA_RES_PER_TTI, slope_db: float = BLER_SLOPE_DB,
             rank_penalty_db: dict | None = None) -> TransmissionOutcome:
    if not 0 <= action.mcs_index <= MAX_MCS:
        raise InvalidAction(f"mcs index {action.mcs_index} outside table")
    penalties = RANK_PENALTY_DB if rank_penalty_db is None else rank_penalty_db
    entry = MCS_TABLE[action.mcs_index]
    eff = state.true_sinr_db + state.impairment_offset_db - penalties[action.rank]
    p = bler(entry, eff, slope_db)
    ack = rng.random() >= p
    tbs = tbs_bits(entry, action.rank, data_res_per_tti)
    return TransmissionOutcome(tti, ack, tbs, tbs if ack else 0, p, action.mcs_index, action.rank)


@dataclass
class LinkConfig:
    mean_sinr_db: float = 27.0
    correlation: float = 0.995
    volatility_db: float = 1.0
    impairment_offset_db: float = 0.0
    initial_sinr_db: float | None = None
    data_res_per_tti: int = DATA_RES_PER_TTI
    feedback_delay: int = FEEDBACK_DELAY
    bler_slope_db: float = BLER_SLOPE_DB
    rank_penalty_db: dict = field(default_factory=lambda: dict(RANK_PENALTY_DB))


class LinkSimulator:
    """Per-TTI driver around the channel, CQI delay line and HARQ draws.

    Usage per TTI: ``observe()``, choose an action, ``transmit(action)``.
    ``transmit`` advances the clock and evolves the channel.
    """

    def __init__(self, config: LinkConfig | None = None, seed: int = 0):
        self.config = config or LinkConfig()
        chan_seed, harq_seed = np.random.SeedSequence(seed).spawn(2)
        c = self.config
        start = c.mean_sinr_db if c.initial_sinr_db is None else c.initial_sinr_db
        self.channel = ChannelState(start, c.mean_sinr_db, c.correlation, c.volatility_db,
                                    c.impairment_offset_db, np.random.default_rng(chan_seed))
        self.harq_rng = np.random.default_rng(harq_seed)
        self.tti = 0
        self.mode_flag = "embb"
        self._history = deque([start], maxlen=c.feedback_delay + 1)
        self._last: TransmissionOutcome | None = None

    def set_mean(self, mean_sinr_db: float, shift: bool = True):
        """Move the process mean; ``shift`` carries the current deviation over (abrupt step)."""
        ch = self.channel
        if shift:
            ch.true_sinr_db += mean_sinr_db - ch.mean_sinr_db
            self._history[-1] = ch.true_sinr_db
        ch.mean_sinr_db = mean_sinr_db

    def cqi(self) -> int:
        try:
            return quantize_cqi(self.channel, self._history, self.config.feedback_delay)
        except ColdStart:
            return 0

    def observe(self) -> Observation:
        last = self._last
        return Observation(self.tti, self.cqi(), bool(last.ack) if last else True,
                           last.delivered_bits if last else 0, self.mode_flag)

    def transmit(self, action: LinkAction) -> TransmissionOutcome:
        c = self.config
        out = transmit(self.channel, action, self.tti, self.harq_rng,
                       c.data_res_per_tti, c.bler_slope_db, c.rank_penalty_db)
        self._last = out
        self.channel = evolve_channel(self.channel)
        self._history.append(self.channel.true_sinr_db)
        self.tti += 1
        return out
