"""Situation awareness: signal conditioning, SINR estimation and BLER outlook."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .linksim import BLER_SLOPE_DB, MCS_TABLE, ColdStart, bler

HISTORY_TTIS = 100
FORECAST_HORIZON = 5
TREND_POINTS = 20


class EmptyWindow(ValueError):
    pass


def sliding_mean(values) -> float:
    n = len(values)
    if n == 0:
        raise EmptyWindow("sliding_mean of an empty window")
    return float(sum(values)) / n


def median_prefilter(values, width: int = 5) -> np.ndarray:
    """Running median over the trailing ``width`` samples (impulse removal)."""
    x = np.asarray(values, dtype=float)
    if x.size < width:
        return x.copy()
    out = x.copy()
    win = np.lib.stride_tricks.sliding_window_view(x, width)
    out[width - 1:] = np.median(win, axis=1)
    return out


class SignalWindow:
    """Fixed-capacity history of filtered SINR, ACK bits and delivered bits.

    Each ring is written twice (at ``i`` and ``i + capacity``) so the last
    ``capacity`` samples are always available as one contiguous view.
    """

    def __init__(self, capacity: int = HISTORY_TTIS):
        self.capacity = capacity
        self._sinr = np.zeros(2 * capacity)
        self._ack = np.zeros(2 * capacity, dtype=bool)
        self._bits = np.zeros(2 * capacity, dtype=np.int64)
        self._pos = 0
        self._n = 0
        self._nacks = 0
        self._bit_sum = 0

    def __len__(self):
        return self._n

    def push(self, sinr_estimate_db: float, ack: bool, delivered_bits: int = 0):
        i = self._pos
        cap = self.capacity
        if self._n == cap:
            self._nacks -= not self._ack[i]
            self._bit_sum -= int(self._bits[i])
        else:
            self._n += 1
        self._sinr[i] = self._sinr[i + cap] = sinr_estimate_db
        self._ack[i] = self._ack[i + cap] = ack
        self._bits[i] = self._bits[i + cap] = delivered_bits
        self._nacks += not ack
        self._bit_sum += delivered_bits
        self._pos = (i + 1) % cap

    def _view(self, arr):
        end = self._pos + self.capacity
        return arr[end - self._n:end]

    @property
    def sinr_estimates_db(self) -> np.ndarray:
        return self._view(self._sinr)

    @property
    def ack_bits(self) -> np.ndarray:
        return self._view(self._ack)

    @property
    def delivered_bits(self) -> np.ndarray:
        return self._view(self._bits)

    @property
    def windowed_bler(self) -> float:
        if self._n == 0:
            raise EmptyWindow("no feedback in window")
        return self._nacks / self._n

    @property
    def mean_delivered_bits(self) -> float:
        if self._n == 0:
            raise EmptyWindow("no feedback in window")
        return self._bit_sum / self._n


@dataclass(frozen=True)
class KalmanState:
    estimate_db: float
    variance_db2: float = 1.0
    process_noise_q: float = 0.01
    measurement_noise_r: float = 1.0


def kalman_update(state: KalmanState, measurement_db: float) -> KalmanState:
    """Scalar random-walk Kalman step: predict, then correct with one measurement."""
    prior = state.variance_db2 + state.process_noise_q
    gain = prior / (prior + state.measurement_noise_r)
    est = state.estimate_db + gain * (measurement_db - state.estimate_db)
    return KalmanState(est, prior * (1.0 - gain), state.process_noise_q, state.measurement_noise_r)


def steady_state_variance(q: float, r: float) -> float:
    """Posterior variance at the fixed point of the scalar Riccati recursion."""
    return 0.5 * (-q + math.sqrt(q * q + 4.0 * q * r))


class ARForecaster:
    """Ridge-regularised autoregression on a mean-centred series.

    With a huge ridge weight every coefficient shrinks to zero and forecasts
    collapse to the series mean.
    """

    def __init__(self, order: int = 8, ridge: float = 1e-3):
        self.order = order
        self.ridge = ridge
        self.coef = np.zeros(order)
        self.mean = 0.0
        self._eye = ridge * np.eye(order)

    def fit(self, series) -> ARForecaster:
        x = np.asarray(series, dtype=float)
        p = self.order
        if x.size <= p:
            raise ColdStart(f"AR({p}) fit needs more than {p} samples")
        self.mean = float(x.mean())
        y = x - self.mean
        lags = np.lib.stride_tricks.sliding_window_view(y[:-1], p)[:, ::-1]
        target = y[p:]
        self.coef = np.linalg.solve(lags.T @ lags + self._eye, lags.T @ target)
        return self

    def predict(self, history, steps: int = FORECAST_HORIZON) -> np.ndarray:
        p = self.order
        buf = list(np.asarray(history, dtype=float)[-p:] - self.mean)
        if len(buf) < p:
            raise ColdStart(f"AR({p}) prediction needs {p} lags")
        coef = self.coef.tolist()
        out = np.empty(steps)
        for k in range(steps):
            nxt = sum(c * x for c, x in zip(coef, reversed(buf[-p:])))
            buf.append(nxt)
            out[k] = nxt + self.mean
        return out


def forecast_sinr(window: SignalWindow, forecaster: ARForecaster | None = None,
                  steps: int = FORECAST_HORIZON, min_samples: int = HISTORY_TTIS) -> np.ndarray:
    if len(window) < min_samples:
        raise ColdStart(f"forecast needs {min_samples} samples, have {len(window)}")
    series = window.sinr_estimates_db
    fc = forecaster or ARForecaster()
    return fc.fit(series).predict(series, steps)


def forecast_bler(window: SignalWindow, current_mcs: int, table=MCS_TABLE,
                  sinr_offset_db: float = 0.0, forecaster: ARForecaster | None = None,
                  slope_db: float = BLER_SLOPE_DB, sinr_path=None) -> list[float]:
    """BLER of ``current_mcs`` over the next five TTIs.

    ``sinr_offset_db`` shifts the filtered (CQI-domain) SINR to the effective
    SINR seen by the decoder, e.g. minus rank penalty and learned bias.
    """
    if sinr_path is None:
        sinr_path = forecast_sinr(window, forecaster)
    entry = table[current_mcs]
    return [bler(entry, s + sinr_offset_db, slope_db) for s in sinr_path]


@dataclass(frozen=True)
class SituationSummary:
    filtered_sinr_db: float
    sinr_trend_db_per_tti: float
    windowed_bler: float
    bler_forecast: tuple
    vulnerability: bool
    suggested_direction: str
    sinr_forecast_db: tuple = ()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


_TREND_T = np.arange(TREND_POINTS) - (TREND_POINTS - 1) / 2.0
_TREND_DEN = float(_TREND_T @ _TREND_T)


def least_squares_slope(values) -> float:
    y = np.asarray(values, dtype=float)
    if y.size == TREND_POINTS:
        t, den = _TREND_T, _TREND_DEN
    else:
        t = np.arange(y.size) - (y.size - 1) / 2.0
        den = float(t @ t)
    if den == 0.0:
        return 0.0
    return float(t @ (y - y.mean())) / den


def direction_for(vulnerable: bool, windowed_bler: float, trend: float, target: float) -> str:
    if vulnerable:
        return "lower"
    if windowed_bler < 0.2 * target and trend >= 0.0:
        return "raise"
    return "hold"


def summarize(window: SignalWindow, kalman: KalmanState, active_target: float, current_mcs: int,
              sinr_offset_db: float = 0.0, forecaster: ARForecaster | None = None,
              table=MCS_TABLE, sinr_path=None) -> SituationSummary:
    """Immutable snapshot of the link: estimate, trend, BLER now and ahead.

    ``sinr_path`` lets a caller supply a precomputed SINR forecast.
    """
    path = forecast_sinr(window, forecaster) if sinr_path is None else sinr_path
    fc = forecast_bler(window, current_mcs, table, sinr_offset_db, sinr_path=path)
    series = window.sinr_estimates_db
    trend = least_squares_slope(series[-TREND_POINTS:])
    wb = window.windowed_bler
    vulnerable = max(fc) > active_target
    return SituationSummary(kalman.estimate_db, trend, wb, tuple(fc), vulnerable,
                            direction_for(vulnerable, wb, trend, active_target),
                            tuple(float(s) for s in path))


def cold_summary(window: SignalWindow, kalman: KalmanState, active_target: float) -> SituationSummary:
    """Summary used before the forecaster has enough history: BLER now, repeated."""
    wb = window.windowed_bler if len(window) else 0.0
    series = window.sinr_estimates_db
    trend = least_squares_slope(series[-TREND_POINTS:]) if len(series) >= 2 else 0.0
    fc = (wb,) * FORECAST_HORIZON
    vulnerable = wb > active_target
    return SituationSummary(kalman.estimate_db, trend, wb, fc, vulnerable,
                            direction_for(vulnerable, wb, trend, active_target),
                            (kalman.estimate_db,) * FORECAST_HORIZON)
