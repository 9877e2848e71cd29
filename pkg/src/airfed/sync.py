"""Carrier frequency offset estimation: coarse acquisition and tracking.

Coarse estimation runs once on the long single-tone preamble with a lag
correlator: the lag is a multiple of the tone period, so the lag product's
phase depends only on the CFO.  Residual tracking compares repeated identical
pilots over time; single-shot estimates are combined by a running mean so the
error keeps shrinking while the channel holds still.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import SampleStream
from .config import PhyConfig
from .ofdm import OfdmSymbol


@dataclass
class CfoEstimate:
    """Per-link CFO tracking state.

    ``residual_hz`` is the running mean over ``p_count`` single-shot
    estimates; ``prev_pilot`` holds the raw subcarrier values of the last
    pilot so the next update can measure the inter-pilot rotation.
    """

    coarse_hz: float = 0.0
    residual_hz: float = 0.0
    p_count: int = 0
    last_t_s: float = 0.0
    prev_pilot: np.ndarray | None = None
    history: list = field(default_factory=list)  # (t_p, shot_hz, mean_hz)


def start_tracking(state: CfoEstimate, rx_pilot: OfdmSymbol, t_s: float) -> CfoEstimate:
    """Store the reference pilot that subsequent updates compare against."""
    state.prev_pilot = rx_pilot.freq.copy()
    state.last_t_s = t_s
    return state


def coarse_cfo_estimate(r_init: SampleStream, phy: PhyConfig) -> float:
    """Lag-correlation CFO estimate from the initialization tone.

    f_hat = angle(sum_m conj(r[m]) r[m + L]) / (2 pi Ts L), unambiguous on
    (-1/(2 Ts L), 1/(2 Ts L)].  cp_len samples are excluded at both ends so
    multipath onset and decay transients cannot bias the estimate.
    """
    L = phy.l_span
    samples = r_init.samples
    skip = phy.cp_len
    n_prod = len(samples) - L - 2 * skip
    if n_prod < 1:
        raise ValueError(f"stream too short for lag {L}: {len(samples)} samples")
    head = samples[skip : skip + n_prod]
    tail = samples[skip + L : skip + L + n_prod]
    acc = np.sum(np.conj(head) * tail)
    return float(np.angle(acc) / (2.0 * np.pi * phy.t_s * L))


def track_residual_cfo(state: CfoEstimate, rx_pilot: OfdmSymbol, t_p: float) -> CfoEstimate:
    """One tracking update against the stored pilot.

    The single-shot estimate averages per-carrier rotation angles, each
    reduced to (-pi, pi], and converts phase to Hz over the elapsed time.
    The running mean then equals the arithmetic mean of all shots so far.
    """
    if state.prev_pilot is None:
        raise ValueError("no reference pilot stored; call start_tracking first")
    dt = t_p - state.last_t_s
    if dt <= 0:
        raise ValueError("pilot timestamps must increase")
    now = rx_pilot.freq
    prev = state.prev_pilot
    usable = (np.abs(prev) > 0) & (np.abs(now) > 0)
    if not np.any(usable):
        raise ValueError("no usable carriers for tracking")
    angles = np.angle(now[usable] / prev[usable])
    shot = float(np.mean(angles) / (2.0 * np.pi * dt))
    p = state.p_count + 1
    mean = ((p - 1) / p) * state.residual_hz + shot / p
    state.residual_hz = mean
    state.p_count = p
    state.last_t_s = t_p
    state.prev_pilot = now.copy()
    state.history.append((t_p, shot, mean))
    return state


def needs_recorrection(state: CfoEstimate, delta_t_s: float) -> bool:
    """True when the residual would rotate more than half a cycle per period."""
    return delta_t_s * abs(state.residual_hz) > 0.5


def cfo_nmse(est, truth) -> float:
    """||est - truth||^2 / ||truth||^2 over matching vectors."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError("shape mismatch")
    denom = float(np.sum(truth**2))
    if denom == 0.0:
        raise ValueError("truth vector is identically zero")
    return float(np.sum((est - truth) ** 2) / denom)
