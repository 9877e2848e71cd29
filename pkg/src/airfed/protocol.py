"""Two-stage pre-equalization protocol for over-the-air aggregation.

Stage 1 (pre-equalization): the access point broadcasts a digital frame;
each sensor stamps the arrival, estimates its downlink channel, and answers
with a channel-inverted digital frame carrying its orthogonal pilot slot.
From the per-sensor residual channels the AP extracts a phase intercept
phi_0 and a slope delay tau_0 for every sensor and broadcasts them.

Stage 2 (online aggregation rounds): each round the AP broadcasts a fresh
digital frame.  A sensor re-estimates its downlink channel, measures the
residual CFO from the rotation between consecutive estimates, advances its
phase estimate by -2 pi f_r (dt_DL + dt_UL), corrects integer-sample timing
drift, and transmits its payload pre-equalized by
x[n] / (exp(j(phi + 2 pi n fs tau / N)) * h_DL[n]).  All sensors transmit
simultaneously; the waveforms add at the AP antenna, which demodulates the
sum directly.

Receivers anchor their demodulation window ``rx_backoff`` samples early so
that every per-sensor misalignment lands on the cyclic-prefix side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import (
    SampleStream,
    SensorLinkState,
    add_awgn,
    apply_cfo,
    apply_multipath,
    apply_timing_offset,
    subcarrier_indices,
)
from .config import PhyConfig
from .framing import (
    FrameLayout,
    FtSequence,
    assemble_frame,
    detect_frame,
    digital_frame_layout,
    gen_cfo_subframe,
    gen_ft,
    init_preamble_layout,
    ota_frame_layout,
    slice_frame,
)
from .fl import chunk_payload, dechunk_payload, payload_scale
from .ofdm import (
    FreqChannelEstimate,
    OfdmSymbol,
    PilotPlan,
    average_estimates,
    demap_pam,
    equalize,
    ls_channel_estimate,
    make_common_pilot,
    make_pilot_plan,
    map_pam,
    ofdm_demodulate,
    ofdm_modulate,
)
from .sync import CfoEstimate, coarse_cfo_estimate, needs_recorrection, start_tracking, track_residual_cfo


class SyncLossError(RuntimeError):
    """Timing drift beyond one sample between rounds; the round is lost."""


class FrameDetectionError(RuntimeError):
    """No valid correlation peak where a frame was expected."""


class ProtocolAbort(RuntimeError):
    """A round failed twice in a row; diagnostics attached."""


@dataclass
class PreEqState:
    """Per-sensor pre-equalization estimates carried across rounds."""

    phi_hat: float = 0.0
    tau_hat: float = 0.0
    dfr_hat: float = 0.0
    h_dl_prev: FreqChannelEstimate | None = None
    t_dl_prev: float = math.nan
    t_ul_prev: float = math.nan
    round_i: int = 0


@dataclass
class ProtocolEvent:
    kind: str  # DlTrigger, UlPreEqAck, DlOtaRequest, UlOtaFrame, CtrlBroadcast
    t_s: float
    payload: dict = field(default_factory=dict)


def wrap_pi(angle: float) -> float:
    """Reduce an angle to (-pi, pi]."""
    w = (angle + np.pi) % (2.0 * np.pi) - np.pi
    if w == -np.pi:
        w = np.pi
    return float(w)


def tx_ofdm(sym: OfdmSymbol, phy: PhyConfig) -> SampleStream:
    """Modulate with a sqrt(N) transmit gain.

    The inverse-DFT convention leaves an OFDM body 1/N of its subcarrier
    power; the gain puts OFDM sections on the same per-sample air power as
    the BPSK timing and tone sections, so one frame-level SNR means the
    same thing for every section.  Receivers undo it before demodulation.
    """
    out = ofdm_modulate(sym, phy)
    return SampleStream(out.samples * np.sqrt(phy.n_fft), out.t0_s)


def rx_ofdm(section: np.ndarray, phy: PhyConfig) -> OfdmSymbol:
    return ofdm_demodulate(np.asarray(section) / np.sqrt(phy.n_fft), phy)


# ---------------------------------------------------------------------------
# estimators on effective channels
# ---------------------------------------------------------------------------

def estimate_phi0(h_ota: FreqChannelEstimate) -> float:
    """Phase intercept of the residual channel's phase response.

    Averages unwrapped per-carrier phases over +-n pairs, which cancels any
    linear slope and leaves the common intercept (mod 2 pi).  Adjacent-
    carrier phase differences are confined to (-pi, pi] by the unwrap.
    """
    n_fft = len(h_ota.h)
    mid = n_fft // 2
    if not np.all(h_ota.valid):
        raise ValueError("phase intercept needs all carriers valid")
    ang = np.unwrap(np.angle(h_ota.h))
    total = 0.0
    for n in range(1, mid):
        total += ang[mid - n] + ang[mid + n]
    return wrap_pi(total / (n_fft - 2))


def slope_delay(h: FreqChannelEstimate, phy: PhyConfig) -> float:
    """Delay read off the mean phase increment between adjacent carriers."""
    hv = h.h
    if not np.all(h.valid):
        raise ValueError("slope estimate needs all carriers valid")
    acc = np.sum(np.conj(hv[:-1]) * hv[1:])
    return float(phy.n_fft / (2.0 * np.pi * phy.fs_hz) * np.angle(acc))


def estimate_tau0(h_ota: FreqChannelEstimate, phy: PhyConfig) -> float:
    return slope_delay(h_ota, phy)


def estimate_residual_cfo_sensor(
    h_dl_prev: FreqChannelEstimate,
    h_dl_now: FreqChannelEstimate,
    dt_dl_s: float,
    phy: PhyConfig,
    drift_samples: int = 0,
) -> float:
    """Residual CFO from the rotation between two downlink estimates.

    A detected integer-sample timing drift is removed from the newer
    estimate first; otherwise the drift ramp would null the carrier sum.
    Unambiguous only while |f_r * dt| < 1/2 (monitored by the re-correction
    policy, not here).
    """
    if dt_dl_s <= 0:
        raise ValueError("downlink period must be positive")
    now = h_dl_now.h
    if drift_samples:
        n = subcarrier_indices(phy.n_fft)
        now = now * np.exp(-2j * np.pi * n * drift_samples / phy.n_fft)
    acc = np.sum(np.conj(h_dl_prev.h) * now)
    return float(np.angle(acc) / (2.0 * np.pi * dt_dl_s))


def integer_sample_drift(
    h_dl_prev: FreqChannelEstimate, h_dl_now: FreqChannelEstimate, phy: PhyConfig,
    candidates: tuple[int, ...] = (-2, -1, 0, 1, 2),
) -> int:
    """Slope change between consecutive downlink estimates, on the sample grid.

    Works on the per-carrier ratio h_now * conj(h_prev), where the static
    multipath response cancels and only the drift ramp remains, and picks
    the integer ramp that matches it best.  This is the integer-rounded
    slope difference, but measured coherently across all carriers instead of
    from adjacent-carrier increments, whose noise on a frequency-selective
    channel is comparable to half a sample per round.
    """
    ratio = h_dl_now.h * np.conj(h_dl_prev.h)
    n = subcarrier_indices(phy.n_fft)
    scores = [np.abs(np.sum(ratio * np.exp(-2j * np.pi * n * d / phy.n_fft))) for d in candidates]
    return int(candidates[int(np.argmax(scores))])


def update_phi(state: PreEqState, dt_dl_s: float, dt_ul_s: float) -> float:
    """Advance the phase estimate by the residual-CFO rotation over one round."""
    state.phi_hat = wrap_pi(state.phi_hat - 2.0 * np.pi * state.dfr_hat * (dt_dl_s + dt_ul_s))
    return state.phi_hat


def update_tau(
    state: PreEqState,
    h_dl_prev: FreqChannelEstimate,
    h_dl_now: FreqChannelEstimate,
    phy: PhyConfig,
) -> float:
    """Track integer-sample timing drift seen in the downlink slope.

    A downlink drift of delta samples moves the downlink slope by +delta
    while the uplink side stays put, so the uplink-minus-downlink delay
    moves by -delta.  Drift beyond one sample signals sync loss.
    """
    drift = integer_sample_drift(h_dl_prev, h_dl_now, phy)
    if abs(drift) > 1:
        raise SyncLossError(f"timing drift of {drift} samples between rounds")
    state.tau_hat = state.tau_hat - drift * phy.t_s
    return state.tau_hat


@dataclass
class PreEqResult:
    symbol: OfdmSymbol
    flagged: np.ndarray          # carriers at the division floor
    power_amplification: float   # mean output power / mean input power
    cap_exceeded: bool


def pre_equalize(
    x: OfdmSymbol, state: PreEqState, h_dl_now: FreqChannelEstimate, phy: PhyConfig
) -> PreEqResult:
    """Invert the predicted uplink effective channel ahead of transmission."""
    n = subcarrier_indices(phy.n_fft)
    ramp = np.exp(1j * (state.phi_hat + 2.0 * np.pi * n * phy.fs_hz * state.tau_hat / phy.n_fft))
    denom = ramp * h_dl_now.h
    mag = np.abs(denom)
    flagged = mag < phy.eq_floor
    safe = denom.copy()
    safe[flagged] = np.where(mag[flagged] > 0,
                             denom[flagged] * (phy.eq_floor / mag[flagged]),
                             phy.eq_floor)
    out = x.freq / safe
    p_in = float(np.mean(np.abs(x.freq) ** 2))
    amp = float(np.mean(np.abs(out) ** 2) / p_in) if p_in > 0 else 0.0
    return PreEqResult(
        symbol=OfdmSymbol(out, x.modulation),
        flagged=flagged,
        power_amplification=amp,
        cap_exceeded=amp > phy.power_cap,
    )


# ---------------------------------------------------------------------------
# air interface: the only place ground truth touches waveforms
# ---------------------------------------------------------------------------

class AirInterface:
    """Applies per-link impairments and injects receiver noise.

    The SNR is defined against the mean power of the occupied frame region
    (guard padding excluded), so zero padding around a frame does not change
    what "20 dB" means.
    """

    def __init__(self, phy: PhyConfig, links: list[SensorLinkState], snr_db: float, rng: np.random.Generator):
        self.phy = phy
        self.links = links
        self.snr_db = snr_db
        self.rng = rng
        for link in links:
            link.validate(phy)

    def _noisy(self, x: SampleStream, frame_len: int) -> SampleStream:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return x
        g = self.phy.guard
        occupied = x.samples[g : g + frame_len]
        p_ref = float(np.mean(np.abs(occupied) ** 2))
        sigma2 = p_ref / (10.0 ** (self.snr_db / 10.0))
        noise = np.sqrt(sigma2 / 2.0) * (
            self.rng.standard_normal(len(x)) + 1j * self.rng.standard_normal(len(x))
        )
        return SampleStream(x.samples + noise, x.t0_s)

    def downlink(self, tx: SampleStream, k: int, lo_corr_hz: float, frame_len: int) -> SampleStream:
        """One sensor's received copy of an AP broadcast."""
        link = self.links[k]
        y = apply_multipath(tx, link.profile, self.phy)
        y = apply_timing_offset(y, link.to_dl_s, self.phy)
        y = apply_cfo(y, link.cfo_hz - lo_corr_hz, self.phy)
        return self._noisy(y, frame_len)

    def uplink_aggregate(self, txs: dict[int, SampleStream], lo_corrs: dict[int, float],
                         frame_len: int) -> SampleStream:
        """Sample-level sum of all sensors' uplink transmissions plus noise."""
        outs = []
        t0 = None
        for k, tx in txs.items():
            link = self.links[k]
            y = apply_multipath(tx, link.profile, self.phy)
            y = apply_timing_offset(y, link.to_ul_s, self.phy)
            y = apply_cfo(y, -(link.cfo_hz - lo_corrs[k]), self.phy)
            outs.append(y.samples)
            t0 = y.t0_s
        n = max(len(o) for o in outs)
        total = np.zeros(n, dtype=np.complex128)
        for o in outs:
            total[: len(o)] += o
        return self._noisy(SampleStream(total, t0), frame_len)


def _pad(stream: SampleStream, phy: PhyConfig, t_start: float) -> SampleStream:
    g = np.zeros(phy.guard, dtype=np.complex128)
    return SampleStream(np.concatenate([g, stream.samples, g]), t_start - phy.guard * phy.t_s)


# ---------------------------------------------------------------------------
# node logic
# ---------------------------------------------------------------------------

class SensorNode:
    """Receiver/transmitter logic of one sensor; sees only waveforms."""

    def __init__(self, k: int, phy: PhyConfig, ft: FtSequence, plan: PilotPlan,
                 common_pilot: OfdmSymbol, compensation: bool = True):
        self.k = k
        self.phy = phy
        self.ft = ft
        self.plan = plan
        self.common_pilot = common_pilot
        self.compensation = compensation
        self.lo_corr_hz = 0.0
        self.state = PreEqState()
        self.tracking = CfoEstimate()
        self.h_dl: FreqChannelEstimate | None = None
        self.flags: list[str] = []

    # -- initialization ----------------------------------------------------

    def receive_preamble(self, rx: SampleStream) -> float:
        layout = init_preamble_layout(self.phy)
        dec = detect_frame(rx, self.ft, self.phy)
        if not dec.valid:
            raise FrameDetectionError(f"sensor {self.k}: preamble not detected")
        parts = slice_frame(rx.samples, layout, dec.m0)
        est = coarse_cfo_estimate(SampleStream(parts["cfo"], rx.t0_s), self.phy)
        self.lo_corr_hz += est
        self.tracking.coarse_hz = self.lo_corr_hz
        return est

    def reset_sync(self):
        """Forget tracking state ahead of a fresh coarse correction."""
        self.state = PreEqState()
        self.tracking = CfoEstimate()
        self.h_dl = None
        self.flags.clear()

    # -- downlink processing -------------------------------------------------

    def receive_dl_digital(self, rx: SampleStream, layout: FrameLayout):
        """Detect, stamp, and estimate the downlink channel from all pilots."""
        phy = self.phy
        dec = detect_frame(rx, self.ft, phy)
        if not dec.valid:
            raise FrameDetectionError(f"sensor {self.k}: downlink frame not detected")
        t_stamp = rx.t0_s + dec.m0 * phy.t_s
        parts = slice_frame(rx.samples, layout, dec.m0 - phy.rx_backoff)
        ests = []
        raw_pilot0 = None
        for j in range(self.plan.k_sensors):
            sym = rx_ofdm(parts[f"pilot{j}"], phy)
            if j == 0:
                raw_pilot0 = sym
            ests.append(ls_channel_estimate(sym, self.plan.pilot_symbols[j], t_s=t_stamp, kind="DL"))
        h_now = average_estimates(ests)
        return t_stamp, h_now, raw_pilot0, dec

    def process_round_dl(self, rx: SampleStream, layout: FrameLayout, t_ul_next: float,
                         ctrl: dict | None = None) -> dict:
        """Per-round estimate updates; returns a diagnostics dict."""
        t_dl, h_now, raw_pilot0, dec = self.receive_dl_digital(rx, layout)
        st = self.state
        diag = {"sensor": self.k, "detect_m0": dec.m0, "detect_peak": dec.peak}
        if ctrl is not None:
            st.phi_hat = float(ctrl["phi0"][self.k])
            st.tau_hat = float(ctrl["tau0"][self.k])
        if self.compensation and st.h_dl_prev is not None:
            dt_dl = t_dl - st.t_dl_prev
            dt_ul = t_ul_next - st.t_ul_prev
            drift = integer_sample_drift(st.h_dl_prev, h_now, self.phy)
            if abs(drift) > 1:
                raise SyncLossError(f"sensor {self.k}: drift {drift} samples")
            st.dfr_hat = estimate_residual_cfo_sensor(st.h_dl_prev, h_now, dt_dl, self.phy, drift)
            update_tau(st, st.h_dl_prev, h_now, self.phy)
            update_phi(st, dt_dl, dt_ul)
            if self.tracking.prev_pilot is not None:
                track_residual_cfo(self.tracking, raw_pilot0, t_dl)
                # check against a two-period horizon: an estimate aliased by a
                # residual already past the bound still lands above half of it
                if needs_recorrection(self.tracking, 2.0 * dt_dl):
                    self.flags.append("recorrection")
                    diag["recorrection"] = True
            drift_guard = self.phy.kappa * self.phy.n_fft * abs(self.tracking.residual_hz) * self.phy.t_s
            if drift_guard >= 0.01:
                self.flags.append("phase_drift_guard")
                diag["phase_drift_guard"] = drift_guard
            diag.update(drift=drift, dfr_hat=st.dfr_hat)
        else:
            start_tracking(self.tracking, raw_pilot0, t_dl)
        st.h_dl_prev = h_now
        st.t_dl_prev = t_dl
        st.t_ul_prev = t_ul_next
        self.h_dl = h_now
        diag.update(t_dl=t_dl, phi_hat=st.phi_hat, tau_hat=st.tau_hat)
        return diag

    # -- uplink construction -------------------------------------------------

    def _preeq_symbol(self, sym: OfdmSymbol) -> tuple[SampleStream, list[str]]:
        res = pre_equalize(sym, self.state if self.compensation else
                           PreEqState(phi_hat=0.0, tau_hat=0.0), self.h_dl, self.phy)
        flags = []
        if res.cap_exceeded:
            flags.append("power_cap")
        if np.any(res.flagged):
            flags.append("deep_fade")
        return tx_ofdm(res.symbol, self.phy), flags

    def build_stage1_ack(self, layout: FrameLayout) -> tuple[SampleStream, list[str]]:
        phy = self.phy
        parts: dict[str, np.ndarray | SampleStream] = {
            "ft": self.ft.symbols.astype(np.complex128),
            "cfo": gen_cfo_subframe(phy, phy.m_cfo_frame, phy.pilot_amp),
        }
        flags: list[str] = []
        assert self.h_dl is not None
        for j in range(self.plan.k_sensors):
            if j == self.k:
                tx, f = self._preeq_symbol(OfdmSymbol(self.plan.pilot_symbols[j].copy()))
                parts[f"pilot{j}"] = tx
                flags += f
            else:
                parts[f"pilot{j}"] = np.zeros(phy.sym_len, dtype=np.complex128)
        return assemble_frame(layout, parts), flags

    def build_ota_frame(self, layout: FrameLayout, chunks: list[np.ndarray]) -> tuple[SampleStream, list[str]]:
        phy = self.phy
        parts: dict[str, np.ndarray | SampleStream] = {"ft": self.ft.symbols.astype(np.complex128)}
        flags: list[str] = []
        tx, f = self._preeq_symbol(self.common_pilot)
        parts["pilot"] = tx
        flags += f
        for i, chunk in enumerate(chunks):
            tx, f = self._preeq_symbol(map_pam(chunk, phy))
            parts[f"data{i}"] = tx
            flags += f
        return assemble_frame(layout, parts), flags


class AccessPoint:
    """AP logic: broadcast construction and aggregate reception."""

    def __init__(self, phy: PhyConfig, ft: FtSequence, plan: PilotPlan, common_pilot: OfdmSymbol,
                 rng: np.random.Generator):
        self.phy = phy
        self.ft = ft
        self.plan = plan
        self.common_pilot = common_pilot
        self.rng = rng

    def build_preamble(self) -> SampleStream:
        phy = self.phy
        layout = init_preamble_layout(phy)
        return assemble_frame(layout, {
            "ft": self.ft.symbols.astype(np.complex128),
            "cfo": gen_cfo_subframe(phy, phy.m_cfo_init, phy.pilot_amp),
        })

    def build_dl_digital(self, layout: FrameLayout, n_data: int = 0) -> SampleStream:
        phy = self.phy
        parts: dict[str, np.ndarray | SampleStream] = {
            "ft": self.ft.symbols.astype(np.complex128),
            "cfo": gen_cfo_subframe(phy, phy.m_cfo_frame, phy.pilot_amp),
        }
        for j in range(self.plan.k_sensors):
            parts[f"pilot{j}"] = tx_ofdm(OfdmSymbol(self.plan.pilot_symbols[j].copy()), phy)
        for i in range(n_data):
            # filler payload; control values travel on protocol events
            bits_sym = OfdmSymbol(np.zeros(phy.n_fft, dtype=complex))
            parts[f"data{i}"] = tx_ofdm(bits_sym, phy)
        return assemble_frame(layout, parts)

    def _ul_anchor(self) -> int:
        return self.phy.guard - self.phy.rx_backoff

    def receive_stage1(self, rx: SampleStream, layout: FrameLayout, t_ul_s: float):
        """Per-sensor residual channel, phase intercept, and slope delay."""
        phy = self.phy
        parts = slice_frame(rx.samples, layout, self._ul_anchor())
        phi0, tau0, h_ota = {}, {}, {}
        for k in range(self.plan.k_sensors):
            sym = rx_ofdm(parts[f"pilot{k}"], phy)
            est = ls_channel_estimate(sym, self.plan.pilot_symbols[k], t_s=t_ul_s, kind="OTA")
            h_ota[k] = est
            phi0[k] = estimate_phi0(est)
            tau0[k] = estimate_tau0(est, phy)
        diag_det = detect_frame(rx, self.ft, phy)
        return phi0, tau0, h_ota, diag_det

    def receive_ota(self, rx: SampleStream, layout: FrameLayout, n_values: int, scale: float):
        """Demap the aggregate payload using the common-pilot equalizer.

        The pilot fixes the phase common to every sensor (residual rotation
        and any shared anchor ramp).  Only the phase is equalized: after
        pre-equalization the common gain is unity by construction, and an
        amplitude division would move first-order pilot noise straight into
        the real-axis payload read.
        """
        phy = self.phy
        parts = slice_frame(rx.samples, layout, self._ul_anchor())
        known = self.plan.k_sensors * self.common_pilot.freq
        h_common = ls_channel_estimate(rx_ofdm(parts["pilot"], phy), known, kind="OTA")
        mag = np.abs(h_common.h)
        h_phase = FreqChannelEstimate(
            h=np.where(mag > phy.eq_floor, h_common.h / np.maximum(mag, phy.eq_floor), 1.0),
            t_est_s=h_common.t_est_s, kind="OTA", valid=h_common.valid,
        )
        chunks = []
        unreliable = 0
        for i in range(len([s for s in layout.sections if s.name.startswith("data")])):
            eq, reliable = equalize(rx_ofdm(parts[f"data{i}"], phy), h_phase, phy)
            unreliable += int(np.sum(~reliable))
            chunks.append(demap_pam(eq, phy))
        agg = dechunk_payload(chunks, n_values, scale)
        diag_det = detect_frame(rx, self.ft, phy)
        return agg, {"unreliable_carriers": unreliable, "ul_detect_valid": diag_det.valid,
                     "ul_detect_m0": diag_det.m0, "common_gain": float(np.mean(mag))}


# ---------------------------------------------------------------------------
# handshake session
# ---------------------------------------------------------------------------

@dataclass
class RoundResult:
    index: int
    ok: bool
    retried: bool
    nmse_d: float
    aggregate: np.ndarray
    flags: list[str]
    diag: dict


class HandshakeSession:
    """Deterministic event loop driving the AP and sensors round by round."""

    def __init__(
        self,
        links: list[SensorLinkState],
        phy: PhyConfig,
        snr_db: float,
        seed: int,
        payload_len: int,
        compensation: bool = True,
        round_period_s: float = 1e-3,
        turnaround_s: float = 3e-4,
    ):
        self.phy = phy
        self.k_sensors = len(links)
        self.payload_len = payload_len
        self.compensation = compensation
        self.round_period_s = round_period_s
        self.turnaround_s = turnaround_s
        if phy.n_used != phy.n_fft:
            raise ValueError("the aggregation protocol requires full carrier occupancy; "
                             "disable null_dc/edge_guards")
        root = np.random.SeedSequence(seed)
        noise_ss, ref_ss = root.spawn(2)
        self.rng = np.random.default_rng(noise_ss)
        ref_rng = np.random.default_rng(ref_ss)
        ft_seed, pilot_seed, common_seed = (int(ref_rng.integers(2**31)) for _ in range(3))
        self.ft = gen_ft(phy, ft_seed)
        self.plan = make_pilot_plan(phy, self.k_sensors, pilot_seed)
        self.common = make_common_pilot(phy, common_seed)
        self.air = AirInterface(phy, links, snr_db, self.rng)
        self.ap = AccessPoint(phy, self.ft, self.plan, self.common, self.rng)
        self.sensors = [
            SensorNode(k, phy, self.ft, self.plan, self.common, compensation)
            for k in range(self.k_sensors)
        ]
        self.n_data = int(np.ceil(payload_len / phy.n_used))
        self.dl_layout = digital_frame_layout(phy, self.k_sensors, n_data=0)
        self.ul_layout = ota_frame_layout(phy, self.n_data)
        self.ack_layout = digital_frame_layout(phy, self.k_sensors, n_data=0)
        dl_dur = (self.dl_layout.total_len + 2 * phy.guard) * phy.t_s
        ul_dur = (self.ul_layout.total_len + 2 * phy.guard) * phy.t_s
        self.ul_offset_s = dl_dur + turnaround_s
        if round_period_s < self.ul_offset_s + ul_dur + turnaround_s:
            raise ValueError("round period too short for the frame schedule")
        self.trace: list[ProtocolEvent] = []
        self.ctrl: dict | None = None
        self.ctrl_pending = False
        self.recorrections = 0
        self._next_dl_t = 0.0
        self.round_index = 0
        self.initialized = False

    # -- plumbing ------------------------------------------------------------

    def _broadcast(self, frame: SampleStream, t_s: float) -> list[SampleStream]:
        padded = _pad(frame, self.phy, t_s)
        return [self.air.downlink(padded, k, self.sensors[k].lo_corr_hz, len(frame))
                for k in range(self.k_sensors)]

    def _collect_ul(self, frames: dict[int, SampleStream], t_s: float) -> SampleStream:
        frame_len = max(len(f) for f in frames.values())
        padded = {k: _pad(f, self.phy, t_s) for k, f in frames.items()}
        corrs = {k: self.sensors[k].lo_corr_hz for k in frames}
        return self.air.uplink_aggregate(padded, corrs, frame_len)

    # -- protocol stages -------------------------------------------------------

    def _initialize_at(self, t0: float):
        """Init preamble, stage-1 downlink and uplink, control broadcast."""
        phy = self.phy
        t = t0
        preamble = self.ap.build_preamble()
        self.trace.append(ProtocolEvent("DlTrigger", t, {"frame": "InitPreamble"}))
        for k, rx in enumerate(self._broadcast(preamble, t)):
            est = self.sensors[k].receive_preamble(rx)
            self.trace.append(ProtocolEvent("CtrlBroadcast", t, {"sensor": k, "coarse_hz": est}))
        t += (len(preamble) + 2 * phy.guard) * phy.t_s + self.turnaround_s

        dl = self.ap.build_dl_digital(self.dl_layout)
        self.trace.append(ProtocolEvent("DlTrigger", t, {"frame": "Stage1DL"}))
        t_ul = t + self.ul_offset_s
        for k, rx in enumerate(self._broadcast(dl, t)):
            self.sensors[k].process_round_dl(rx, self.dl_layout, t_ul_next=t_ul)

        acks = {}
        for k in range(self.k_sensors):
            frame, flags = self.sensors[k].build_stage1_ack(self.ack_layout)
            acks[k] = frame
            if flags:
                self.trace.append(ProtocolEvent("UlPreEqAck", t_ul, {"sensor": k, "flags": flags}))
        rx = self._collect_ul(acks, t_ul)
        phi0, tau0, h_ota, det = self.ap.receive_stage1(rx, self.ack_layout, t_ul)
        self.ctrl = {"phi0": phi0, "tau0": tau0}
        self.ctrl_pending = True
        self.trace.append(ProtocolEvent("UlPreEqAck", t_ul, {
            "phi0": {k: float(v) for k, v in phi0.items()},
            "tau0": {k: float(v) for k, v in tau0.items()},
            "ul_detect_valid": det.valid,
        }))
        ul_dur = (self.ul_layout.total_len + 2 * phy.guard) * phy.t_s
        self._next_dl_t = t_ul + ul_dur + self.turnaround_s
        return h_ota

    def initialize(self):
        self.trace.append(ProtocolEvent("CtrlBroadcast", 0.0, {
            "frame_layouts": {
                "downlink": self.dl_layout.describe(),
                "uplink": self.ul_layout.describe(),
            },
        }))
        h_ota = self._initialize_at(0.0)
        self.initialized = True
        return h_ota

    def _maybe_recorrect(self):
        """Re-run the coarse correction when a sensor requested it."""
        if not any("recorrection" in s.flags for s in self.sensors):
            return False
        self.trace.append(ProtocolEvent("CtrlBroadcast", self._next_dl_t,
                                        {"action": "coarse_recorrection"}))
        for s in self.sensors:
            s.reset_sync()
        self.recorrections += 1
        self._initialize_at(self._next_dl_t)
        return True

    def _run_round_once(self, payloads: list[np.ndarray], t_dl: float, t_ul: float):
        scale = payload_scale(payloads, self.phy.pam_bound, self.phy.clip_quantile)
        chunked = [chunk_payload(g, self.phy.n_used, scale)[0] for g in payloads]
        dl = self.ap.build_dl_digital(self.dl_layout)
        self.trace.append(ProtocolEvent("DlOtaRequest", t_dl, {"round": self.round_index}))
        ctrl = self.ctrl if self.ctrl_pending else None
        self.ctrl_pending = False
        flags: list[str] = []
        diag: dict = {"sensors": []}
        for k, rx in enumerate(self._broadcast(dl, t_dl)):
            d = self.sensors[k].process_round_dl(rx, self.dl_layout, t_ul_next=t_ul, ctrl=ctrl)
            diag["sensors"].append(d)
        uls = {}
        for k in range(self.k_sensors):
            frame, f = self.sensors[k].build_ota_frame(self.ul_layout, chunked[k])
            uls[k] = frame
            flags += [f"s{k}:{x}" for x in f]
        if any("power_cap" in f for f in flags):
            raise SyncLossError("transmit power cap exceeded")
        rx = self._collect_ul(uls, t_ul)
        agg, ap_diag = self.ap.receive_ota(rx, self.ul_layout, self.payload_len, scale)
        diag.update(ap_diag)
        true_sum = np.sum(payloads, axis=0)
        denom = float(np.sum(true_sum**2))
        nmse = float(np.sum((agg - true_sum) ** 2) / denom) if denom > 0 else 0.0
        estimates = {
            f"sensor{k}": {
                "phi_hat": float(self.sensors[k].state.phi_hat),
                "tau_hat_samples": float(self.sensors[k].state.tau_hat / self.phy.t_s),
                "dfr_hat_hz": float(self.sensors[k].state.dfr_hat),
                "dfr_mean_hz": float(self.sensors[k].tracking.residual_hz),
            }
            for k in range(self.k_sensors)
        }
        self.trace.append(ProtocolEvent("UlOtaFrame", t_ul, {
            "round": self.round_index, "nmse_d": nmse, "flags": flags,
            "estimates": estimates, **ap_diag,
        }))
        return agg, nmse, flags, diag

    def _snapshot_sensors(self):
        import copy

        sensors = [copy.deepcopy((s.lo_corr_hz, s.state, s.tracking, s.h_dl)) for s in self.sensors]
        return sensors, self.ctrl_pending

    def _restore_sensors(self, snap):
        sensors, ctrl_pending = snap
        for s, (corr, state, tracking, h_dl) in zip(self.sensors, sensors):
            s.lo_corr_hz = corr
            s.state = state
            s.tracking = tracking
            s.h_dl = h_dl
        self.ctrl_pending = ctrl_pending

    def run_round(self, payloads: list[np.ndarray]) -> RoundResult:
        """One aggregation round with a single retry on failure.

        A failed attempt must not leak half-updated estimates into the
        retry, so sensor state is restored before re-running.
        """
        if not self.initialized:
            raise RuntimeError("session not initialized")
        if len(payloads) != self.k_sensors:
            raise ValueError("one payload vector per sensor required")
        payloads = [np.asarray(p, dtype=float).ravel() for p in payloads]
        if any(len(p) != self.payload_len for p in payloads):
            raise ValueError(f"payloads must have length {self.payload_len}")
        self._maybe_recorrect()
        self.round_index += 1
        base = self._next_dl_t
        self._next_dl_t = base + self.round_period_s
        snap = self._snapshot_sensors()
        try:
            agg, nmse, flags, diag = self._run_round_once(payloads, base, base + self.ul_offset_s)
            return RoundResult(self.round_index, True, False, nmse, agg, flags, diag)
        except (SyncLossError, FrameDetectionError) as first:
            self._restore_sensors(snap)
            self.trace.append(ProtocolEvent("DlOtaRequest", base, {
                "round": self.round_index, "retry": str(first)}))
            retry_dl = base + self.round_period_s / 2.0
            try:
                agg, nmse, flags, diag = self._run_round_once(
                    payloads, retry_dl, retry_dl + self.ul_offset_s)
                return RoundResult(self.round_index, True, True, nmse, agg, flags, diag)
            except (SyncLossError, FrameDetectionError) as second:
                self._restore_sensors(snap)
                raise ProtocolAbort(
                    f"round {self.round_index} failed twice: {first}; then {second}"
                ) from second


def run_handshake(
    sensors: list[SensorLinkState],
    phy: PhyConfig,
    rounds: int,
    payload_source,
    *,
    snr_db: float = math.inf,
    seed: int = 0,
    payload_len: int = 256,
    compensation: bool = True,
    round_period_s: float = 1e-3,
    turnaround_s: float = 3e-4,
) -> list[RoundResult]:
    """Initialize a session and run ``rounds`` aggregation rounds.

    ``payload_source(i)`` must return one payload vector per sensor for
    round i (1-based).
    """
    session = HandshakeSession(
        sensors, phy, snr_db, seed, payload_len,
        compensation=compensation, round_period_s=round_period_s, turnaround_s=turnaround_s,
    )
    session.initialize()
    return [session.run_round(payload_source(i)) for i in range(1, rounds + 1)]
