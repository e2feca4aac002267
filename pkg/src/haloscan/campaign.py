"""Synthetic campaign generation: tuning plans, raw spectra, calibration sets.

Randomness policy: every stochastic quantity derives from the campaign
master seed through a (stream, index, salt) spawn key, so any single
spectrum can be regenerated in isolation and thread scheduling cannot
change results.  Streams are module constants below.

Statistics are simulated at the level of the averaged periodogram: an
averaged power spectrum with ``n_averages`` segments has relative
fluctuation 1/sqrt(n_averages) per bin, which is all the downstream
pipeline ever sees.  ``simulate_spectrum_literal`` builds the individual
segment traces instead and exists to validate that shortcut.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .axion import LineshapeParams, bin_signal
from .errors import ConfigError
from .receiver import cavity_reflectance, noise_budget, thermal_quanta
from .spectra import CalibrationSet, RawSpectrum

STREAM_SPECTRUM = 0
STREAM_CALIBRATION = 1
STREAM_BASELINE = 2
STREAM_ANOMALY = 3
STREAM_RESCAN = 4

ANOMALY_TYPES = ("drift", "jpa_sag", "probe")

DEFAULT_BIN_WIDTH_HZ = 100.0
DEFAULT_N_BINS = 30000
DEFAULT_TAU_S = 3600.0


def derive_seed(master_seed, stream, index, salt=0):
    """Collapse a spawn key into a 64-bit integer seed."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(stream, index, salt))
    hi, lo = ss.generate_state(2)
    return (int(hi) << 32) | int(lo)


@dataclass(frozen=True)
class TuningStep:
    step_id: int
    nu_c_hz: float
    beta: float
    seed: int


@dataclass(frozen=True)
class TuningPlan:
    """Ordered tuning steps plus the grid that generated them."""

    steps: tuple
    skip_windows: tuple
    lo_hz: float
    hi_hz: float
    step_hz: float
    master_seed: int

    def __post_init__(self):
        last = -math.inf
        for step in self.steps:
            if step.nu_c_hz <= last:
                raise ConfigError("tuning steps must be strictly increasing in nu_c")
            last = step.nu_c_hz
            for lo, hi in self.skip_windows:
                if lo <= step.nu_c_hz <= hi:
                    raise ConfigError(
                        f"step {step.step_id} at {step.nu_c_hz} Hz lies in skip window"
                    )

    @property
    def n_steps(self):
        return len(self.steps)

    def nearest_step(self, freq_hz):
        """Step whose center is closest to freq_hz, ties to the lower center."""
        if not self.steps:
            raise ConfigError("empty tuning plan")
        return min(self.steps, key=lambda s: (abs(s.nu_c_hz - freq_hz), s.nu_c_hz))


def make_tuning_plan(lo_hz, hi_hz, step_hz, skip_windows=(), *, beta=1.0, master_seed=0):
    """Uniform frequency grid from lo to hi, dropping points inside skips.

    A degenerate range (lo == hi) yields a single step.  A range fully
    covered by skip windows yields an empty plan rather than an error.
    """
    if not (lo_hz <= hi_hz):
        raise ConfigError(f"need lo <= hi, got {lo_hz!r} > {hi_hz!r}")
    if step_hz <= 0:
        raise ConfigError(f"step_hz must be > 0, got {step_hz!r}")
    windows = []
    for window in skip_windows:
        lo, hi = window
        if lo > hi:
            raise ConfigError(f"skip window {window!r} has lo > hi")
        windows.append((float(lo), float(hi)))
    n_candidates = int(math.floor((hi_hz - lo_hz) / step_hz + 1e-9)) + 1
    steps = []
    step_id = 0
    for k in range(n_candidates):
        nu = lo_hz + k * step_hz
        if any(lo <= nu <= hi for lo, hi in windows):
            continue
        steps.append(
            TuningStep(
                step_id=step_id,
                nu_c_hz=nu,
                beta=beta,
                seed=derive_seed(master_seed, STREAM_SPECTRUM, step_id),
            )
        )
        step_id += 1
    return TuningPlan(
        steps=tuple(steps),
        skip_windows=tuple(windows),
        lo_hz=lo_hz,
        hi_hz=hi_hz,
        step_hz=step_hz,
        master_seed=master_seed,
    )


@dataclass(frozen=True)
class BaselineModel:
    """Smooth multiplicative transfer function applied on the IF grid.

    One component is shared by every step (the analysis chain), a second
    smaller component varies step to step.  Both are sums of low-order
    cosines in normalized band position, so the product stays strictly
    positive and well inside Savitzky-Golay reach.
    """

    master_seed: int
    shared_orders: tuple
    shared_amps: tuple
    shared_phases: tuple
    step_components_max: int = 2
    step_excursion: float = 0.05

    def evaluate(self, step_id, n_bins):
        t = np.linspace(0.0, 1.0, n_bins)
        base = np.ones(n_bins)
        for order, amp, phase in zip(self.shared_orders, self.shared_amps, self.shared_phases):
            base += amp * np.cos(2.0 * np.pi * order * t + phase)
        rng = np.random.default_rng(
            derive_seed(self.master_seed, STREAM_BASELINE, 1 + step_id)
        )
        n = int(rng.integers(1, self.step_components_max + 1))
        orders = rng.integers(1, 7, size=n)
        raw = rng.uniform(-1.0, 1.0, size=n)
        amps = self.step_excursion * raw / np.sum(np.abs(raw))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
        wiggle = np.ones(n_bins)
        for order, amp, phase in zip(orders, amps, phases):
            wiggle += amp * np.cos(2.0 * np.pi * order * t + phase)
        return base * wiggle


def make_baseline_model(
    master_seed,
    *,
    n_components=(3, 5),
    excursion=0.30,
    step_components_max=2,
    step_excursion=0.05,
):
    if excursion < 0 or excursion >= 1:
        raise ConfigError(f"baseline excursion must be in [0, 1), got {excursion!r}")
    rng = np.random.default_rng(derive_seed(master_seed, STREAM_BASELINE, 0))
    n = int(rng.integers(n_components[0], n_components[1] + 1))
    orders = tuple(range(1, n + 1))
    raw = rng.uniform(-1.0, 1.0, size=n)
    amps = tuple(excursion * raw / np.sum(np.abs(raw)))
    phases = tuple(rng.uniform(0.0, 2.0 * np.pi, size=n))
    return BaselineModel(
        master_seed=master_seed,
        shared_orders=orders,
        shared_amps=amps,
        shared_phases=phases,
        step_components_max=step_components_max,
        step_excursion=step_excursion,
    )


def band_start(step, bin_width_hz=DEFAULT_BIN_WIDTH_HZ, n_bins=DEFAULT_N_BINS):
    """First bin center of the analysis band; the center bin sits on nu_c."""
    return step.nu_c_hz - (n_bins // 2) * bin_width_hz


def hypothesis_in_band(
    step,
    hypothesis,
    *,
    bin_width_hz=DEFAULT_BIN_WIDTH_HZ,
    n_bins=DEFAULT_N_BINS,
    lineshape=None,
):
    ls = lineshape if lineshape is not None else LineshapeParams(bin_width_hz=bin_width_hz)
    start = band_start(step, bin_width_hz, n_bins)
    margin = ls.span_bins * bin_width_hz
    return start - margin <= hypothesis.nu_a_hz <= start + (n_bins - 1) * bin_width_hz + margin


def draw_step_effects(
    master_seed,
    step_id,
    receiver,
    *,
    anomaly_rate=0.0,
    anomaly_types=ANOMALY_TYPES,
    n_bins=DEFAULT_N_BINS,
    salt=0,
):
    """Per-step measured diagnostics plus an optional injected anomaly.

    Returns (effective receiver, metadata dict, psd spike or None).  The
    metadata carries only quantities a real acquisition would log (drift,
    squeezing level, probe power) plus a truth tag for bookkeeping; cut
    logic must key on the measured values, never on the tag.
    """
    rng = np.random.default_rng(derive_seed(master_seed, STREAM_ANOMALY, step_id, salt))
    drift_hz = abs(rng.normal(0.0, 1.0e3))
    delivered = receiver.delivered
    squeezing_db = -10.0 * math.log10(delivered) + rng.normal(0.0, 0.1)
    probe_power = rng.normal(1.0, 0.02)
    effective = receiver
    spike = None
    kind = "none"
    if anomaly_rate > 0.0 and rng.random() < anomaly_rate:
        usable = [t for t in anomaly_types if t != "jpa_sag" or delivered < 1.0]
        if usable:
            kind = usable[int(rng.integers(len(usable)))]
    if kind == "drift":
        drift_hz = rng.uniform(1.0e5, 3.0e5)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        effective = dataclasses.replace(receiver, nu_c=receiver.nu_c + sign * drift_hz)
    elif kind == "jpa_sag":
        sagged = delivered + rng.uniform(0.4, 0.7) * (1.0 - delivered)
        g_s_eff = (sagged - (1.0 - receiver.eta)) / receiver.eta
        effective = dataclasses.replace(receiver, g_s=g_s_eff)
        squeezing_db = -10.0 * math.log10(sagged) + rng.normal(0.0, 0.1)
    elif kind == "probe":
        probe_power = rng.uniform(2.0, 5.0)
        spike = (int(rng.integers(n_bins)), 3.0 * probe_power)
    metadata = {
        "freq_drift_hz": drift_hz,
        "squeezing_db": squeezing_db,
        "probe_power": probe_power,
        "truth_anomaly": kind,
    }
    return effective, metadata, spike


def simulate_spectrum(
    step,
    receiver,
    baseline_model,
    seed,
    *,
    hypotheses=None,
    lineshape=None,
    tau_s=DEFAULT_TAU_S,
    bin_width_hz=DEFAULT_BIN_WIDTH_HZ,
    n_bins=DEFAULT_N_BINS,
    metadata=None,
    spike=None,
):
    """One averaged power spectrum for a tuning step.

    psd = gain * baseline * (noise(delta) + signal) * (1 + eps) with eps
    i.i.d. zero-mean, std 1/sqrt(n_averages).  The band grid is fixed by
    the step's nominal center; detunings use receiver.nu_c, so a receiver
    whose resonance drifted produces a visibly shifted Lorentzian on an
    unmoved grid.
    """
    db = float(bin_width_hz)
    ls = lineshape if lineshape is not None else LineshapeParams(bin_width_hz=db)
    n_averages = max(1, int(round(tau_s * db)))
    nu_start = band_start(step, db, n_bins)
    freqs = nu_start + np.arange(n_bins) * db
    delta = freqs - receiver.nu_c
    budget = noise_budget(receiver, delta)
    total = budget.total

    signal = np.zeros(n_bins)
    if hypotheses is not None:
        hyps = hypotheses if isinstance(hypotheses, (list, tuple)) else (hypotheses,)
        for hyp in hyps:
            if not hypothesis_in_band(
                step, hyp, bin_width_hz=db, n_bins=n_bins, lineshape=ls
            ):
                raise ConfigError(
                    f"hypothesis at {hyp.nu_a_hz} Hz outside band of step {step.step_id}"
                )
            signal += bin_signal(nu_start, n_bins, hyp, receiver, ls, tau_s=tau_s)

    base = baseline_model.evaluate(step.step_id, n_bins)
    psd_true = base * (total + signal)
    if spike is not None:
        center, amplitude = spike
        lo = max(0, center - 1)
        hi = min(n_bins, center + 2)
        psd_true[lo:hi] += amplitude * base[lo:hi] * total[lo:hi]

    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(n_bins) / math.sqrt(n_averages)
    psd = receiver.gain * psd_true * (1.0 + eps)

    meta = {
        "beta": receiver.beta,
        "q_loaded": receiver.nu_c / receiver.kappa,
        "nu_c_hz": step.nu_c_hz,
        "t_acq_s": step.step_id * tau_s,
    }
    if metadata:
        meta.update(metadata)
    return RawSpectrum(
        step_id=step.step_id,
        nu_start_hz=nu_start,
        bin_width_hz=db,
        psd=psd,
        n_averages=n_averages,
        metadata=meta,
    )


def simulate_spectrum_literal(
    step,
    receiver,
    baseline_model,
    seed,
    *,
    hypotheses=None,
    lineshape=None,
    n_segments=1000,
    bin_width_hz=DEFAULT_BIN_WIDTH_HZ,
    n_bins=4096,
):
    """Segment-by-segment validation path for simulate_spectrum.

    Builds each segment's complex baseband trace from the true PSD, takes
    its periodogram, and averages.  Identical mean to the fast path but
    with the exact finite-average (chi-squared) bin statistics; run at
    reduced n_segments, it validates the 1/sqrt(n) fluctuation shortcut.
    """
    if n_segments < 2:
        raise ConfigError("literal mode needs n_segments >= 2")
    db = float(bin_width_hz)
    ls = lineshape if lineshape is not None else LineshapeParams(bin_width_hz=db)
    nu_start = band_start(step, db, n_bins)
    freqs = nu_start + np.arange(n_bins) * db
    delta = freqs - receiver.nu_c
    total = noise_budget(receiver, delta).total
    signal = np.zeros(n_bins)
    if hypotheses is not None:
        hyps = hypotheses if isinstance(hypotheses, (list, tuple)) else (hypotheses,)
        for hyp in hyps:
            signal += bin_signal(nu_start, n_bins, hyp, receiver, ls, tau_s=n_segments / db)
    psd_true = receiver.gain * baseline_model.evaluate(step.step_id, n_bins) * (total + signal)

    rng = np.random.default_rng(seed)
    scale = np.sqrt(psd_true / 2.0)
    acc = np.zeros(n_bins)
    for _ in range(n_segments):
        coeff = scale * (
            rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
        )
        trace = np.fft.ifft(coeff) * n_bins
        periodogram = np.abs(np.fft.fft(trace) / n_bins) ** 2
        acc += periodogram
    psd = acc / n_segments
    return RawSpectrum(
        step_id=step.step_id,
        nu_start_hz=nu_start,
        bin_width_hz=db,
        psd=psd,
        n_averages=n_segments,
        metadata={"beta": receiver.beta, "nu_c_hz": step.nu_c_hz, "literal_mode": True},
    )


def simulate_calibration(
    step,
    receiver,
    seed,
    *,
    t_hot_k=0.333,
    t_cold_k=0.061,
    tau_s=DEFAULT_TAU_S,
    bin_width_hz=DEFAULT_BIN_WIDTH_HZ,
    n_bins=DEFAULT_N_BINS,
):
    """Five-spectrum calibration block at a tuning step.

    meas1 is taken far detuned (full reflection, squeezer off), meas2 and
    meas3 on resonance with the squeezer on and off, hot and cold replace
    the cavity path with matched loads.  Calibration spectra carry no
    campaign baseline structure, only the chain gain; a real calibration
    normalizes its own short path.
    """
    if t_hot_k <= t_cold_k:
        raise ConfigError(
            f"hot load must be hotter than cold load, got {t_hot_k!r} <= {t_cold_k!r}"
        )
    db = float(bin_width_hz)
    n_averages = max(1, int(round(tau_s * db)))
    nu_start = band_start(step, db, n_bins)
    freqs = nu_start + np.arange(n_bins) * db
    delta = freqs - receiver.nu_c
    refl = cavity_reflectance(delta, receiver.kappa_l, receiver.beta)
    absorbed = 1.0 - refl

    s_on = receiver.delivered
    totals = {
        "meas1": np.full(n_bins, receiver.n_f + receiver.n_a),
        "meas2": receiver.n_c0 * absorbed + s_on * receiver.n_f * refl + receiver.n_a,
        "meas3": receiver.n_c0 * absorbed + receiver.n_f * refl + receiver.n_a,
        "hot": thermal_quanta(freqs, t_hot_k) + receiver.n_a,
        "cold": thermal_quanta(freqs, t_cold_k) + receiver.n_a,
    }
    role_meta = {
        "meas1": {"role": "meas1", "squeezer_on": False, "detuned": True},
        "meas2": {"role": "meas2", "squeezer_on": True, "detuned": False},
        "meas3": {"role": "meas3", "squeezer_on": False, "detuned": False},
        "hot": {"role": "hot", "squeezer_on": False, "load_temp_k": t_hot_k},
        "cold": {"role": "cold", "squeezer_on": False, "load_temp_k": t_cold_k},
    }
    rng = np.random.default_rng(seed)
    spectra = {}
    for role in CalibrationSet.ROLES:
        eps = rng.standard_normal(n_bins) / math.sqrt(n_averages)
        psd = receiver.gain * totals[role] * (1.0 + eps)
        meta = {"beta": receiver.beta, "nu_c_hz": step.nu_c_hz}
        meta.update(role_meta[role])
        spectra[role] = RawSpectrum(
            step_id=step.step_id,
            nu_start_hz=nu_start,
            bin_width_hz=db,
            psd=psd,
            n_averages=n_averages,
            metadata=meta,
        )
    return CalibrationSet(
        step_id=step.step_id, t_hot_k=t_hot_k, t_cold_k=t_cold_k, **spectra
    )


def simulate_campaign(
    plan,
    receiver,
    baseline_model,
    *,
    hypotheses=(),
    lineshape=None,
    tau_s=DEFAULT_TAU_S,
    bin_width_hz=DEFAULT_BIN_WIDTH_HZ,
    n_bins=DEFAULT_N_BINS,
    anomaly_rate=0.0,
    anomaly_types=ANOMALY_TYPES,
    cal_every=9,
    t_hot_k=0.333,
    t_cold_k=0.061,
    threads=1,
):
    """Simulate every step of a plan; returns (spectra, calibration sets).

    Calibrations are taken every cal_every steps under nominal conditions
    (anomalies perturb science spectra only).  Parallel across steps;
    results are ordered and seeded by step_id, independent of scheduling.
    """
    if cal_every < 1:
        raise ConfigError(f"cal_every must be >= 1, got {cal_every!r}")
    ls = lineshape if lineshape is not None else LineshapeParams(bin_width_hz=bin_width_hz)

    def one_step(step):
        nominal = dataclasses.replace(receiver, nu_c=step.nu_c_hz, beta=step.beta)
        effective, diag, spike = draw_step_effects(
            plan.master_seed,
            step.step_id,
            nominal,
            anomaly_rate=anomaly_rate,
            anomaly_types=anomaly_types,
            n_bins=n_bins,
        )
        in_band = [
            h
            for h in hypotheses
            if hypothesis_in_band(step, h, bin_width_hz=bin_width_hz, n_bins=n_bins, lineshape=ls)
        ]
        spectrum = simulate_spectrum(
            step,
            effective,
            baseline_model,
            step.seed,
            hypotheses=in_band,
            lineshape=ls,
            tau_s=tau_s,
            bin_width_hz=bin_width_hz,
            n_bins=n_bins,
            metadata=diag,
            spike=spike,
        )
        calset = None
        if step.step_id % cal_every == 0:
            calset = simulate_calibration(
                step,
                nominal,
                derive_seed(plan.master_seed, STREAM_CALIBRATION, step.step_id),
                t_hot_k=t_hot_k,
                t_cold_k=t_cold_k,
                tau_s=tau_s,
                bin_width_hz=bin_width_hz,
                n_bins=n_bins,
            )
        return spectrum, calset

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_step, plan.steps))
    else:
        results = [one_step(step) for step in plan.steps]
    spectra = [spectrum for spectrum, _ in results]
    calsets = [calset for _, calset in results if calset is not None]
    return spectra, calsets


def rescan_steps(plan, frequencies):
    """Unique tuning steps responsible for a list of candidate frequencies."""
    chosen = {}
    for freq in frequencies:
        step = plan.nearest_step(freq)
        chosen[step.step_id] = step
    return [chosen[k] for k in sorted(chosen)]


def simulate_rescans(
    plan,
    steps,
    receiver,
    baseline_model,
    *,
    hypotheses=(),
    lineshape=None,
    tau_s=DEFAULT_TAU_S,
    bin_width_hz=DEFAULT_BIN_WIDTH_HZ,
    n_bins=DEFAULT_N_BINS,
    threads=1,
):
    """Re-acquire a subset of steps with fresh noise, no anomalies.

    Durations match the initial scan.  A persistent hypothesis appears in
    both passes; a statistical excess does not.
    """
    ls = lineshape if lineshape is not None else LineshapeParams(bin_width_hz=bin_width_hz)

    def one_step(item):
        order, step = item
        nominal = dataclasses.replace(receiver, nu_c=step.nu_c_hz, beta=step.beta)
        _, diag, _ = draw_step_effects(
            plan.master_seed, step.step_id, nominal, anomaly_rate=0.0, salt=1
        )
        diag["rescan"] = True
        in_band = [
            h
            for h in hypotheses
            if hypothesis_in_band(step, h, bin_width_hz=bin_width_hz, n_bins=n_bins, lineshape=ls)
        ]
        spectrum = simulate_spectrum(
            step,
            nominal,
            baseline_model,
            derive_seed(plan.master_seed, STREAM_RESCAN, step.step_id),
            hypotheses=in_band,
            lineshape=ls,
            tau_s=tau_s,
            bin_width_hz=bin_width_hz,
            n_bins=n_bins,
            metadata=diag,
        )
        spectrum.metadata["t_acq_s"] = (plan.n_steps + order) * tau_s
        return spectrum

    items = list(enumerate(steps))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one_step, items))
    return [one_step(item) for item in items]
