"""Raw spectra to standardized grand spectrum.

Stages: metadata cuts, two-stage Savitzky-Golay structure removal,
maximum-likelihood combination onto the RF grid, lineshape-matched
coadding, rescan flagging.

The statistics here are deliberate.  Dividing out a fitted baseline
correlates neighboring bins (the smoother's kernel h obeys
(h*h)(0) = h(0), so each stage removes a little variance and spreads
negative covariance over its window).  A matched-filter sum over those
bins would come out with variance well below 1 if standardized naively.
remove_structure therefore measures the exact post-filter lag
autocovariance from its own kernels, and coadd_grand standardizes with
it.  Cross-spectrum covariance through the shared stage-1 average enters
at O(1/n_spectra) with exponentially small kernel weights at the
relevant lags and is dropped.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_coeffs, savgol_filter

from .axion import AxionHypothesis, canonical_kernel, reference_amplitude
from .calibration import assign_calibrations
from .errors import ConfigError, DataError
from .receiver import cavity_absorption, noise_budget


@dataclass(frozen=True)
class CutCriteria:
    """Thresholds on per-spectrum diagnostics; None disables a rule."""

    drift_hz_max: float = 20e3
    squeezing_db_min: float = None
    probe_power_lo: float = 0.5
    probe_power_hi: float = 1.5


@dataclass(frozen=True)
class ProcessSettings:
    """Two-stage Savitzky-Golay chain plus rescan policy.

    Default RF window is sized for the production 30000-bin band: wide
    enough to spare the ~100-bin signal template (<10% attenuation at
    full campaign depth), narrow enough to follow per-step baseline
    structure, whose shortest component spans n_bins/6.  Bands much
    smaller than the default need a proportionally smaller RF window.
    """

    if_window_bins: int = 101
    if_order: int = 4
    rf_window_bins: int = 1001
    rf_order: int = 2
    rescan_threshold_sigma: float = 3.455
    merge_width_bins: int = 90
    cuts: CutCriteria = field(default_factory=CutCriteria)

    def __post_init__(self):
        for window, order, tag in (
            (self.if_window_bins, self.if_order, "if"),
            (self.rf_window_bins, self.rf_order, "rf"),
        ):
            if window % 2 != 1 or window < 3:
                raise ConfigError(f"{tag} filter window must be odd and >= 3, got {window}")
            if not 0 <= order < window:
                raise ConfigError(f"{tag} filter order {order} invalid for window {window}")
        if self.rescan_threshold_sigma <= 0:
            raise ConfigError("rescan threshold must be > 0")
        if self.merge_width_bins < 1:
            raise ConfigError("merge width must be >= 1 bin")


@dataclass
class CutLog:
    kept_ids: tuple
    cut: dict  # step_id -> reason

    @property
    def n_cut(self):
        return len(self.cut)

    def to_dict(self):
        return {
            "kept_ids": list(self.kept_ids),
            "cut": {str(k): v for k, v in sorted(self.cut.items())},
            "n_kept": len(self.kept_ids),
            "n_cut": self.n_cut,
        }


@dataclass
class ProcessedSpectrum:
    """Dimensionless per-bin excess for one step, mean 0 under null."""

    step_id: int
    nu_start_hz: float
    bin_width_hz: float
    excess: np.ndarray
    sigma: float
    valid: np.ndarray
    n_averages: int
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FilterReport:
    """Everything downstream needs to know about the structure removal.

    gamma is the lag autocovariance of the processed excess in units of
    the raw radiometer variance, gamma[0] slightly below 1.  t_signal is
    the matched-projection survival of an axion-shaped excess through
    both stages, wide_suppression the same for 100 kHz structure.
    kernel is the template the transfer was measured with; the coadd must
    reuse it so attenuation enters the sensitivity exactly once.
    """

    if_window_bins: int
    if_order: int
    rf_window_bins: int
    rf_order: int
    n_spectra: int
    t_signal: float
    wide_suppression: float
    gamma: np.ndarray
    kernel: np.ndarray


@dataclass
class CombinedSpectrum:
    """Information-weighted accumulation on the common RF grid.

    num[i] = sum_s a_s(i) e_s(i) / var_s and den[i] = sum_s a_s(i)^2 / var_s
    with a_s the per-bin expected fractional excess of a g = 1 axion
    centered there.  The amplitude estimate is num/den with standard
    deviation 1/sqrt(den); den = 0 marks a bin with no coverage.
    """

    rf_start_hz: float
    bin_width_hz: float
    num: np.ndarray
    den: np.ndarray
    n_contrib: np.ndarray

    @property
    def frequencies(self):
        return self.rf_start_hz + np.arange(self.num.size) * self.bin_width_hz

    def amplitude(self):
        out = np.zeros_like(self.num)
        mask = self.den > 0
        out[mask] = self.num[mask] / self.den[mask]
        return out

    def sigma(self):
        out = np.full_like(self.num, np.inf)
        mask = self.den > 0
        out[mask] = 1.0 / np.sqrt(self.den[mask])
        return out


@dataclass
class GrandSpectrum:
    """Standardized excess x (unit variance under null) and per-bin
    sensitivity eta_sens: an axion at coupling g gives E[x] = g^2 * eta_sens."""

    rf_start_hz: float
    bin_width_hz: float
    x: np.ndarray
    eta_sens: np.ndarray
    n_contrib: np.ndarray
    support: np.ndarray
    valid: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def frequencies(self):
        return self.rf_start_hz + np.arange(self.x.size) * self.bin_width_hz


@dataclass(frozen=True)
class RescanCandidate:
    nu_hz: float
    rf_index: int
    significance: float
    n_merged: int


@dataclass
class RescanList:
    threshold_sigma: float
    candidates: tuple

    def to_dict(self):
        return {
            "threshold_sigma": self.threshold_sigma,
            "candidates": [
                {
                    "nu_hz": c.nu_hz,
                    "rf_index": c.rf_index,
                    "significance": c.significance,
                    "n_merged": c.n_merged,
                }
                for c in self.candidates
            ],
        }


def apply_cuts(spectra, criteria):
    """Partition spectra by the diagnostic thresholds; first rule wins.

    Spectra lacking a diagnostic pass that rule; cuts act only on
    measured metadata, never on simulation truth tags.
    """
    kept = []
    cut = {}
    for spectrum in spectra:
        meta = spectrum.metadata
        reason = None
        drift = meta.get("freq_drift_hz")
        if drift is not None and abs(drift) > criteria.drift_hz_max:
            reason = "drift"
        if reason is None and criteria.squeezing_db_min is not None:
            sq = meta.get("squeezing_db")
            if sq is not None and sq < criteria.squeezing_db_min:
                reason = "squeezing"
        if reason is None:
            probe = meta.get("probe_power")
            if probe is not None and not (
                criteria.probe_power_lo <= probe <= criteria.probe_power_hi
            ):
                reason = "probe"
        if reason is None:
            kept.append(spectrum)
        else:
            cut[spectrum.step_id] = reason
    return kept, CutLog(kept_ids=tuple(s.step_id for s in kept), cut=cut)


def _delta_minus(kernel):
    out = -np.asarray(kernel, dtype=float)
    out[len(out) // 2] += 1.0
    return out


def _lag_autocovariance(h1, h2, n_spectra):
    """Exact lag autocovariance of (I-H2)(eps - H1 avg(eps)), sigma^2 = 1.

    Own-noise kernel k = (d-h2)*(d-h1/M); the shared average injects the
    other spectra's noise through g = (d-h2)*h1 at weight 1/M each.
    """
    m = n_spectra
    k = np.convolve(_delta_minus(h2), _delta_minus(h1 / m))
    g = np.convolve(_delta_minus(h2), h1)
    kk = np.correlate(k, k, mode="full")
    gg = np.correlate(g, g, mode="full")
    center = k.size - 1
    gamma = kk[center:] + ((m - 1) / m**2) * gg[center:]
    return gamma


def measure_filter_transfer(settings, lineshape, n_spectra, n_bins, *, nu_ref_hz):
    """Filter characterization by synthetic injection through the real path.

    A small axion-shaped bump rides one flat spectrum of n_spectra; the
    stage-1 average therefore sees it diluted by 1/n_spectra, exactly as
    in campaign processing.  Transfer is the matched projection of the
    processed excess onto the injected shape.  The same path measures the
    survival of 100 kHz-wide structure, which must be strongly suppressed.
    """
    if settings.rf_window_bins >= n_bins or settings.if_window_bins >= n_bins:
        raise ConfigError("filter window exceeds the analysis band")
    m = n_spectra
    weights = canonical_kernel(nu_ref_hz, lineshape)

    def run(shape):
        amp = 1e-3
        bumped = 1.0 + amp * shape
        avg = 1.0 + amp * shape / m
        b1 = savgol_filter(avg, settings.if_window_bins, settings.if_order)
        r = bumped / b1
        b2 = savgol_filter(r, settings.rf_window_bins, settings.rf_order)
        out = r / b2 - 1.0
        return float(np.dot(out, amp * shape) / np.dot(amp * shape, amp * shape))

    signal_shape = np.zeros(n_bins)
    start = n_bins // 2
    signal_shape[start : start + weights.size] = weights / weights.max()

    wide_bins = int(round(100e3 / lineshape.bin_width_hz))
    sigma_bins = wide_bins / 2.3548  # FWHM to Gaussian sigma
    grid = np.arange(n_bins)
    wide_shape = np.exp(-0.5 * ((grid - n_bins / 2) / sigma_bins) ** 2)

    t_signal = run(signal_shape)
    wide = run(wide_shape)
    h1 = savgol_coeffs(settings.if_window_bins, settings.if_order)
    h2 = savgol_coeffs(settings.rf_window_bins, settings.rf_order)
    gamma = _lag_autocovariance(h1, h2, m)
    return FilterReport(
        if_window_bins=settings.if_window_bins,
        if_order=settings.if_order,
        rf_window_bins=settings.rf_window_bins,
        rf_order=settings.rf_order,
        n_spectra=m,
        t_signal=t_signal,
        wide_suppression=wide,
        gamma=gamma,
        kernel=weights,
    )


def remove_structure(spectra, settings, lineshape, *, threads=1):
    """Two-stage structure removal; returns (processed list, FilterReport).

    Stage 1 fits the shared IF shape on the average of the mean-normalized
    spectra and divides it out of each one; stage 2 fits and divides each
    spectrum's own residual baseline.  Edge bins inside half a filter
    window are marked invalid rather than edge-corrected, trading ~1% of
    band for exact interior statistics.
    """
    if not spectra:
        raise DataError("no spectra to process; empty campaign")
    n_bins = spectra[0].n_bins
    db = spectra[0].bin_width_hz
    for s in spectra:
        if s.n_bins != n_bins or s.bin_width_hz != db:
            raise DataError("spectra disagree on the IF grid")
    if settings.rf_window_bins >= n_bins or settings.if_window_bins >= n_bins:
        raise ConfigError("filter window exceeds the analysis band")

    m = len(spectra)
    normalized = [s.psd / s.psd.mean() for s in spectra]
    avg = np.mean(normalized, axis=0)
    b1 = savgol_filter(avg, settings.if_window_bins, settings.if_order)

    centers = [
        float(s.metadata.get("nu_c_hz") or (s.nu_start_hz + 0.5 * n_bins * db))
        for s in spectra
    ]
    report = measure_filter_transfer(
        settings, lineshape, m, n_bins, nu_ref_hz=float(np.median(centers))
    )
    gamma0 = float(report.gamma[0])
    trim = max(settings.if_window_bins, settings.rf_window_bins) // 2
    valid_template = np.zeros(n_bins, dtype=bool)
    valid_template[trim : n_bins - trim] = True
    provenance = {
        "if_window_bins": settings.if_window_bins,
        "if_order": settings.if_order,
        "rf_window_bins": settings.rf_window_bins,
        "rf_order": settings.rf_order,
    }

    def one(index):
        r = normalized[index] / b1
        b2 = savgol_filter(r, settings.rf_window_bins, settings.rf_order)
        excess = r / b2 - 1.0
        s = spectra[index]
        return ProcessedSpectrum(
            step_id=s.step_id,
            nu_start_hz=s.nu_start_hz,
            bin_width_hz=db,
            excess=excess,
            sigma=math.sqrt(gamma0 / s.n_averages),
            valid=valid_template.copy(),
            n_averages=s.n_averages,
            metadata=dict(provenance, **{"nu_c_hz": s.metadata.get("nu_c_hz")}),
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            processed = list(pool.map(one, range(m)))
    else:
        processed = [one(i) for i in range(m)]
    return processed, report


def _signal_coefficient(spectrum, cal, geometry, lineshape, tau_s, snr_ref):
    """Per-bin expected fractional excess of a g = 1 axion, from the
    measured calibration rather than simulation truth."""
    meta = spectrum.metadata
    nu_c = float(meta.get("nu_c_hz", spectrum.nu_start_hz))
    beta = float(meta.get("beta", geometry.beta))
    g_s = max(0.0, (cal.s_hat - (1.0 - geometry.eta)) / geometry.eta)
    receiver = dataclasses.replace(
        geometry,
        nu_c=nu_c,
        beta=beta,
        n_c0=max(cal.n_c0_hat, 0.25),
        n_a=cal.n_a_hat,
        g_s=g_s,
    )
    hyp = AxionHypothesis(nu_a_hz=nu_c, g_ksvz=1.0, snr_ref=snr_ref)
    a_ref = reference_amplitude(hyp, receiver, lineshape, tau_s=tau_s)
    freqs = spectrum.nu_start_hz + np.arange(spectrum.excess.size) * spectrum.bin_width_hz
    delta = freqs - receiver.nu_c
    budget = noise_budget(receiver, delta)
    absorbed = cavity_absorption(delta, receiver.kappa_l, receiver.beta)
    return a_ref * absorbed / (spectrum.bin_width_hz * budget.total)


def combine_spectra(processed, cal_results, geometry, lineshape, *, tau_s, snr_ref=1.0):
    """Maximum-likelihood combination onto the common 100 Hz RF grid.

    Each spectrum contributes to a bin with weight (per-bin SNR)^2, so
    between two spectra with 2:1 amplitude response the weights are 4:1.
    """
    if not processed:
        raise DataError("nothing to combine")
    db = processed[0].bin_width_hz
    starts = [p.nu_start_hz for p in processed]
    rf_start = min(starts)
    offsets = []
    for p in processed:
        off = (p.nu_start_hz - rf_start) / db
        if abs(off - round(off)) > 1e-6:
            raise DataError(
                f"step {p.step_id}: band start not on the common {db} Hz lattice"
            )
        offsets.append(int(round(off)))
    n_rf = max(off + p.excess.size for off, p in zip(offsets, processed))

    num = np.zeros(n_rf)
    den = np.zeros(n_rf)
    n_contrib = np.zeros(n_rf, dtype=np.int32)
    cal_map = assign_calibrations([p.step_id for p in processed], cal_results)
    for p, off in zip(processed, offsets):
        cal = cal_map[p.step_id]
        a = _signal_coefficient(p, cal, geometry, lineshape, tau_s, snr_ref)
        var = p.sigma**2
        sel = p.valid
        num_view = num[off : off + p.excess.size]
        den_view = den[off : off + p.excess.size]
        contrib_view = n_contrib[off : off + p.excess.size]
        num_view[sel] += a[sel] * p.excess[sel] / var
        den_view[sel] += a[sel] ** 2 / var
        contrib_view[sel] += 1
    return CombinedSpectrum(
        rf_start_hz=rf_start, bin_width_hz=db, num=num, den=den, n_contrib=n_contrib
    )


def coadd_grand(combined, report, *, min_support=0.999):
    """Matched-filter coadd over the lineshape span at every RF bin.

    x_q = sum_k w_k num_{q+k}, standardized by the filtered-noise
    covariance: Var = Lambda * sum_k w_k^2 den_{q+k} / ||w||^2 with
    Lambda = w^T P w and P the normalized lag-covariance Toeplitz form.
    The kernel comes from the filter report, so the coadd template and
    the measured attenuation refer to the same shape.  Bins whose kernel
    weight falls partly on uncovered bins keep their standardized x but
    are flagged (support < min_support).
    """
    w = report.kernel
    span = w.size
    n_rf = combined.num.size
    if span >= n_rf:
        raise DataError("lineshape span exceeds the combined band")

    rho = report.gamma / report.gamma[0]
    wac = np.correlate(w, w, mode="full")  # lags -(span-1)..span-1
    lags = np.abs(np.arange(-(span - 1), span))
    rho_at = np.zeros(lags.shape)
    inside = lags < rho.size
    rho_at[inside] = rho[lags[inside]]
    w_norm2 = float(wac[span - 1])
    lam = float(np.sum(wac * rho_at))

    pad = np.zeros(span - 1)
    num_p = np.concatenate([combined.num, pad])
    den_p = np.concatenate([combined.den, pad])
    cover_p = np.concatenate([(combined.den > 0).astype(float), pad])

    raw = np.correlate(num_p, w, mode="valid")
    w2d = np.correlate(den_p, w**2, mode="valid")
    support = np.correlate(cover_p, w, mode="valid") / w.sum()

    var = lam * w2d / w_norm2
    ok = var > 0
    x = np.zeros(n_rf)
    eta = np.zeros(n_rf)
    x[ok] = raw[ok] / np.sqrt(var[ok])
    eta[ok] = report.t_signal * np.sqrt(w2d[ok] * w_norm2 / lam)
    return GrandSpectrum(
        rf_start_hz=combined.rf_start_hz,
        bin_width_hz=combined.bin_width_hz,
        x=x,
        eta_sens=eta,
        n_contrib=combined.n_contrib.copy(),
        support=support,
        valid=ok & (support >= min_support),
        metadata={},
    )


def flag_rescans(grand, threshold_sigma, merge_width_bins):
    """Bins at or above threshold, merged within one lineshape width,
    highest significance first."""
    mask = (grand.x >= threshold_sigma) & (grand.eta_sens > 0)
    hits = np.flatnonzero(mask)
    candidates = []
    if hits.size:
        group = [hits[0]]
        for idx in hits[1:]:
            if idx - group[-1] <= merge_width_bins:
                group.append(idx)
            else:
                candidates.append(group)
                group = [idx]
        candidates.append(group)
    out = []
    for group in candidates:
        arr = np.asarray(group)
        best = int(arr[np.argmax(grand.x[arr])])
        out.append(
            RescanCandidate(
                nu_hz=float(grand.rf_start_hz + best * grand.bin_width_hz),
                rf_index=best,
                significance=float(grand.x[best]),
                n_merged=len(group),
            )
        )
    out.sort(key=lambda c: -c.significance)
    return RescanList(threshold_sigma=threshold_sigma, candidates=tuple(out))


def check_persistence(candidates, rescan_grand, threshold_sigma, merge_width_bins):
    """Confront first-pass candidates with the follow-up grand spectrum.

    A candidate persists when any valid follow-up bin within one merge
    width of its frequency reaches the threshold again.  Returns one
    record per candidate.
    """
    records = []
    for cand in candidates:
        center = int(
            round((cand.nu_hz - rescan_grand.rf_start_hz) / rescan_grand.bin_width_hz)
        )
        lo = max(center - merge_width_bins, 0)
        hi = min(center + merge_width_bins + 1, rescan_grand.x.size)
        window = slice(lo, hi)
        usable = rescan_grand.valid[window]
        if lo >= hi or not np.any(usable):
            records.append(
                {
                    "nu_hz": cand.nu_hz,
                    "significance_initial": cand.significance,
                    "significance_rescan": None,
                    "persisted": False,
                    "covered": False,
                }
            )
            continue
        best = float(np.max(rescan_grand.x[window][usable]))
        records.append(
            {
                "nu_hz": cand.nu_hz,
                "significance_initial": cand.significance,
                "significance_rescan": best,
                "persisted": bool(best >= threshold_sigma),
                "covered": True,
            }
        )
    return records


def process_group(spectra, cal_results, geometry, lineshape, settings, *, tau_s, snr_ref=1.0, threads=1):
    """Structure removal, combination and coadd for one group of spectra."""
    processed, report = remove_structure(spectra, settings, lineshape, threads=threads)
    combined = combine_spectra(
        processed, cal_results, geometry, lineshape, tau_s=tau_s, snr_ref=snr_ref
    )
    grand = coadd_grand(combined, report)
    return grand, combined, processed, report


@dataclass
class ProcessOutput:
    grand: GrandSpectrum
    combined: CombinedSpectrum
    processed: list
    filter_report: FilterReport
    cut_log: CutLog
    rescans: RescanList


def process_campaign(spectra, cal_results, geometry, lineshape, settings, *, tau_s, snr_ref=1.0, threads=1):
    kept, cut_log = apply_cuts(spectra, settings.cuts)
    if not kept:
        raise DataError("all spectra were cut; empty campaign")
    grand, combined, processed, report = process_group(
        kept, cal_results, geometry, lineshape, settings,
        tau_s=tau_s, snr_ref=snr_ref, threads=threads,
    )
    rescans = flag_rescans(
        grand, settings.rescan_threshold_sigma, settings.merge_width_bins
    )
    return ProcessOutput(
        grand=grand,
        combined=combined,
        processed=processed,
        filter_report=report,
        cut_log=cut_log,
        rescans=rescans,
    )


GRAND_MAGIC = "haloscan-grand"
GRAND_VERSION = 1


def write_grand_spectrum(grand, path):
    """Columnar grand-spectrum file: header lines then
    nu_hz x eta_sens n_contrib support rows."""
    lines = [f"{GRAND_MAGIC} v{GRAND_VERSION}\n"]
    header = {
        "rf_start_hz": grand.rf_start_hz,
        "bin_width_hz": grand.bin_width_hz,
        "n_bins": grand.x.size,
    }
    for key, value in header.items():
        lines.append(f"# {key} {value!r}\n")
    for key in sorted(grand.metadata):
        lines.append(f"# {key} {grand.metadata[key]}\n")
    freqs = grand.frequencies
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.writelines(lines)
        for i in range(grand.x.size):
            fh.write(
                f"{freqs[i]:.1f} {float(grand.x[i])!r} {float(grand.eta_sens[i])!r} "
                f"{int(grand.n_contrib[i])} {grand.support[i]:.6f}\n"
            )
    os.replace(tmp, path)


def read_grand_spectrum(path):
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot open grand spectrum: {exc}") from exc
    with fh:
        magic = fh.readline().strip()
        if not magic.startswith(GRAND_MAGIC):
            raise DataError(f"{path}: not a grand spectrum file")
        if magic[len(GRAND_MAGIC):].strip() != f"v{GRAND_VERSION}":
            raise DataError(f"{path}: unsupported version")
        header = {}
        pos = fh.tell()
        while True:
            line = fh.readline()
            if not line.startswith("#"):
                break
            key, value = line[1:].strip().split(" ", 1)
            header[key] = value
            pos = fh.tell()
        fh.seek(pos)
        try:
            data = np.loadtxt(fh, ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: malformed rows: {exc}") from exc
    if data.shape[1] != 5:
        raise DataError(f"{path}: expected 5 columns, got {data.shape[1]}")
    try:
        rf_start = float(header["rf_start_hz"])
        db = float(header["bin_width_hz"])
        n = int(header["n_bins"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad header: {exc}") from exc
    if n != data.shape[0]:
        raise DataError(f"{path}: header declares {n} rows, file holds {data.shape[0]}")
    support = data[:, 4]
    grand = GrandSpectrum(
        rf_start_hz=rf_start,
        bin_width_hz=db,
        x=data[:, 1],
        eta_sens=data[:, 2],
        n_contrib=data[:, 3].astype(np.int32),
        support=support,
        valid=(data[:, 2] > 0) & (support >= 0.999),
        metadata={
            k: v
            for k, v in header.items()
            if k not in ("rf_start_hz", "bin_width_hz", "n_bins")
        },
    )
    return grand


def write_json(payload, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
