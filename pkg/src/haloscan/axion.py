"""Axion signal model: virialized lineshape and delivered signal spectrum.

A galactic-halo axion converts to photons at rest-mass frequency nu_a plus
a Doppler kinetic-energy tail.  For a Maxwellian velocity distribution with
mean-square velocity <v^2> the photon-frequency density is

    f(nu) = (2/sqrt(pi)) s^(-3/2) sqrt(nu - nu_a) exp(-(nu - nu_a)/s),
    s = nu_a <v^2> / (3 c^2),   nu >= nu_a,

a Gamma(3/2) shape about 9 kHz wide at 4 GHz for the standard 270 km/s rms
halo.  Couplings are expressed in KSVZ units throughout (g_ksvz = 1 is the
benchmark model coupling at that mass).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import constants
from scipy.special import gammainc

from .errors import ConfigError
from .receiver import cavity_absorption, noise_budget

# Discrete kernels must capture at least this fraction of the signal power.
MIN_KERNEL_COVERAGE = 0.999


@dataclass(frozen=True)
class LineshapeParams:
    """Discretization of the virialized lineshape.

    Attributes
    ----------
    velocity_dispersion_kms : float
        RMS halo velocity sqrt(<v^2>) in km/s.  270 is the standard
        isothermal-halo value.
    bin_width_hz : float
        Analysis bin width, Hz.
    span_bins : int
        Number of bins the discrete kernel covers.
    """

    velocity_dispersion_kms: float = 270.0
    bin_width_hz: float = 100.0
    span_bins: int = 512

    def __post_init__(self):
        if not (np.isfinite(self.velocity_dispersion_kms) and self.velocity_dispersion_kms > 0):
            raise ConfigError(
                f"velocity dispersion must be > 0, got {self.velocity_dispersion_kms!r}"
            )
        if not (np.isfinite(self.bin_width_hz) and self.bin_width_hz > 0):
            raise ConfigError(f"bin width must be > 0, got {self.bin_width_hz!r}")
        if self.span_bins < 8:
            raise ConfigError(f"kernel span must be >= 8 bins, got {self.span_bins!r}")

    def energy_scale(self, nu_a):
        """Exponential scale s = nu_a <v^2> / (3 c^2), Hz."""
        v2 = (self.velocity_dispersion_kms * 1e3) ** 2
        return nu_a * v2 / (3.0 * constants.c**2)


@dataclass(frozen=True)
class AxionHypothesis:
    """A candidate axion signal.

    Attributes
    ----------
    nu_a_hz : float
        Rest-mass frequency, Hz.
    g_ksvz : float
        Photon coupling in KSVZ units.
    snr_ref : float
        Reference sensitivity: the grand-spectrum mean excess this signal
        would produce at g_ksvz = 1 under reference integration (a single
        spectrum with the axion on cavity resonance, nominal integration
        time, no filter loss).  Fixes the absolute normalization of the
        delivered signal power.
    """

    nu_a_hz: float
    g_ksvz: float
    snr_ref: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.nu_a_hz) and self.nu_a_hz > 0):
            raise ConfigError(f"axion frequency must be > 0, got {self.nu_a_hz!r}")
        if not (np.isfinite(self.g_ksvz) and self.g_ksvz >= 0):
            raise ConfigError(f"coupling must be >= 0, got {self.g_ksvz!r}")
        if not (np.isfinite(self.snr_ref) and self.snr_ref > 0):
            raise ConfigError(f"reference sensitivity must be > 0, got {self.snr_ref!r}")


def lineshape(nu, nu_a, params):
    """Normalized signal power density (1/Hz) at frequency nu.

    Zero below nu_a; integrates to 1 over nu >= nu_a.
    """
    if not (np.isfinite(nu_a) and nu_a > 0):
        raise ConfigError(f"axion frequency must be > 0, got {nu_a!r}")
    nu = np.asarray(nu, dtype=float)
    s = params.energy_scale(nu_a)
    x = (nu - nu_a) / s
    out = np.zeros_like(nu)
    pos = x > 0
    out[pos] = (2.0 / math.sqrt(math.pi)) * np.sqrt(x[pos]) * np.exp(-x[pos]) / s
    return float(out) if out.ndim == 0 else out


def lineshape_kernel(nu_a, params, grid_origin=0.0):
    """Discrete kernel: fraction of signal power in each analysis bin.

    Bins are centered on the absolute grid ``grid_origin + k * bin_width``
    (bin k covers center +/- half a bin).  Off-grid nu_a is handled
    exactly: each weight is the analytic integral of the density over the
    bin (a regularized Gamma(3/2) CDF difference), so there is no
    nearest-bin snapping and no scalloping loss in the model itself.

    Returns
    -------
    first_bin : int
        Grid index of the first bin holding signal power.
    weights : ndarray
        Power fraction per bin, length ``params.span_bins``; sums to the
        kernel coverage (~1, never more).
    """
    if not (np.isfinite(nu_a) and nu_a > 0):
        raise ConfigError(f"axion frequency must be > 0, got {nu_a!r}")
    db = params.bin_width_hz
    s = params.energy_scale(nu_a)
    # First bin whose upper edge lies above nu_a.
    first_bin = int(math.ceil((nu_a - grid_origin) / db - 0.5))
    lower_edges = grid_origin + (first_bin + np.arange(params.span_bins + 1) - 0.5) * db
    x = np.maximum((lower_edges - nu_a) / s, 0.0)
    cdf = gammainc(1.5, x)
    weights = np.diff(cdf)
    coverage = float(weights.sum())
    if coverage < MIN_KERNEL_COVERAGE:
        raise ConfigError(
            f"kernel span {params.span_bins} bins covers only {coverage:.6f} "
            f"of the signal power (scale {s:.1f} Hz); increase span_bins"
        )
    return first_bin, weights


def canonical_kernel(nu_ref_hz, params):
    """Kernel weights for a rest frequency sitting exactly on a bin center.

    This is the template shape used for matched filtering; the per-bin
    weights of an arbitrary candidate differ from it only through the
    sub-bin offset and the slow growth of the energy scale with frequency.
    Trailing bins beyond the coverage threshold are trimmed so the
    template length tracks the signal mass, not the configured span.
    """
    _, weights = lineshape_kernel(nu_ref_hz, params, grid_origin=nu_ref_hz)
    cdf = np.cumsum(weights)
    stop = int(np.searchsorted(cdf, MIN_KERNEL_COVERAGE)) + 1
    return weights[:stop]


def signal_psd(delta, hypothesis, receiver, params):
    """Delivered axion signal PSD (quanta) at detuning delta from resonance.

    Each spectral component of the signal enters the cavity with the
    absorption profile at its own detuning, so the delivered PSD is the
    lineshape density times g^2 A_ref (1 - |Gamma(delta)|^2).  The
    normalization A_ref follows from the hypothesis' snr_ref via
    reference_amplitude.
    """
    delta = np.asarray(delta, dtype=float)
    nu = receiver.nu_c + delta
    a_ref = reference_amplitude(hypothesis, receiver, params)
    absorbed = cavity_absorption(delta, receiver.kappa_l, receiver.beta)
    out = hypothesis.g_ksvz**2 * a_ref * absorbed * lineshape(nu, hypothesis.nu_a_hz, params)
    return float(out) if out.ndim == 0 else out


def reference_amplitude(hypothesis, receiver, params, tau_s=3600.0):
    """Total delivered signal power normalization A_ref (quanta * Hz).

    Defined so that a g = 1 axion sitting exactly on cavity resonance,
    observed in a single spectrum of duration tau_s with the given receiver
    and no filter loss, produces a matched-filter grand-spectrum mean of
    ``hypothesis.snr_ref``.  With per-bin visibility
    alpha_k = A_ref u(delta_k) w_k / (total(delta_k) bin_width) and
    radiometer sigma = 1/sqrt(bin_width tau), the matched mean is
    sqrt(sum (alpha_k/sigma)^2), inverted here for A_ref.
    """
    if not (np.isfinite(tau_s) and tau_s > 0):
        raise ConfigError(f"integration time must be > 0, got {tau_s!r}")
    db = params.bin_width_hz
    sigma = 1.0 / math.sqrt(db * tau_s)
    # On-resonance reference: the axion sits exactly on the resonance bin
    # center, and the kernel occupies bins at detunings k * bin_width.
    first_bin, weights = lineshape_kernel(receiver.nu_c, params, grid_origin=receiver.nu_c)
    deltas = (first_bin + np.arange(params.span_bins)) * db
    budget = noise_budget(receiver, deltas)
    absorbed = cavity_absorption(deltas, receiver.kappa_l, receiver.beta)
    per_bin = absorbed * weights / (db * budget.total)
    norm = math.sqrt(float(np.sum(per_bin**2)))
    if norm <= 0.0:
        raise ConfigError("degenerate reference: signal template vanishes")
    return hypothesis.snr_ref * sigma / norm


def bin_signal(nu_start, n_bins, hypothesis, receiver, params, tau_s=3600.0):
    """Bin-averaged delivered signal PSD (quanta) on an analysis grid.

    Uses exact per-bin lineshape integrals at the hypothesis' true
    (possibly off-grid) frequency, multiplied by the absorption profile at
    each bin center.  Bins outside the kernel span carry zero.

    Returns an array of length ``n_bins`` aligned with bin centers
    ``nu_start + k * bin_width``.
    """
    db = params.bin_width_hz
    out = np.zeros(n_bins)
    if hypothesis.g_ksvz == 0.0:
        return out
    first_bin, weights = lineshape_kernel(hypothesis.nu_a_hz, params, grid_origin=nu_start)
    a_ref = reference_amplitude(hypothesis, receiver, params, tau_s=tau_s)
    k = np.arange(params.span_bins) + first_bin
    inside = (k >= 0) & (k < n_bins)
    if not np.any(inside):
        return out
    centers = nu_start + k[inside] * db
    absorbed = cavity_absorption(centers - receiver.nu_c, receiver.kappa_l, receiver.beta)
    out[k[inside]] = hypothesis.g_ksvz**2 * a_ref * absorbed * weights[inside] / db
    return out
