"""Noise physics of a squeezed-vacuum cavity receiver.

Everything is expressed in single-quadrature quanta: power spectral density
in units of one photon of energy per unit bandwidth, per quadrature, so the
vacuum floor is 0.25.  Cavity linewidths are ordinary-frequency FWHM values
in Hz, and detunings are measured from cavity resonance.

The receiver chain is: squeezer -> transmission loss -> cavity reflection ->
amplifier.  On resonance an overcoupled cavity absorbs most of the incident
squeezed vacuum and re-emits its own (possibly excess) thermal noise; far
off resonance the incident field reflects unchanged.  The delivered
squeezing therefore sets the off-resonant noise floor while the cavity
noise sets the on-resonant one, and overcoupling trades peak visibility
for bandwidth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants
from scipy.integrate import quad

from .errors import ConfigError, CouplingAtBoundary, NumericError

# Single-quadrature vacuum PSD; thermal_quanta(nu, 0) must return exactly this.
VACUUM_QUANTA = 0.25

_GOLDEN_INV = (math.sqrt(5.0) - 1.0) / 2.0  # 1/phi
_GOLDEN_INV2 = (3.0 - math.sqrt(5.0)) / 2.0  # 1/phi^2


def thermal_quanta(nu, temperature):
    """Mean thermal occupation of one quadrature at frequency nu and temperature T.

    N = (1/4) coth(h nu / 2 k_B T), which limits to the vacuum floor 1/4 as
    T -> 0 and to the Rayleigh-Jeans k_B T / 2 h nu for k_B T >> h nu.

    Parameters
    ----------
    nu : float or ndarray
        Frequency in Hz, > 0.
    temperature : float
        Physical temperature in K, >= 0.

    Returns
    -------
    float or ndarray
        Quanta per quadrature, >= 0.25.
    """
    nu = np.asarray(nu, dtype=float)
    if not np.all(np.isfinite(nu)) or np.any(nu <= 0.0):
        raise ConfigError(f"frequency must be finite and positive, got {nu!r}")
    if not np.isfinite(temperature) or temperature < 0.0:
        raise ConfigError(f"temperature must be finite and >= 0, got {temperature!r}")
    if temperature == 0.0:
        out = np.full_like(nu, VACUUM_QUANTA)
        return float(out) if out.ndim == 0 else out
    x = constants.h * nu / (2.0 * constants.k * temperature)
    # tanh saturates cleanly for large x, so no overflow handling is needed.
    out = VACUUM_QUANTA / np.tanh(x)
    return float(out) if out.ndim == 0 else out


def delivered_squeezing(eta, g_s):
    """Variance reduction delivered through a lossy line.

    A squeezer output with variance ratio g_s (relative to its thermal
    input) transmitted with efficiency eta arrives with ratio
    S = eta * g_s + (1 - eta): loss admixes unsqueezed noise and bounds the
    deliverable squeezing at 1 - eta even for a perfect squeezer.
    """
    if not (np.isfinite(eta) and 0.0 < eta <= 1.0):
        raise ConfigError(f"transmission efficiency must be in (0, 1], got {eta!r}")
    if not (np.isfinite(g_s) and g_s >= 0.0):
        raise ConfigError(f"squeezer variance ratio must be >= 0, got {g_s!r}")
    return eta * g_s + (1.0 - eta)


def cavity_reflectance(delta, kappa_l, beta):
    """Power reflectance of a two-port cavity probed through the strong port.

    |Gamma(delta)|^2 = ((kappa_m - kappa_l)^2 + 4 delta^2)
                     / ((kappa_m + kappa_l)^2 + 4 delta^2),
    with kappa_m = beta * kappa_l.  Critical coupling (beta = 1) absorbs
    fully on resonance; any beta reflects fully far off resonance.
    """
    _check_geometry(kappa_l, beta)
    delta = np.asarray(delta, dtype=float)
    kappa_m = beta * kappa_l
    num = (kappa_m - kappa_l) ** 2 + 4.0 * delta**2
    den = (kappa_m + kappa_l) ** 2 + 4.0 * delta**2
    out = num / den
    return float(out) if out.ndim == 0 else out


def cavity_absorption(delta, kappa_l, beta):
    """Fraction of incident power absorbed by (delivered into) the cavity.

    Computed as the exact complement 1 - |Gamma|^2 so that energy balance
    holds to the last bit; algebraically it equals
    4 beta / (1 + beta)^2 * (kappa/2)^2 / ((kappa/2)^2 + delta^2)
    with kappa = kappa_l (1 + beta).
    """
    return 1.0 - cavity_reflectance(delta, kappa_l, beta)


def _check_geometry(kappa_l, beta):
    if not (np.isfinite(kappa_l) and kappa_l > 0.0):
        raise ConfigError(f"kappa_l must be finite and > 0, got {kappa_l!r}")
    if not (np.isfinite(beta) and beta > 0.0):
        raise ConfigError(f"coupling ratio beta must be finite and > 0, got {beta!r}")


@dataclass(frozen=True)
class ReceiverParams:
    """Operating point of the receiver chain.

    Attributes
    ----------
    nu_c : float
        Cavity resonance frequency, Hz.
    kappa_l : float
        Internal (weak-port plus wall loss) linewidth, Hz FWHM.
    beta : float
        Overcoupling ratio kappa_m / kappa_l of the measurement port.
    n_c0 : float
        Cavity-emitted noise at full absorption, quanta (>= 0.25).  Equals
        the thermal occupation of the cavity walls when fully thermalized;
        larger values model excess cavity noise.
    n_f : float
        Noise of the input field sourced by the matched termination,
        quanta (>= 0.25).
    eta : float
        Squeezer-to-amplifier transmission efficiency, in (0, 1].
    g_s : float
        Squeezer output variance ratio (1 = squeezer off).
    n_a : float
        Flat amplifier-added noise referred to the amplifier input, quanta.
    g_a_db : float
        Amplifier power gain in dB (bookkeeping only; cancels everywhere).
    """

    nu_c: float
    kappa_l: float
    beta: float
    n_c0: float
    n_f: float
    eta: float = 1.0
    g_s: float = 1.0
    n_a: float = 0.0
    g_a_db: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.nu_c) and self.nu_c > 0.0):
            raise ConfigError(f"nu_c must be finite and > 0, got {self.nu_c!r}")
        _check_geometry(self.kappa_l, self.beta)
        if not (np.isfinite(self.n_c0) and self.n_c0 >= VACUUM_QUANTA):
            raise ConfigError(
                f"cavity noise must be >= vacuum floor {VACUUM_QUANTA}, got {self.n_c0!r}"
            )
        if not (np.isfinite(self.n_f) and self.n_f >= VACUUM_QUANTA):
            raise ConfigError(
                f"input field noise must be >= vacuum floor {VACUUM_QUANTA}, got {self.n_f!r}"
            )
        if not (np.isfinite(self.eta) and 0.0 < self.eta <= 1.0):
            raise ConfigError(f"eta must be in (0, 1], got {self.eta!r}")
        if not (np.isfinite(self.g_s) and self.g_s >= 0.0):
            raise ConfigError(f"g_s must be >= 0, got {self.g_s!r}")
        if not (np.isfinite(self.n_a) and self.n_a >= 0.0):
            raise ConfigError(f"added noise must be >= 0, got {self.n_a!r}")
        if not np.isfinite(self.g_a_db):
            raise ConfigError(f"amplifier gain must be finite, got {self.g_a_db!r}")

    @property
    def kappa_m(self):
        """Measurement-port linewidth, Hz."""
        return self.beta * self.kappa_l

    @property
    def kappa(self):
        """Loaded linewidth kappa_l (1 + beta), Hz."""
        return self.kappa_l * (1.0 + self.beta)

    @property
    def delivered(self):
        """Delivered squeezing S = eta g_s + (1 - eta)."""
        return delivered_squeezing(self.eta, self.g_s)

    @property
    def gain(self):
        """Linear power gain of the chain."""
        return 10.0 ** (self.g_a_db / 10.0)


@dataclass
class NoiseBudget:
    """Spectral decomposition of the receiver noise at a set of detunings.

    All arrays are aligned with ``detunings`` (Hz from resonance) and in
    quanta.  ``s_ax`` is the smooth signal-delivery envelope (zero when no
    hypothesis is attached) and ``alpha`` the resulting visibility
    s_ax / total.
    """

    detunings: np.ndarray
    n_c: np.ndarray
    n_r: np.ndarray
    n_a: np.ndarray
    s_ax: np.ndarray
    total: np.ndarray = field(default=None)
    alpha: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.total is None:
            self.total = self.n_c + self.n_r + self.n_a
        if self.alpha is None:
            self.alpha = self.s_ax / self.total

    CSV_COLUMNS = ("delta_hz", "N_c", "N_r", "N_A", "S_ax", "alpha")

    def columns(self):
        """Stack the budget as columns matching CSV_COLUMNS."""
        return np.column_stack(
            [self.detunings, self.n_c, self.n_r, self.n_a, self.s_ax, self.alpha]
        )


def noise_budget(params, detunings, hypothesis=None):
    """Evaluate the receiver noise budget over an array of detunings.

    The cavity emits N_c0 scaled by the absorption profile, the (squeezed)
    input field reflects with S * N_f scaled by the reflectance, and the
    amplifier adds a flat n_a.  When a hypothesis is attached, the signal
    envelope g^2 * (1 - |Gamma|^2) is filled in template units (the
    absolute scale belongs to the campaign sensitivity normalization); the
    signal-to-cavity-noise ratio is independent of both detuning and
    coupling by construction.

    Parameters
    ----------
    params : ReceiverParams
    detunings : array_like
        Detunings from resonance, Hz.
    hypothesis : AxionHypothesis, optional

    Returns
    -------
    NoiseBudget
    """
    detunings = np.atleast_1d(np.asarray(detunings, dtype=float))
    if not np.all(np.isfinite(detunings)):
        raise ConfigError("detunings must be finite")
    refl = cavity_reflectance(detunings, params.kappa_l, params.beta)
    absorbed = 1.0 - refl
    n_c = params.n_c0 * absorbed
    n_r = params.delivered * params.n_f * refl
    n_a = np.full_like(detunings, params.n_a)
    if hypothesis is None:
        s_ax = np.zeros_like(detunings)
    else:
        s_ax = hypothesis.g_ksvz**2 * absorbed
    return NoiseBudget(detunings=detunings, n_c=n_c, n_r=n_r, n_a=n_a, s_ax=s_ax)


def visibility(params, hypothesis, delta):
    """Smooth signal visibility alpha(delta) = S_ax / (N_c + N_r + N_A).

    Template units (signal envelope g^2 * absorption); absolute
    normalization cancels in every ratio this feeds.  Maximized on
    resonance, where the cavity noise dominates the budget.
    """
    budget = noise_budget(params, delta, hypothesis)
    alpha = budget.alpha
    return float(alpha[0]) if np.ndim(delta) == 0 else alpha


def _alpha_squared_integrand(params, g2):
    s = params.delivered
    kl, beta = params.kappa_l, params.beta
    n_c0, n_f, n_a = params.n_c0, params.n_f, params.n_a

    def integrand(delta):
        refl = cavity_reflectance(delta, kl, beta)
        absorbed = 1.0 - refl
        total = n_c0 * absorbed + s * n_f * refl + n_a
        return (g2 * absorbed / total) ** 2

    return integrand


def scan_rate(params, hypothesis, window_linewidths=20.0):
    """Relative mass-scan rate: integral of alpha(delta)^2 over detuning.

    The integrand is the full visibility including the flat added noise;
    the result scales as g^4 and carries arbitrary (template) units, so
    only ratios between operating points are meaningful.  Integration uses
    adaptive quadrature over +/- ``window_linewidths`` loaded linewidths.

    Raises
    ------
    NumericError
        If the quadrature does not converge; the message carries the
        integrator diagnostics.
    """
    g2 = hypothesis.g_ksvz**2
    integrand = _alpha_squared_integrand(params, g2)
    half_window = window_linewidths * params.kappa
    peak = integrand(0.0)
    result = quad(
        integrand,
        -half_window,
        half_window,
        points=[0.0],
        limit=200,
        epsabs=1e-10 * peak * params.kappa,
        epsrel=1e-10,
        full_output=True,
    )
    if len(result) > 3:
        value, abserr, info, message = result[:4]
        raise NumericError(
            f"scan-rate quadrature failed: {message} "
            f"(value={value!r}, abserr={abserr!r}, evaluations={info['neval']})"
        )
    value, abserr = result[0], result[1]
    if not np.isfinite(value) or value < 0.0:
        raise NumericError(f"scan-rate quadrature returned {value!r} (abserr={abserr!r})")
    return value


def _coupling_objective(beta, s, n_c0, n_f):
    """Scan rate over the coupling-dependent part of the budget.

    The flat amplifier noise is excluded here: it is negligible at the
    operating point and, unlike the cavity-filtered terms, does not move
    with beta; the coupling choice that reproduces the measured operating
    points follows from the cavity-emitted and reflected noises alone.
    kappa_l is set to 1 (the optimum is invariant to the linewidth scale).
    """
    params = ReceiverParams(
        nu_c=1.0,
        kappa_l=1.0,
        beta=beta,
        n_c0=n_c0,
        n_f=n_f,
        eta=1.0,
        g_s=s,
        n_a=0.0,
    )
    integrand = _alpha_squared_integrand(params, 1.0)
    half_window = 20.0 * params.kappa
    value, abserr = quad(
        integrand,
        -half_window,
        half_window,
        points=[0.0],
        limit=200,
        epsabs=1e-12,
        epsrel=1e-10,
    )
    return value


def optimize_coupling(
    s, n_c0, n_f, n_a, bounds=(0.1, 100.0), rel_tol=1e-3, prescan_points=80
):
    """Coupling ratio beta maximizing the scan rate.

    A coarse log-spaced pre-scan brackets the maximum, then golden-section
    search refines it to relative tolerance ``rel_tol``.  Deterministic:
    fixed grids, no randomness.

    Parameters
    ----------
    s : float
        Delivered squeezing (1 = unsqueezed).
    n_c0, n_f : float
        Cavity and input-field noises, quanta.
    n_a : float
        Flat added noise, quanta.  Validated but excluded from the
        objective (see _coupling_objective); it shifts the true optimum by
        less than the scan-rate flatness around it.
    bounds : tuple of float
        Search interval for beta.
    rel_tol : float
        Relative tolerance on the returned beta.

    Returns
    -------
    float

    Raises
    ------
    CouplingAtBoundary
        If the maximum sits at a search boundary (e.g. s = 0, for which
        ever-stronger overcoupling always helps).
    """
    if not (np.isfinite(s) and s >= 0.0):
        raise ConfigError(f"delivered squeezing must be >= 0, got {s!r}")
    if not (np.isfinite(n_c0) and n_c0 > 0.0):
        raise ConfigError(f"cavity noise must be > 0, got {n_c0!r}")
    if not (np.isfinite(n_f) and n_f > 0.0):
        raise ConfigError(f"input field noise must be > 0, got {n_f!r}")
    if not (np.isfinite(n_a) and n_a >= 0.0):
        raise ConfigError(f"added noise must be >= 0, got {n_a!r}")
    lo, hi = bounds
    if not (0.0 < lo < hi):
        raise ConfigError(f"bounds must satisfy 0 < lo < hi, got {bounds!r}")

    grid = np.geomspace(lo, hi, prescan_points)
    values = [_coupling_objective(b, s, n_c0, n_f) for b in grid]
    k = int(np.argmax(values))
    if k == 0 or k == len(grid) - 1:
        raise CouplingAtBoundary(
            f"scan-rate maximum pinned at beta={grid[k]:.4g} "
            f"(search bounds {lo:.4g}..{hi:.4g}); widen the bounds or check inputs"
        )

    # Golden-section on the bracketing triple, in log(beta) for scale balance.
    a, b = math.log(grid[k - 1]), math.log(grid[k + 1])
    h = b - a
    c = a + _GOLDEN_INV2 * h
    d = a + _GOLDEN_INV * h
    fc = _coupling_objective(math.exp(c), s, n_c0, n_f)
    fd = _coupling_objective(math.exp(d), s, n_c0, n_f)
    while h > rel_tol:  # log-interval width bounds the relative beta error
        if fc > fd:
            b, d, fd = d, c, fc
            h = b - a
            c = a + _GOLDEN_INV2 * h
            fc = _coupling_objective(math.exp(c), s, n_c0, n_f)
        else:
            a, c, fc = c, d, fd
            h = b - a
            d = a + _GOLDEN_INV * h
            fd = _coupling_objective(math.exp(d), s, n_c0, n_f)
    return math.exp(0.5 * (a + b))


def variance_vs_phase(theta, s, g_anti):
    """Measured quadrature variance of the squeezed field versus squeezer phase.

    V(theta) = s sin^2(theta) + g_anti cos^2(theta): pi-periodic, minimum s
    at theta = pi/2, maximum g_anti at theta = 0.  ``g_anti`` is the
    anti-squeezed variance ratio, a free parameter (>= 1).
    """
    if not (np.isfinite(s) and 0.0 <= s <= 1.0):
        raise ConfigError(f"squeezed variance ratio must be in [0, 1], got {s!r}")
    if not (np.isfinite(g_anti) and g_anti >= 1.0):
        raise ConfigError(f"anti-squeezed variance ratio must be >= 1, got {g_anti!r}")
    theta = np.asarray(theta, dtype=float)
    out = s * np.sin(theta) ** 2 + g_anti * np.cos(theta) ** 2
    return float(out) if out.ndim == 0 else out


def report_enhancement(params_squeezed, params_unsqueezed, hypothesis):
    """Scan-rate enhancement of squeezed over unsqueezed operation.

    Optimizes the coupling separately for each operating point, then
    compares full-model scan rates at those couplings.

    Returns
    -------
    dict with keys ``beta_squeezed``, ``beta_unsqueezed``, ``rate_ratio``.
    """
    from dataclasses import replace

    beta_sq = optimize_coupling(
        params_squeezed.delivered,
        params_squeezed.n_c0,
        params_squeezed.n_f,
        params_squeezed.n_a,
    )
    beta_un = optimize_coupling(
        params_unsqueezed.delivered,
        params_unsqueezed.n_c0,
        params_unsqueezed.n_f,
        params_unsqueezed.n_a,
    )
    rate_sq = scan_rate(replace(params_squeezed, beta=beta_sq), hypothesis)
    rate_un = scan_rate(replace(params_unsqueezed, beta=beta_un), hypothesis)
    return {
        "beta_squeezed": beta_sq,
        "beta_unsqueezed": beta_un,
        "rate_ratio": rate_sq / rate_un,
    }
