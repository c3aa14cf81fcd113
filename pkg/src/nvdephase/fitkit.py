"""Decay-curve fitting and zero-field resonance lineshapes.

Decay models are parametrized with rates in kHz against time axes in
microseconds.  Fits are damped least squares with deterministic
multi-start seeding; parameter uncertainties come from the local
quadratic model at the optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .constants import DEFAULT_CONSTANTS, PhysicalConstants

KHZ_PER_INVERSE_US = 1e3
STRETCH_BOUNDS = (0.3, 3.0)


class FitError(RuntimeError):
    """Raised when a fit cannot be run on the given data."""


class FitNonConvergence(FitError):
    """Raised when no restart converges; carries the best attempt."""

    def __init__(self, message: str, best: "FitResult"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class DecayCurve:
    """Time series of a normalized coherence signal with uncertainties."""

    t_us: np.ndarray
    signal: np.ndarray
    sigma: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.t_us, dtype=float)
        y = np.asarray(self.signal, dtype=float)
        if t.ndim != 1 or t.shape != y.shape:
            raise FitError("time and signal must be matching 1-d arrays")
        if np.any(np.diff(t) <= 0):
            raise FitError("time axis must be strictly increasing")
        sig = self.sigma
        if sig is not None:
            sig = np.asarray(sig, dtype=float)
            if sig.shape != t.shape or np.any(sig < 0):
                raise FitError("sigma must be non-negative and match the time axis")
            if np.any(np.abs(y) > 1.0 + 3.0 * np.maximum(sig, 1e-12) + 1e-9):
                raise FitError("signal exceeds unit magnitude beyond 3 sigma")
        object.__setattr__(self, "t_us", _frozen(t))
        object.__setattr__(self, "signal", _frozen(y))
        object.__setattr__(self, "sigma", _frozen(sig) if sig is not None else None)

    @property
    def n_points(self) -> int:
        return len(self.t_us)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class OdmrSpectrum:
    """Resonance spectrum: contrast versus microwave frequency."""

    freq_mhz: np.ndarray
    contrast: np.ndarray
    sigma: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.freq_mhz, dtype=float)
        c = np.asarray(self.contrast, dtype=float)
        if f.ndim != 1 or f.shape != c.shape:
            raise FitError("frequency and contrast must be matching 1-d arrays")
        if np.any(np.diff(f) <= 0):
            raise FitError("frequency axis must be strictly increasing")
        if not np.all(np.isfinite(c)):
            raise FitError("contrast must be finite")
        object.__setattr__(self, "freq_mhz", _frozen(f))
        object.__setattr__(self, "contrast", _frozen(c))
        sig = self.sigma
        object.__setattr__(self, "sigma", _frozen(sig) if sig is not None else None)


@dataclass(frozen=True)
class FitResult:
    model: str
    params: dict
    uncertainties: dict
    residual_norm: float
    aicc: float
    n_points: int
    converged: bool = True

    @property
    def rate_khz(self) -> float:
        return self.params["rate_khz"]

    @property
    def stretch(self) -> float:
        return self.params.get("stretch", 1.0)


# ---------------------------------------------------------------------------
# decay models: y = amplitude * envelope(k t) + offset, k in 1/us
# ---------------------------------------------------------------------------

def _exp_env(kt):
    return np.exp(-kt)


def _model_exp(t, amplitude, k, offset):
    return amplitude * np.exp(-k * t) + offset


def _jac_exp(t, amplitude, k, offset):
    e = np.exp(-k * t)
    return np.column_stack([e, -amplitude * t * e, np.ones_like(t)])


def _model_stretched(t, amplitude, k, p, offset):
    return amplitude * np.exp(-np.power(np.maximum(k * t, 0.0), p)) + offset


def _jac_stretched(t, amplitude, k, p, offset):
    kt = np.maximum(k * t, 1e-300)
    env = np.exp(-(kt**p))
    dk = -amplitude * env * p * kt ** (p - 1.0) * t
    dp = -amplitude * env * (kt**p) * np.log(kt)
    return np.column_stack([env, dk, dp, np.ones_like(t)])


def _model_gaussian(t, amplitude, k, offset):
    return amplitude * np.exp(-((k * t) ** 2)) + offset


def _jac_gaussian(t, amplitude, k, offset):
    env = np.exp(-((k * t) ** 2))
    return np.column_stack([env, -2.0 * amplitude * k * t * t * env, np.ones_like(t)])


def _model_linear(t, slope, offset):
    return slope * t + offset


def _jac_linear(t, slope, offset):
    return np.column_stack([t, np.ones_like(t)])


@dataclass(frozen=True)
class _ModelDef:
    names: tuple[str, ...]
    fn: callable
    jac: callable
    lower: tuple[float, ...]
    upper: tuple[float, ...]


DECAY_MODELS = {
    "exp": _ModelDef(
        ("amplitude", "k", "offset"), _model_exp, _jac_exp,
        (-np.inf, 0.0, -np.inf), (np.inf, np.inf, np.inf),
    ),
    "stretched_exp": _ModelDef(
        ("amplitude", "k", "stretch", "offset"), _model_stretched, _jac_stretched,
        (-np.inf, 0.0, STRETCH_BOUNDS[0], -np.inf),
        (np.inf, np.inf, STRETCH_BOUNDS[1], np.inf),
    ),
    "gaussian_decay": _ModelDef(
        ("amplitude", "k", "offset"), _model_gaussian, _jac_gaussian,
        (-np.inf, 0.0, -np.inf), (np.inf, np.inf, np.inf),
    ),
    "linear": _ModelDef(
        ("slope", "offset"), _model_linear, _jac_linear,
        (-np.inf, -np.inf), (np.inf, np.inf),
    ),
}

GRADIENT_CHECK_TOL = 1e-5


def model_gradient_max_error(model: str, t: np.ndarray, params: dict) -> float:
    """Largest relative deviation of the analytic Jacobian from central
    finite differences; used to validate the fit gradients."""
    definition = DECAY_MODELS[model]
    theta = np.array([params[name] for name in definition.names], dtype=float)
    analytic = definition.jac(t, *theta)
    scale = np.abs(definition.fn(t, *theta)).max() + 1.0
    worst = 0.0
    for idx in range(len(theta)):
        h = 1e-6 * max(abs(theta[idx]), 1.0)
        up, dn = theta.copy(), theta.copy()
        up[idx] += h
        dn[idx] -= h
        numeric = (definition.fn(t, *up) - definition.fn(t, *dn)) / (2.0 * h)
        denom = np.maximum(np.abs(analytic[:, idx]), 1e-3 * scale)
        worst = max(worst, float(np.max(np.abs(analytic[:, idx] - numeric) / denom)))
    return worst


def _initial_guesses(curve: DecayCurve, model: str) -> list[np.ndarray]:
    t, y = curve.t_us, curve.signal
    span = y.max() - y.min()
    amplitude = span if span > 0 else 1.0
    offset = y.min()
    t_scale = max(t[-1], t[t > 0][0] if np.any(t > 0) else 1.0)
    # five deterministic multi-start rates, log-spaced around 1/t_max
    rates = np.logspace(-1.5, 1.5, 5) / t_scale
    guesses = []
    for k in rates:
        if model == "stretched_exp":
            guesses.append(np.array([amplitude, k, 1.0, offset]))
        elif model == "linear":
            slope = (y[-1] - y[0]) / (t[-1] - t[0])
            guesses.append(np.array([slope, y[0]]))
            break
        else:
            guesses.append(np.array([amplitude, k, offset]))
    return guesses


def fit_decay(
    curve: DecayCurve,
    model: str = "exp",
    seed_params: dict | None = None,
    bounds: dict | None = None,
) -> FitResult:
    """Weighted nonlinear least-squares fit of a decay model.

    Multi-start damped least squares with a scale-invariant gradient
    convergence criterion; raises :class:`FitNonConvergence` carrying the
    best attempt otherwise.  ``bounds`` may narrow individual parameter
    ranges, e.g. to pin amplitudes of normalized coherence data.
    """
    if model not in DECAY_MODELS:
        raise FitError(f"unknown model '{model}'; options: {sorted(DECAY_MODELS)}")
    if curve.n_points < 8:
        raise FitError("need at least 8 points to fit a decay")
    definition = DECAY_MODELS[model]
    if bounds:
        lower = list(definition.lower)
        upper = list(definition.upper)
        for key, (lo, hi) in bounds.items():
            idx = definition.names.index(key)
            lower[idx], upper[idx] = lo, hi
        definition = _ModelDef(
            definition.names, definition.fn, definition.jac, tuple(lower), tuple(upper)
        )
    t, y = curve.t_us, curve.signal
    weights = 1.0 / np.maximum(curve.sigma, 1e-12) if curve.sigma is not None else np.ones_like(y)

    def residual(theta):
        return (definition.fn(t, *theta) - y) * weights

    def jacobian(theta):
        return definition.jac(t, *theta) * weights[:, None]

    guesses = _initial_guesses(curve, model)
    if seed_params is not None:
        seeded = [seed_params.get(name) for name in definition.names]
        if None not in seeded:
            guesses.insert(0, np.asarray(seeded, dtype=float))

    def solve(start):
        return least_squares(
            residual, np.clip(start, definition.lower, definition.upper),
            jac=jacobian, bounds=(definition.lower, definition.upper),
            xtol=1e-14, ftol=1e-14, gtol=1e-12, max_nfev=2000,
        )

    data_scale = float(np.linalg.norm(y * weights)) + 1.0

    def is_converged(sol):
        # scale-invariant gradient criterion: the residual must be 1e8x
        # closer to orthogonal to the model tangent space than generic,
        # with a floor at the rounding noise of the data
        jac_norm = np.linalg.norm(sol.jac)
        scale = jac_norm * math.sqrt(max(2.0 * sol.cost, 1e-300))
        floor = 1e-12 * jac_norm * data_scale
        return float(np.linalg.norm(sol.grad)) <= max(1e-8 * scale, floor)

    best = None
    for guess in guesses:
        sol = solve(guess)
        if best is None or sol.cost < best.cost:
            best = sol
    # a restart from the optimum shakes off step-size stalls
    if not is_converged(best):
        polished = solve(best.x)
        if polished.cost <= best.cost * (1.0 + 1e-12):
            best = polished
    converged = is_converged(best)
    result = _package_fit(model, definition, best, curve, converged)
    if not converged:
        raise FitNonConvergence("no restart reached the gradient tolerance", result)
    return result


def _package_fit(model, definition, sol, curve, converged) -> FitResult:
    theta = sol.x
    n, k_params = curve.n_points, len(theta)
    dof = max(n - k_params, 1)
    chi2 = 2.0 * sol.cost
    jac = sol.jac
    try:
        cov = np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.full((k_params, k_params), np.nan)
    if curve.sigma is None:
        cov = cov * chi2 / dof  # scale by reduced chi^2 for unweighted fits
    errors = np.sqrt(np.maximum(np.diag(cov), 0.0))
    params: dict = {}
    uncertainties: dict = {}
    for name, value, err in zip(definition.names, theta, errors):
        if name == "k":
            params["rate_khz"] = value * KHZ_PER_INVERSE_US
            uncertainties["rate_khz"] = err * KHZ_PER_INVERSE_US
        else:
            params[name] = float(value)
            uncertainties[name] = float(err)
    if model == "exp":
        params["stretch"] = 1.0
    elif model == "gaussian_decay":
        params["stretch"] = 2.0
    aicc = _aicc(chi2, n, k_params)
    return FitResult(
        model=model,
        params=params,
        uncertainties=uncertainties,
        residual_norm=math.sqrt(chi2),
        aicc=aicc,
        n_points=n,
        converged=converged,
    )


def _aicc(chi2: float, n: int, k: int) -> float:
    # Gaussian-likelihood AIC with small-sample correction
    aic = n * math.log(max(chi2 / n, 1e-300)) + 2 * k
    if n - k - 1 > 0:
        aic += 2.0 * k * (k + 1) / (n - k - 1)
    return aic


def model_select(curve: DecayCurve, candidates=("exp", "stretched_exp", "gaussian_decay")):
    """Pick the decay model with the lowest corrected information criterion.

    Ties within 2 information units go to the model with fewer parameters
    (candidate order breaks remaining ties).
    """
    if curve.n_points < 12:
        raise FitError("need at least 12 points for model selection")
    results = {}
    for name in candidates:
        try:
            results[name] = fit_decay(curve, name)
        except FitNonConvergence as err:
            results[name] = err.best
    ordered = sorted(
        results.items(),
        key=lambda item: (item[1].aicc, len(DECAY_MODELS[item[0]].names)),
    )
    best_name, best_fit = ordered[0]
    for name, result in ordered[1:]:
        fewer = len(DECAY_MODELS[name].names) < len(DECAY_MODELS[best_name].names)
        if fewer and result.aicc - best_fit.aicc <= 2.0:
            best_name, best_fit = name, result
    return best_name, results[best_name]


# ---------------------------------------------------------------------------
# zero-field resonance line
# ---------------------------------------------------------------------------

def _lorentzian(x, fwhm):
    half = fwhm / 2.0
    return half / math.pi / (x * x + half * half)


def dip_kernel(freq_mhz, center_mhz, nu_mhz, lorentz_fwhm_mhz):
    """Transverse-split m_I = 0 lineshape.

    Transverse couplings push the resonance to center +/- R with R
    following the radial distribution of an isotropic Gaussian of scale
    ``nu``; convolving the split density with a Lorentzian of the given
    FWHM produces the characteristic central dip.
    """
    nu = max(nu_mhz, 1e-9)
    x = np.linspace(-6.0 * nu, 6.0 * nu, 801)
    density = np.abs(x) / (2.0 * nu * nu) * np.exp(-(x * x) / (2.0 * nu * nu))
    density /= np.trapezoid(density, x)
    shifted = freq_mhz[:, None] - center_mhz - x[None, :]
    return np.trapezoid(_lorentzian(shifted, lorentz_fwhm_mhz) * density[None, :], x, axis=1)


def power_broadened_fwhm(intrinsic_fwhm_mhz: float, rabi_mhz: float, rabi_factor: float = 1.0):
    """Lorentzian FWHM with drive broadening added in quadrature."""
    return math.sqrt(intrinsic_fwhm_mhz**2 + (rabi_factor * rabi_mhz) ** 2)


def synth_zero_field_odmr(
    sigma_e_v_per_cm: float,
    strain_sigma_mhz: tuple[float, float, float] = (0.0, 0.0, 0.0),
    rabi_mhz: float = 0.1,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    freq_mhz: np.ndarray | None = None,
    contrast_depth: float = 0.02,
    intrinsic_fwhm_mhz: float = 0.05,
    noise_sigma: float = 0.0,
    draws: int = 20000,
    seed: int = 7,
) -> OdmrSpectrum:
    """Synthesize a zero-field resonance spectrum by charge/strain sampling.

    Electric-field components are drawn i.i.d. Gaussian with standard
    deviation ``sigma_e`` per axis; transverse strain couplings add on
    top.  The m_I = 0 line splits to the transverse magnitude while the
    m_I = +/-1 satellites (offset by the nitrogen hyperfine splitting)
    keep a plain power-broadened Lorentzian shape.
    """
    if sigma_e_v_per_cm < 0:
        raise FitError("field spread must be non-negative")
    if freq_mhz is None:
        freq_mhz = np.linspace(constants.d_gs - 4.0, constants.d_gs + 4.0, 1601)
    rng = np.random.default_rng(seed)
    d_perp = constants.d_perpendicular * 1e-6  # MHz per V/cm
    d_par = constants.d_parallel * 1e-6
    e = rng.normal(0.0, max(sigma_e_v_per_cm, 0.0), size=(draws, 3))
    m = rng.normal(0.0, strain_sigma_mhz, size=(draws, 3))
    center = constants.d_gs + d_par * e[:, 2] + m[:, 2]
    split = np.hypot(d_perp * e[:, 0] + m[:, 0], d_perp * e[:, 1] + m[:, 1])
    fwhm = power_broadened_fwhm(intrinsic_fwhm_mhz, rabi_mhz)
    response = np.zeros_like(freq_mhz)
    for sign in (+1.0, -1.0):
        lines = center + sign * split
        response += _lorentzian(freq_mhz[:, None] - lines[None, :], fwhm).sum(axis=1) / (2 * draws)
    # m_I = +/-1 satellites: transverse coupling suppressed
    for offset in (-constants.a_hf_nv14n, constants.a_hf_nv14n):
        lines = center + offset
        response += _lorentzian(freq_mhz[:, None] - lines[None, :], fwhm).sum(axis=1) / draws
    peak = response.max()
    contrast = 1.0 - contrast_depth * response / peak
    if noise_sigma > 0:
        contrast = contrast + rng.normal(0.0, noise_sigma, size=contrast.shape)
    sigma = np.full_like(contrast, noise_sigma) if noise_sigma > 0 else None
    return OdmrSpectrum(
        freq_mhz=freq_mhz,
        contrast=contrast,
        sigma=sigma,
        meta={
            "sigma_e_v_per_cm": sigma_e_v_per_cm,
            "rabi_mhz": rabi_mhz,
            "nu_mhz": d_perp * sigma_e_v_per_cm,
        },
    )


def _central_line_position(f: np.ndarray, c: np.ndarray) -> float:
    """Frequency of the central hyperfine line.

    With the nitrogen satellites in view the spectrum shows three
    resonances; the split central line lies between them and is usually
    not the deepest, so take the middle dip rather than the global one.
    """
    from scipy.signal import find_peaks

    depth = np.max(c) - c
    peaks, _ = find_peaks(depth, prominence=0.1 * max(depth.max(), 1e-30))
    if len(peaks) >= 2:
        # the hyperfine pattern is symmetric about the central line, so
        # its position is the midpoint of the outermost dips whether they
        # are the satellites or the two lobes of a strongly split line
        return float(0.5 * (f[peaks[0]] + f[peaks[-1]]))
    if len(peaks) == 1:
        return float(f[peaks[0]])
    return float(f[len(f) // 2])


@dataclass(frozen=True)
class ZeroFieldFit:
    nu_dip_khz: float
    nu_uncertainty_khz: float
    sigma_e_v_per_cm: float
    power_width_khz: float
    gamma_elec_khz: float
    center_mhz: float
    residual_norm: float


def fit_zero_field_odmr(
    spectrum: OdmrSpectrum,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    window_mhz: float = 1.5,
) -> ZeroFieldFit:
    """Fit the central m_I = 0 dip and convert its width to field noise.

    The dip scale nu maps to the transverse field spread via the electric
    dipole parameters, and to the quadratic-term dephasing rate through
    their parallel/transverse ratio.
    """
    f, c = spectrum.freq_mhz, spectrum.contrast
    center0 = _central_line_position(f, c)
    mask = np.abs(f - center0) <= window_mhz
    if mask.sum() < 12:
        raise FitError("spectrum does not resolve the central line")
    fm, cm = f[mask], c[mask]
    baseline0 = np.percentile(cm, 95)
    depth0 = max(baseline0 - cm.min(), 1e-6)
    span = max(fm[-1] - fm[0], 1e-3)

    def model(theta):
        center, nu, fwhm, depth, baseline = theta
        kernel = dip_kernel(fm, center, nu, max(fwhm, 1e-6))
        kernel_peak = kernel.max() if kernel.max() > 0 else 1.0
        return baseline - depth * kernel / kernel_peak

    def residual(theta):
        return model(theta) - cm

    best = None
    for nu0 in (0.02 * span, 0.1 * span, 0.3 * span):
        theta0 = np.array([center0, nu0, 0.05 * span, depth0, baseline0])
        sol = least_squares(
            residual, theta0,
            bounds=(
                [fm[0], 0.0, 1e-6, 0.0, -np.inf],
                [fm[-1], span, span, np.inf, np.inf],
            ),
            xtol=1e-13, ftol=1e-13, max_nfev=4000,
        )
        if best is None or sol.cost < best.cost:
            best = sol
    center, nu, fwhm, depth, baseline = best.x
    try:
        cov = np.linalg.inv(best.jac.T @ best.jac) * 2.0 * best.cost / max(len(fm) - 5, 1)
        nu_err = math.sqrt(max(cov[1, 1], 0.0))
    except np.linalg.LinAlgError:
        nu_err = math.nan
    # featureless data: the line depth is indistinguishable from zero
    contrast_span = float(np.max(c) - np.min(c))
    if depth <= max(3.0 * np.std(residual(best.x)), 1e-6 * (abs(baseline) + 1.0)) \
            or contrast_span <= 1e-12:
        nu = 0.0
    d_perp = constants.d_perpendicular * 1e-6
    return ZeroFieldFit(
        nu_dip_khz=nu * 1e3,
        nu_uncertainty_khz=nu_err * 1e3,
        sigma_e_v_per_cm=nu / d_perp,
        power_width_khz=fwhm * 1e3,
        gamma_elec_khz=nu * 1e3 * constants.d_parallel / constants.d_perpendicular,
        center_mhz=center,
        residual_norm=math.sqrt(2.0 * best.cost),
    )
