"""Monte Carlo time-domain simulation of pulse sequences.

Two simulators share the sequence vocabulary:

* a spin-1 phase model for a single center under Gaussian quadratic
  (``Sz^2``) and linear (``Sz``) static disorder, which captures the
  selectivity of double-quantum and state-swap echo sequences, and
* an exact two-spin unitary simulator with finite-duration pulses and
  per-shot amplitude errors for studying how decoupling sequences expose
  the like-spin dipolar interaction.

Frequencies are cyclic MHz, times microseconds; propagators are exact
matrix exponentials of piecewise-constant Hamiltonians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .fitkit import DecayCurve

TWO_PI = 2.0 * math.pi

SEQUENCE_KINDS = (
    "ramsey", "dq_ramsey", "hahn", "cpmg", "xy8", "xy16", "x_x",
    "strain_cpmg", "deer_pulse_sweep", "deer_duration_sweep",
)

PAIR_SEQUENCES = ("ramsey", "hahn", "cpmg", "xy8", "xy16", "x_x")

XY8_PHASES = (0.0, 0.5, 0.0, 0.5, 0.5, 0.0, 0.5, 0.0)  # X Y X Y Y X Y X, units of pi


class PulseSimError(ValueError):
    """Raised on invalid simulator configuration."""


@dataclass(frozen=True)
class SequenceSpec:
    """Pulse sequence identity: kind, spacing, repetitions, sweep mode."""

    kind: str
    tau_ns: float = 1000.0
    n_reps: int = 1
    sweep: str = "sweep_tau_fixed_n"

    def __post_init__(self):
        if self.kind not in SEQUENCE_KINDS:
            raise PulseSimError(f"unknown sequence kind '{self.kind}'")
        if self.tau_ns <= 0:
            raise PulseSimError("tau must be positive")
        if self.n_reps < 1:
            raise PulseSimError("repetition count must be >= 1")
        if self.sweep not in ("sweep_tau_fixed_n", "sweep_n_fixed_tau"):
            raise PulseSimError(f"unknown sweep mode '{self.sweep}'")

    def pulse_phases(self) -> tuple[float, ...]:
        """Phases (units of pi) of the pi-pulse train."""
        if self.kind in ("ramsey", "dq_ramsey"):
            return ()
        if self.kind == "hahn":
            return (0.5,)
        if self.kind in ("cpmg", "strain_cpmg"):
            return (0.5,) * self.n_reps
        if self.kind == "xy8":
            return XY8_PHASES * self.n_reps
        if self.kind == "xy16":
            inverted = tuple(p + 1.0 for p in XY8_PHASES)
            return (XY8_PHASES + inverted) * self.n_reps
        if self.kind == "x_x":
            return tuple((0.0 if k % 2 == 0 else 1.0) for k in range(self.n_reps))
        raise PulseSimError(f"sequence '{self.kind}' has no pi-train form")


@dataclass(frozen=True)
class PulseParams:
    """Finite pulse duration and per-shot amplitude error."""

    pi_duration_ns: float = 0.0
    amplitude_error_sigma: float = 0.0
    rabi_mhz: float | None = None

    def __post_init__(self):
        if self.pi_duration_ns < 0:
            raise PulseSimError("pulse duration must be >= 0")
        if not 0.0 <= self.amplitude_error_sigma < 1.0:
            raise PulseSimError("amplitude error fraction must be in [0, 1)")

    @property
    def pi_duration_us(self) -> float:
        return self.pi_duration_ns * 1e-3

    def rabi(self) -> float:
        """Rabi frequency (cyclic MHz) realizing a pi pulse in the set time."""
        if self.rabi_mhz is not None:
            return self.rabi_mhz
        if self.pi_duration_ns == 0:
            return math.inf
        return 1.0 / (2.0 * self.pi_duration_us)


@dataclass(frozen=True)
class NoiseModel:
    """Static disorder and pair-interaction statistics for the Monte Carlo.

    Magnitudes are cyclic MHz: quote an angular 2 pi x 1 MHz as 1.0.
    ``interaction_form`` is fixed to the like-spin secular dipolar form
    (flip-flop plus Ising) unless a pure Ising coupling is requested.
    """

    disorder_sigma_mhz: float = 1.0
    interaction_scale_mhz: float = 0.01
    interaction_form: str = "xxyy_mzz"
    v_mode: str = "dipolar"          # dipolar-distributed or fixed magnitude
    draws: int = 2000
    seed: int = 20240501

    def __post_init__(self):
        if self.disorder_sigma_mhz < 0 or self.interaction_scale_mhz < 0:
            raise PulseSimError("noise scales must be >= 0")
        if self.draws < 1:
            raise PulseSimError("need at least one draw")
        if self.interaction_form not in ("xxyy_mzz", "zz"):
            raise PulseSimError("interaction form must be 'xxyy_mzz' or 'zz'")
        if self.v_mode not in ("dipolar", "fixed"):
            raise PulseSimError("v_mode must be 'dipolar' or 'fixed'")


# dimensionless dipolar sampling shell [a, 1/a]; E[r^-6] = 1 over the
# shell, so the raw coupling variance is E[(1-3u^2)^2] = 4/5
_SHELL_INNER = 0.4
_DIPOLAR_RAW_STD = math.sqrt(0.8)


def sample_couplings(rng: np.random.Generator, noise: NoiseModel, size: int) -> np.ndarray:
    """Pair couplings with standard deviation ``interaction_scale_mhz``."""
    if noise.v_mode == "fixed":
        return np.full(size, noise.interaction_scale_mhz)
    u = rng.uniform(-1.0, 1.0, size)
    a, b = _SHELL_INNER, 1.0 / _SHELL_INNER
    r3 = rng.uniform(a**3, b**3, size)  # uniform in volume
    raw = (1.0 - 3.0 * u * u) / r3
    return raw * (noise.interaction_scale_mhz / _DIPOLAR_RAW_STD)


# ---------------------------------------------------------------------------
# single-center phase model (spin 1, both microwave tones available)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingleSpinNoise:
    """Gaussian spreads of the quadratic (delta) and linear (a) terms."""

    delta_sigma_mhz: float = 0.0
    a_sigma_mhz: float = 0.0


def _phase_weights(seq: SequenceSpec) -> tuple[float, float]:
    """Coefficients (g_delta, g_a) multiplying total time in the phase.

    For the probed coherence, the quadratic term enters with g_delta and
    the linear term with g_a; echo trains null the static linear term,
    the state-swap train nulls nothing quadratic but echoes the linear
    part, and the double-quantum coherence doubles the linear term while
    dropping the quadratic one.
    """
    kind = seq.kind
    if kind == "ramsey":
        return 1.0, 1.0
    if kind == "dq_ramsey":
        return 0.0, 2.0
    if kind in ("hahn", "cpmg", "xy8", "xy16", "x_x"):
        return 0.0, 0.0
    if kind == "strain_cpmg":
        return 1.0, 0.0
    raise PulseSimError(f"sequence '{kind}' is not a single-center sequence")


def simulate_single_spin_ensemble(
    noise: SingleSpinNoise,
    seq: SequenceSpec,
    draws: int = 2000,
    seed: int = 7,
    t_grid_us: np.ndarray | None = None,
) -> DecayCurve:
    """Ensemble-averaged coherence of a spin-1 center under static disorder.

    Ideal instantaneous pulses; each draw samples the quadratic and
    linear detunings and the signal is the average accumulated-phase
    cosine, so the curve is exact up to Monte Carlo error.
    """
    if draws < 2:
        raise PulseSimError("need at least two draws for error estimates")
    g_delta, g_a = _phase_weights(seq)
    if t_grid_us is None:
        sigma_eff = abs(g_delta) * noise.delta_sigma_mhz + abs(g_a) * noise.a_sigma_mhz
        t_max = 3.0 / (TWO_PI * sigma_eff) if sigma_eff > 0 else 10.0
        t_grid_us = np.linspace(t_max / 40.0, t_max, 40)
    rng = np.random.default_rng(seed)
    delta = rng.normal(0.0, noise.delta_sigma_mhz, draws)
    a = rng.normal(0.0, noise.a_sigma_mhz, draws)
    phase_rate = TWO_PI * (g_delta * delta + g_a * a)  # rad/us per draw
    phases = np.outer(phase_rate, t_grid_us)
    samples = np.cos(phases)
    signal = samples.mean(axis=0)
    sigma = samples.std(axis=0, ddof=1) / math.sqrt(draws)
    return DecayCurve(
        t_us=t_grid_us, signal=signal, sigma=sigma,
        meta={"sequence": seq.kind, "draws": draws, "seed": seed,
              "delta_sigma_mhz": noise.delta_sigma_mhz, "a_sigma_mhz": noise.a_sigma_mhz},
    )


# ---------------------------------------------------------------------------
# exact two-spin simulator
# ---------------------------------------------------------------------------

_SX = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
_SY = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
_SZ = np.array([[0.5, 0], [0, -0.5]], dtype=complex)
_ID = np.eye(2, dtype=complex)

_SX1 = np.kron(_SX, _ID)
_SY1 = np.kron(_SY, _ID)
_SZ1 = np.kron(_SZ, _ID)
_SX2 = np.kron(_ID, _SX)
_SY2 = np.kron(_ID, _SY)
_SZ2 = np.kron(_ID, _SZ)

_INTERACTION = {
    "xxyy_mzz": _SX1 @ _SX2 + _SY1 @ _SY2 - _SZ1 @ _SZ2,
    "zz": _SZ1 @ _SZ2,
}


def _batched_propagator(h_mhz: np.ndarray, dt_us: float) -> np.ndarray:
    """exp(-2 pi i H dt) for a stack of Hermitian matrices."""
    vals, vecs = np.linalg.eigh(h_mhz)
    phase = np.exp(-1j * TWO_PI * vals * dt_us)
    return np.einsum("dij,dj,dkj->dik", vecs, phase, vecs.conj())


def _unitarity_defect(u: np.ndarray) -> float:
    eye = np.eye(u.shape[-1])
    return float(np.abs(np.einsum("dij,dkj->dik", u, u.conj()) - eye).max())


@dataclass
class _DrawEnsemble:
    h_free: np.ndarray        # (draws, 4, 4)
    rabi_scale: np.ndarray    # (draws,) per-shot amplitude factor
    couplings: np.ndarray     # (draws,)


def _draw_ensemble(
    noise: NoiseModel, pulses: PulseParams, drive_second: bool = True
) -> _DrawEnsemble:
    rng = np.random.default_rng(noise.seed)
    d1 = rng.normal(0.0, noise.disorder_sigma_mhz, noise.draws)
    d2 = rng.normal(0.0, noise.disorder_sigma_mhz, noise.draws)
    v = sample_couplings(rng, noise, noise.draws)
    h_free = (
        d1[:, None, None] * _SZ1
        + d2[:, None, None] * _SZ2
        + v[:, None, None] * _INTERACTION[noise.interaction_form]
    )
    rabi_scale = 1.0 + rng.normal(0.0, pulses.amplitude_error_sigma, noise.draws) \
        if pulses.amplitude_error_sigma > 0 else np.ones(noise.draws)
    return _DrawEnsemble(h_free=h_free, rabi_scale=rabi_scale, couplings=v)


def _pulse_propagators(
    ensemble: _DrawEnsemble,
    pulses: PulseParams,
    phases_pi: Sequence[float],
    angle_pi: float,
    drive_second: bool,
) -> dict[float, np.ndarray]:
    """Propagators for each distinct pulse phase (finite or instantaneous)."""
    out = {}
    drive_x = _SX1 + (_SX2 if drive_second else 0.0)
    drive_y = _SY1 + (_SY2 if drive_second else 0.0)
    for phase in sorted(set(phases_pi)):
        axis = math.cos(math.pi * phase) * drive_x + math.sin(math.pi * phase) * drive_y
        if pulses.pi_duration_ns == 0:
            # rotation by angle theta about the axis: exp(-i theta n.S)
            angles = angle_pi * math.pi * ensemble.rabi_scale
            vals, vecs = np.linalg.eigh(axis)
            rot = np.exp(-1j * np.multiply.outer(angles, vals))
            out[phase] = np.einsum("ij,dj,kj->dik", vecs, rot, vecs.conj())
        else:
            duration = pulses.pi_duration_us * angle_pi
            rabi = pulses.rabi() * ensemble.rabi_scale
            h = ensemble.h_free + rabi[:, None, None] * axis
            out[phase] = _batched_propagator(h, duration)
    return out


def _free_propagator(ensemble: _DrawEnsemble, dt_us: float) -> np.ndarray:
    return _batched_propagator(ensemble.h_free, dt_us)


def _sequence_signal(
    ensemble: _DrawEnsemble,
    seq: SequenceSpec,
    pulses: PulseParams,
    total_time_us: float,
    drive_second: bool = True,
) -> tuple[float, float]:
    """Mean and standard error of the readout for one total time."""
    phases = seq.pulse_phases()
    n_pulses = len(phases)
    t_pi = pulses.pi_duration_us
    if n_pulses:
        tau = total_time_us / n_pulses
        gap = tau - t_pi
        if gap < -1e-12:
            raise PulseSimError("pulses overlap: tau shorter than the pi duration")
        half_gap = max(gap / 2.0, 0.0)
    pi_props = _pulse_propagators(ensemble, pulses, phases, 1.0, drive_second)
    half_props = _pulse_propagators(ensemble, pulses, (0.0,), 0.5, drive_second)
    draws = ensemble.h_free.shape[0]
    psi = np.zeros((draws, 4), dtype=complex)
    psi[:, 0] = 1.0

    def apply(u):
        nonlocal psi
        psi = np.einsum("dij,dj->di", u, psi)

    apply(half_props[0.0])
    if n_pulses == 0:
        apply(_free_propagator(ensemble, total_time_us))
    else:
        u_half_gap = _free_propagator(ensemble, half_gap)
        for phase in phases:
            apply(u_half_gap)
            apply(pi_props[phase])
            apply(u_half_gap)
    apply(half_props[0.0])
    # population difference of spin 1 after the closing pulse
    sz1 = np.real(np.einsum("di,ij,dj->d", psi.conj(), _SZ1, psi))
    samples = -2.0 * sz1
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(draws))


def default_tau_grid_ns(n_points: int = 40) -> np.ndarray:
    """Log-spaced pulse spacings from 50 ns to 20 us."""
    return np.geomspace(50.0, 20000.0, n_points)


def simulate_interacting_pairs(
    noise: NoiseModel,
    pulses: PulseParams,
    seq: SequenceSpec,
    tau_grid_ns: np.ndarray | None = None,
    n_grid: Sequence[int] | None = None,
    drive_second: bool = True,
) -> DecayCurve:
    """Ensemble decay of one spin of dipolar-coupled pairs under a sequence.

    Each draw holds a pair with Gaussian on-site disorder and a sampled
    coupling; evolution is exact, including finite pulses with per-shot
    amplitude error.  The sweep follows ``seq.sweep``: the time axis is
    the total evolution time either way.
    """
    if seq.kind not in PAIR_SEQUENCES:
        raise PulseSimError(f"'{seq.kind}' is not a pair-simulator sequence")
    ensemble = _draw_ensemble(noise, pulses, drive_second)
    points: list[tuple[float, float, float]] = []
    if seq.kind == "ramsey":
        grid = (tau_grid_ns if tau_grid_ns is not None else default_tau_grid_ns()) * 1e-3
        for t in grid:
            mean, err = _sequence_signal(ensemble, seq, pulses, t, drive_second)
            points.append((t, mean, err))
    elif seq.sweep == "sweep_tau_fixed_n":
        grid = (tau_grid_ns if tau_grid_ns is not None else default_tau_grid_ns()) * 1e-3
        n_pulses = len(seq.pulse_phases())
        for tau in grid:
            if tau < pulses.pi_duration_us:
                continue
            total = tau * n_pulses
            mean, err = _sequence_signal(ensemble, seq, pulses, total, drive_second)
            points.append((total, mean, err))
    else:
        if n_grid is None:
            n_grid = [2**k for k in range(0, 7)]
        for n in n_grid:
            spec_n = replace(seq, n_reps=int(n))
            total = seq.tau_ns * 1e-3 * len(spec_n.pulse_phases())
            mean, err = _sequence_signal(ensemble, spec_n, pulses, total, drive_second)
            points.append((total, mean, err))
    points.sort(key=lambda item: item[0])
    t = np.array([p[0] for p in points])
    signal = np.array([p[1] for p in points])
    sigma = np.array([p[2] for p in points])
    return DecayCurve(
        t_us=t, signal=signal, sigma=np.maximum(sigma, 1e-12),
        meta={
            "sequence": seq.kind, "n_reps": seq.n_reps, "sweep": seq.sweep,
            "draws": noise.draws, "seed": noise.seed,
            "disorder_sigma_mhz": noise.disorder_sigma_mhz,
            "interaction_scale_mhz": noise.interaction_scale_mhz,
            "pi_duration_ns": pulses.pi_duration_ns,
            "amplitude_error_sigma": pulses.amplitude_error_sigma,
        },
    )


def propagator_unitarity_defect(noise: NoiseModel, pulses: PulseParams) -> float:
    """Largest deviation of draw propagators from unitarity (diagnostic)."""
    ensemble = _draw_ensemble(noise, pulses)
    defect = _unitarity_defect(_free_propagator(ensemble, 1.0))
    props = _pulse_propagators(ensemble, pulses, (0.0, 0.5), 1.0, True)
    for u in props.values():
        defect = max(defect, _unitarity_defect(u))
    return defect


# ---------------------------------------------------------------------------
# convergence study and Monte Carlo statistics
# ---------------------------------------------------------------------------


def fit_curve_rate(curve: DecayCurve) -> tuple[float, float]:
    """Exponential rate (kHz) of a decay curve with its uncertainty.

    Fits the decaying portion from the curve maximum onward, dropping any
    pulse-error transient at short times, and fits unweighted: early-time
    Monte Carlo errors can be vanishingly small and would otherwise
    dominate the weights.
    """
    from . import fitkit

    start = int(np.argmax(curve.signal))
    if len(curve.t_us) - start < 8:
        start = 0
    bare = DecayCurve(curve.t_us[start:], curve.signal[start:], None, dict(curve.meta))
    bounds = {"amplitude": (0.0, 2.0), "offset": (-1.0, 1.0)}
    try:
        result = fitkit.fit_decay(bare, "exp", bounds=bounds)
    except fitkit.FitNonConvergence as err:
        result = err.best
    return result.rate_khz, result.uncertainties.get("rate_khz", math.nan)


def sweep_convergence(
    noise: NoiseModel,
    pulses: PulseParams,
    family: str = "xy8",
    n_list: Sequence[int] = (1, 2, 4, 8),
    t_max_us: float = 24.0,
    n_points: int = 16,
) -> dict:
    """Fitted decay rate of an echo-train family versus repetition count.

    Each repetition count is swept in tau over the same total-time grid,
    so the fits compare like for like.  Flags non-convergence when the
    last doubling still moves the rate by more than 10%.
    """
    rates = []
    for n in n_list:
        seq = SequenceSpec(kind=family, n_reps=int(n), sweep="sweep_tau_fixed_n")
        n_pulses = len(seq.pulse_phases())
        t_min = max(n_pulses * pulses.pi_duration_us * 1.25, t_max_us / 40.0)
        tau_grid = np.linspace(t_min, t_max_us, n_points) / n_pulses * 1e3
        curve = simulate_interacting_pairs(noise, pulses, seq, tau_grid_ns=tau_grid)
        rate, err = fit_curve_rate(curve)
        rates.append({"n_reps": int(n), "rate_khz": rate, "rate_err_khz": err})
    asymptote = rates[-1]["rate_khz"]
    converged = True
    if len(rates) >= 2:
        prev = rates[-2]["rate_khz"]
        converged = abs(asymptote - prev) <= 0.10 * max(abs(asymptote), 1e-12)
    return {"rates": rates, "asymptote_khz": asymptote, "converged": converged}


def mc_statistics(samples: np.ndarray) -> dict:
    """Per-point mean, standard error and spread for Monte Carlo samples.

    ``samples`` has draws on the first axis.  The standard error is the
    sample standard deviation over the square root of the draw count.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    draws = samples.shape[0]
    if draws < 2:
        raise PulseSimError("need at least two draws for statistics")
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1)
    return {
        "draws": draws,
        "mean": mean,
        "std": std,
        "standard_error": std / math.sqrt(draws),
    }


def curves_consistent(a: DecayCurve, b: DecayCurve, n_sigma: float = 3.0) -> bool:
    """Whether two curves agree within combined Monte Carlo error."""
    if len(a.t_us) != len(b.t_us) or not np.allclose(a.t_us, b.t_us):
        raise PulseSimError("curves must share a time axis")
    sig_a = a.sigma if a.sigma is not None else np.zeros_like(a.signal)
    sig_b = b.sigma if b.sigma is not None else np.zeros_like(b.signal)
    combined = np.hypot(sig_a, sig_b)
    return bool(np.all(np.abs(a.signal - b.signal) <= n_sigma * np.maximum(combined, 1e-12)))
