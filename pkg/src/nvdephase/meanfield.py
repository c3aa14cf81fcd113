"""Mean-field spin-bath dephasing engine.

Predicts ensemble dephasing rates of a central NV spin surrounded by
randomly placed bath spins.  The secular dipolar coupling to a bath spin
at (r, theta, phi) scales as (1 - 3 cos^2 theta)/r^3, so averaging the
accumulated phase over homogeneously distributed spins reduces to a
radial integral with a closed form and an angular integral performed by
spherical quadrature.  Pulse sequences enter as gate functions: a +/-1
sensor toggling function and 0/1 occupancy functions for bath levels
swapped by resonant pulses.

Rates are linear in bath density and quoted per ppm of carbon sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .constants import (
    DEFAULT_CONSTANTS,
    GAUSS_TO_TESLA,
    MAGIC_COS2,
    PPM_PER_NM3,
    PhysicalConstants,
)
from . import spin_core
from .spin_core import (
    OFF_AXIS,
    ON_AXIS,
    Orientation,
    SpinQuantum,
    eigensystem,
    spin_operators,
)


class MeanFieldError(ValueError):
    """Raised on invalid engine inputs."""


class QuadratureError(RuntimeError):
    """Sphere quadrature failed to converge; carries the achieved estimate."""

    def __init__(self, message: str, error_estimate: float):
        super().__init__(message)
        self.error_estimate = error_estimate


# ---------------------------------------------------------------------------
# sphere quadrature
# ---------------------------------------------------------------------------

_MAGIC_U = math.sqrt(MAGIC_COS2)


def sphere_grid(order: int, n_phi: int = 8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadrature nodes (u = cos theta, phi) and weights summing to 4 pi.

    Gauss-Legendre panels in u, split at the magic angles where the
    secular dipolar kernel has |.| kinks, crossed with a uniform phi grid.
    """
    if order < 2:
        raise MeanFieldError("quadrature order must be >= 2")
    u_nodes = []
    u_weights = []
    for lo, hi in ((-1.0, -_MAGIC_U), (-_MAGIC_U, _MAGIC_U), (_MAGIC_U, 1.0)):
        x, w = np.polynomial.legendre.leggauss(order)
        u_nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        u_weights.append(0.5 * (hi - lo) * w)
    u = np.concatenate(u_nodes)
    wu = np.concatenate(u_weights)
    phi = (np.arange(n_phi) + 0.5) * (2.0 * math.pi / n_phi)
    wphi = np.full(n_phi, 2.0 * math.pi / n_phi)
    uu, pp = np.meshgrid(u, phi, indexing="ij")
    ww = np.outer(wu, wphi)
    return uu.ravel(), pp.ravel(), ww.ravel()


def integrate_sphere(
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    rel_tol: float = 1e-3,
    orders: Sequence[int] = (4, 8, 16, 32),
) -> float:
    """Integrate fn(u, phi) over the unit sphere with order escalation."""
    previous = None
    estimate = math.inf
    for order in orders:
        u, phi, w = sphere_grid(order)
        value = float(np.sum(w * fn(u, phi)))
        if previous is not None:
            scale = max(abs(value), abs(previous), 1e-300)
            estimate = abs(value - previous) / scale
            if estimate < rel_tol:
                return value
        previous = value
    raise QuadratureError(
        f"sphere quadrature did not reach relative tolerance {rel_tol:g}; "
        f"achieved {estimate:.2e}",
        error_estimate=estimate,
    )


#: exact angular integral of |1 - 3 u^2| over the sphere
ANGULAR_KERNEL_INTEGRAL = 16.0 * math.pi / (3.0 * math.sqrt(3.0))


# ---------------------------------------------------------------------------
# sequence gate functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseConstant:
    """Piecewise-constant function on [0, T] given by breakpoints and values."""

    breaks: tuple[float, ...]   # length k + 1, strictly increasing
    values: tuple[float, ...]   # length k

    def __post_init__(self):
        if len(self.breaks) != len(self.values) + 1:
            raise MeanFieldError("breaks must be one longer than values")
        diffs = np.diff(self.breaks)
        if len(diffs) == 0 or np.any(diffs <= 0):
            raise MeanFieldError("breakpoints must be strictly increasing")

    def __call__(self, t: float) -> float:
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        idx = min(max(idx, 0), len(self.values) - 1)
        return self.values[idx]

    def integral(self) -> float:
        return float(np.dot(np.diff(self.breaks), self.values))


@dataclass(frozen=True)
class DrivenPair:
    """Bath level pair swapped by resonant pulses at the given times."""

    level_a: int
    level_b: int
    swap_times: tuple[float, ...]

    def occupancy(self, total_time: float) -> PiecewiseConstant:
        """0/1 indicator that a spin starting in level_a still occupies it."""
        breaks = (0.0, *self.swap_times, total_time)
        values = tuple((-1.0) ** k * 0.5 + 0.5 for k in range(len(self.swap_times) + 1))
        return PiecewiseConstant(breaks, values)


@dataclass(frozen=True)
class SequenceGates:
    """Gate-function description of a pulse sequence.

    ``s_nv`` takes values +/-1 and flips at sensor pi pulses; each driven
    pair carries the times at which bath pulses swap its two levels.
    """

    s_nv: PiecewiseConstant
    total_time_us: float
    driven_pairs: tuple[DrivenPair, ...] = ()

    def __post_init__(self):
        if self.total_time_us <= 0:
            raise MeanFieldError("total time must be positive")
        if set(self.s_nv.values) - {-1.0, 1.0}:
            raise MeanFieldError("s_nv values must be +/-1")
        if abs(self.s_nv.breaks[0]) > 1e-15 or abs(self.s_nv.breaks[-1] - self.total_time_us) > 1e-12:
            raise MeanFieldError("s_nv must span [0, total_time]")
        seen: set[int] = set()
        for pair in self.driven_pairs:
            if pair.level_a == pair.level_b:
                raise MeanFieldError("driven pair levels must differ")
            if seen & {pair.level_a, pair.level_b}:
                raise MeanFieldError("driven pairs must be disjoint")
            seen |= {pair.level_a, pair.level_b}
            if any(not 0.0 < t < self.total_time_us for t in pair.swap_times):
                raise MeanFieldError("swap times must lie strictly inside the sequence")

    def r_function(self, level: int) -> PiecewiseConstant:
        """Occupancy gate r_level(t) for a spin that starts in ``level``."""
        for pair in self.driven_pairs:
            if level in (pair.level_a, pair.level_b):
                occ = pair.occupancy(self.total_time_us)
                if level == pair.level_a:
                    return occ
                return PiecewiseConstant(occ.breaks, tuple(1.0 - v for v in occ.values))
        return PiecewiseConstant((0.0, self.total_time_us), (1.0,))

    def level_phase_integrals(self, couplings: np.ndarray) -> np.ndarray:
        """Per starting level: integral of s_nv(t) times the active coupling.

        Undriven levels keep their own coupling for the whole sequence;
        a spin starting in one level of a driven pair alternates between
        the pair's two couplings at each swap.
        """
        couplings = np.asarray(couplings, dtype=float)
        merged = sorted(set(self.s_nv.breaks) | {0.0, self.total_time_us} | {
            t for pair in self.driven_pairs for t in pair.swap_times
        })
        out = couplings * self.s_nv.integral()
        for pair in self.driven_pairs:
            occ = pair.occupancy(self.total_time_us)
            g_a = g_b = 0.0
            for lo, hi in zip(merged[:-1], merged[1:]):
                mid = 0.5 * (lo + hi)
                dt = hi - lo
                s = self.s_nv(mid)
                chi = occ(mid)
                w_a, w_b = couplings[pair.level_a], couplings[pair.level_b]
                g_a += s * dt * (chi * w_a + (1.0 - chi) * w_b)
                g_b += s * dt * (chi * w_b + (1.0 - chi) * w_a)
            out[pair.level_a] = g_a
            out[pair.level_b] = g_b
        return out


def free_evolution_gates(total_time_us: float) -> SequenceGates:
    """Ramsey-style gates: s_nv = +1 throughout, no bath pulses."""
    return SequenceGates(
        s_nv=PiecewiseConstant((0.0, total_time_us), (1.0,)),
        total_time_us=total_time_us,
    )


def hahn_echo_gates(total_time_us: float) -> SequenceGates:
    """Echo gates: s_nv flips sign at the midpoint."""
    t2 = 0.5 * total_time_us
    return SequenceGates(
        s_nv=PiecewiseConstant((0.0, t2, total_time_us), (1.0, -1.0)),
        total_time_us=total_time_us,
    )


def pi_train_gates(total_time_us: float, n_pi: int) -> SequenceGates:
    """Evenly spaced pi-pulse train: sign flips at odd multiples of T/2n."""
    if n_pi < 1:
        raise MeanFieldError("need at least one pi pulse")
    flips = [(2 * k + 1) * total_time_us / (2 * n_pi) for k in range(n_pi)]
    breaks = (0.0, *flips, total_time_us)
    values = tuple((-1.0) ** k for k in range(n_pi + 1))
    return SequenceGates(PiecewiseConstant(breaks, values), total_time_us)


def deer_duration_gates(total_time_us: float, pair: tuple[int, int]) -> SequenceGates:
    """Duration-sweep DEER: echo with the bath pair swapped at the echo pulse."""
    base = hahn_echo_gates(total_time_us)
    driven = DrivenPair(pair[0], pair[1], (0.5 * total_time_us,))
    return SequenceGates(base.s_nv, total_time_us, (driven,))


def deer_pulse_sweep_gates(
    t_fix_us: float, rf_time_us: float, pair: tuple[int, int]
) -> SequenceGates:
    """Pulse-sweep DEER: fixed echo of length 2 T_fix, bath pulse swept.

    ``rf_time_us`` is the offset of the bath pulse from the end of the
    sequence; the swap happens at 2 T_fix - rf_time.
    """
    if not 0.0 < rf_time_us < t_fix_us:
        raise MeanFieldError("rf offset must lie inside the second half")
    total = 2.0 * t_fix_us
    base = hahn_echo_gates(total)
    driven = DrivenPair(pair[0], pair[1], (total - rf_time_us,))
    return SequenceGates(base.s_nv, total, (driven,))


def driven_evolution_gates(
    total_time_us: float,
    pairs: Sequence[tuple[int, int]],
    swaps_per_pair: int = 16,
) -> SequenceGates:
    """Free evolution with bath pairs swapped on a midpoint-symmetric comb.

    The symmetric placement makes each driven level accumulate exactly the
    pair-averaged coupling, the ideal fast-driving limit.
    """
    step = total_time_us / swaps_per_pair
    times = tuple((k + 0.5) * step for k in range(swaps_per_pair))
    driven = tuple(DrivenPair(a, b, times) for a, b in pairs)
    return SequenceGates(
        PiecewiseConstant((0.0, total_time_us), (1.0,)), total_time_us, driven
    )


# ---------------------------------------------------------------------------
# bath species
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BathSpeciesSpec:
    """Spin structure of one bath species.

    The coupling spin is the electron when present, else the nucleus.
    ``orientations`` lists (axis, fractional weight) pairs; populations
    default to fully thermal (uniform) and are given per orientation.
    """

    name: str
    gamma: float                                   # MHz/T of the coupling spin
    electron_spin: float | None = 0.5
    nuclear_spin: float | None = None
    hyperfine_parallel: float = 0.0                # MHz
    hyperfine_perp: float = 0.0                    # MHz
    quadrupole: float = 0.0                        # MHz
    zero_field_splitting: float = 0.0              # MHz, for spin-1 electron baths
    orientations: tuple[tuple[Orientation, float], ...] = ((ON_AXIS, 1.0),)
    level_populations: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.electron_spin is None and self.nuclear_spin is None:
            raise MeanFieldError("species needs at least one spin")
        weights = [w for _, w in self.orientations]
        if abs(sum(weights) - 1.0) > 1e-9 or any(w < 0 for w in weights):
            raise MeanFieldError("orientation weights must be non-negative and sum to 1")
        if self.level_populations is not None:
            if len(self.level_populations) != len(self.orientations):
                raise MeanFieldError("populations must be given per orientation")
            for pops in self.level_populations:
                if len(pops) != self.dim or abs(sum(pops) - 1.0) > 1e-9 or min(pops) < 0:
                    raise MeanFieldError("populations must be a distribution per level")

    @property
    def coupling_spin(self) -> float:
        return self.electron_spin if self.electron_spin is not None else self.nuclear_spin

    @property
    def dim(self) -> int:
        dim = 1
        if self.electron_spin is not None:
            dim *= SpinQuantum(self.electron_spin).dim
        if self.nuclear_spin is not None:
            dim *= SpinQuantum(self.nuclear_spin).dim
        return dim

    def populations(self, orientation_index: int) -> np.ndarray:
        if self.level_populations is None:
            return np.full(self.dim, 1.0 / self.dim)
        return np.asarray(self.level_populations[orientation_index], dtype=float)


def electron_species(gamma: float | None = None, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Bare electron spin-1/2 bath aligned with the probe axis."""
    return BathSpeciesSpec(name="electron", gamma=gamma if gamma is not None else constants.gamma_e)


def c13_species(constants: PhysicalConstants = DEFAULT_CONSTANTS) -> BathSpeciesSpec:
    """13C nuclear spin bath: bare spin 1/2 with the nuclear ratio."""
    return BathSpeciesSpec(
        name="c13", gamma=constants.gamma_c13, electron_spin=None, nuclear_spin=0.5
    )


def p1_species(constants: PhysicalConstants = DEFAULT_CONSTANTS) -> BathSpeciesSpec:
    """P1 centers on the four <111> axes: on-axis 1/4, off-axis 3/4."""
    return BathSpeciesSpec(
        name="p1",
        gamma=constants.gamma_e,
        electron_spin=0.5,
        nuclear_spin=1.0,
        hyperfine_parallel=constants.a_parallel_p1,
        hyperfine_perp=constants.a_perp_p1,
        quadrupole=constants.q_p1,
        orientations=((ON_AXIS, 0.25), (OFF_AXIS, 0.75)),
    )


def nv_offaxis_species(
    polarization: float = 0.72, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> BathSpeciesSpec:
    """Off-axis NV centers as a spin-1 electron bath.

    ``polarization`` is the optically pumped population of the m_s = 0
    level; the remainder is split evenly over m_s = +/-1.  Levels are
    ordered by energy, so at small fields m_s = 0 is the lowest level.
    """
    if not 0.0 <= polarization <= 1.0:
        raise MeanFieldError("polarization must be in [0, 1]")
    rest = 0.5 * (1.0 - polarization)
    pops = (polarization, rest, rest)
    return BathSpeciesSpec(
        name="nv_offaxis",
        gamma=constants.gamma_e,
        electron_spin=1.0,
        nuclear_spin=None,
        zero_field_splitting=constants.d_gs,
        orientations=((OFF_AXIS, 1.0),),
        level_populations=(pops,),
    )


# ---------------------------------------------------------------------------
# level structure: Hamiltonian, lab-frame coupling weights, drive strengths
# ---------------------------------------------------------------------------


def bath_operators(spec: BathSpeciesSpec, orientation: Orientation):
    """Coupling-spin vector operators and lab-frame z/x projections."""
    n_dim = SpinQuantum(spec.nuclear_spin).dim if spec.nuclear_spin is not None else 1
    if spec.electron_spin is not None:
        s_ops = [np.kron(op.entries, np.eye(n_dim)) for op in spin_operators(spec.electron_spin)]
    else:
        s_ops = [op.entries.copy() for op in spin_operators(spec.nuclear_spin)]
    zhat = orientation.to_frame(np.array([0.0, 0.0, 1.0]))
    xhat = orientation.to_frame(np.array([1.0, 0.0, 0.0]))
    w_op = sum(zhat[k] * s_ops[k] for k in range(3))
    drive_op = sum(xhat[k] * s_ops[k] for k in range(3))
    return s_ops, w_op, drive_op


def bath_hamiltonian(
    spec: BathSpeciesSpec,
    orientation: Orientation,
    b_field_t: np.ndarray,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> np.ndarray:
    """Bath Hamiltonian (MHz) in the defect frame with the field rotated in."""
    b = orientation.to_frame(np.asarray(b_field_t, dtype=float))
    e_dim = SpinQuantum(spec.electron_spin).dim if spec.electron_spin is not None else 1
    n_dim = SpinQuantum(spec.nuclear_spin).dim if spec.nuclear_spin is not None else 1
    s_ops, _, _ = bath_operators(spec, orientation)
    h = spec.gamma * sum(b[k] * s_ops[k] for k in range(3))
    if spec.zero_field_splitting:
        h = h + spec.zero_field_splitting * (s_ops[2] @ s_ops[2])
    if spec.electron_spin is not None and spec.nuclear_spin is not None:
        i_ops = [np.kron(np.eye(e_dim), op.entries) for op in spin_operators(spec.nuclear_spin)]
        h = h + spec.hyperfine_parallel * (s_ops[2] @ i_ops[2])
        h = h + spec.hyperfine_perp * (s_ops[0] @ i_ops[0] + s_ops[1] @ i_ops[1])
        h = h + spec.quadrupole * (i_ops[2] @ i_ops[2])
    return h


@dataclass(frozen=True)
class LevelStructure:
    orientation: Orientation
    weight: float
    energies: np.ndarray          # ascending, MHz
    coupling_weights: np.ndarray  # <lab-z coupling spin> per level
    drive_strengths: np.ndarray   # |<n|lab-x spin|m>|^2
    populations: np.ndarray


def _degenerate_clusters(values: np.ndarray, tol: float) -> list[list[int]]:
    clusters = [[0]]
    for i in range(1, len(values)):
        if values[i] - values[clusters[-1][-1]] < tol:
            clusters[-1].append(i)
        else:
            clusters.append([i])
    return clusters


def level_structure(
    spec: BathSpeciesSpec,
    b_field_t: np.ndarray,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    degeneracy_tol: float = 1e-9,
) -> list[LevelStructure]:
    """Eigenstructure per orientation with lab-frame coupling weights.

    The coupling weight of level i is the first-order shift of that level
    per unit of secular dipolar coupling, i.e. the expectation of the
    lab-z coupling-spin component; degenerate clusters are rotated to
    diagonalize it so the weights are well defined.
    """
    out = []
    for idx, (orientation, weight) in enumerate(spec.orientations):
        h = bath_hamiltonian(spec, orientation, b_field_t, constants)
        values, vectors = np.linalg.eigh(h)
        _, w_op, drive_op = bath_operators(spec, orientation)
        for cluster in _degenerate_clusters(values, degeneracy_tol):
            if len(cluster) == 1:
                continue
            sub = vectors[:, cluster]
            w_sub = sub.conj().T @ w_op @ sub
            _, rot = np.linalg.eigh(w_sub)
            vectors[:, cluster] = sub @ rot
        w = np.real(np.einsum("ji,jk,ki->i", vectors.conj(), w_op, vectors))
        elem = vectors.conj().T @ drive_op @ vectors
        out.append(LevelStructure(
            orientation=orientation,
            weight=weight,
            energies=values,
            coupling_weights=w,
            drive_strengths=np.abs(elem) ** 2,
            populations=spec.populations(idx),
        ))
    return out


def coupling_strengths(
    nv_level_pair: tuple[float, float],
    spec: BathSpeciesSpec,
    position: tuple[float, float, float],
    b_field_t: np.ndarray,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> np.ndarray:
    """Per-level shifts of the probe transition from one bath spin, MHz.

    ``position`` is (r_nm, theta, phi) of the bath spin relative to the
    probe; ``nv_level_pair`` holds the two probe Sz projections whose
    transition is observed.  Computed as the eigenvalue difference of the
    bath Hamiltonian with and without the secular coupling, with levels
    matched by maximal eigenvector overlap.  Shape: (orientations, levels).
    """
    r_nm, theta, _phi = position
    if r_nm <= 0:
        raise MeanFieldError("bath spin distance must be positive")
    m_lo, m_up = nv_level_pair
    j = (
        constants.dipolar_scale(spec.gamma, constants.gamma_e)
        * (1.0 - 3.0 * math.cos(theta) ** 2)
        / r_nm**3
    )
    delta_m = m_up - m_lo
    rows = []
    for orientation, _ in spec.orientations:
        h0 = bath_hamiltonian(spec, orientation, b_field_t, constants)
        _, w_op, _ = bath_operators(spec, orientation)
        vals0, vecs0 = np.linalg.eigh(h0)
        shifts = np.zeros(len(vals0))
        for m_nv, sign in ((m_up, 1.0), (m_lo, -1.0)):
            if m_nv == 0.0:
                continue
            vals1, vecs1 = np.linalg.eigh(h0 + j * m_nv * w_op)
            overlap = np.abs(vecs0.conj().T @ vecs1) ** 2
            row_ind, col_ind = linear_sum_assignment(-overlap)
            matched = np.empty_like(vals1)
            matched[row_ind] = vals1[col_ind]
            shifts += sign * (matched - vals0)
        rows.append(shifts)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# ensemble rates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RatePerDensity:
    """A dephasing rate per unit bath density with its provenance."""

    value_khz_per_ppm: float
    species: str
    b_gauss: float | None = None
    sequence: str = "free_evolution"
    transition: tuple[int, int] | None = None
    note: str = ""

    def __float__(self) -> float:
        return self.value_khz_per_ppm

    def rate_khz(self, density_ppm: float) -> float:
        return self.value_khz_per_ppm * density_ppm


def _engine_scale(spec: BathSpeciesSpec, constants: PhysicalConstants) -> float:
    """Density-normalized prefactor: 2 pi C (pi/6) per nm^-3, MHz nm^3."""
    coupling = constants.dipolar_scale(spec.gamma, constants.gamma_e)
    return 2.0 * math.pi * coupling * math.pi / 6.0


def ensemble_decay_rate(
    spec: BathSpeciesSpec,
    b_field_t: np.ndarray,
    gates: SequenceGates,
    density_ppm: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    quad_rel_tol: float = 1e-3,
) -> float:
    """Ensemble dephasing rate (kHz) for the given sequence gate functions.

    The decay exponent at total time T is the density times the sphere
    integral of the per-level filtered phase magnitudes; dividing by T
    gives the rate of the exponential envelope.
    """
    if density_ppm < 0:
        raise MeanFieldError("density must be non-negative")
    if density_ppm == 0.0:
        return 0.0
    angular = integrate_sphere(lambda u, phi: np.abs(1.0 - 3.0 * u * u), rel_tol=quad_rel_tol)
    level_sum = 0.0
    for struct in level_structure(spec, b_field_t, constants):
        phases = gates.level_phase_integrals(struct.coupling_weights)
        level_sum += struct.weight * float(np.dot(struct.populations, np.abs(phases)))
    exponent = (
        _engine_scale(spec, constants)
        * density_ppm * PPM_PER_NM3
        * angular
        * level_sum
    )
    rate_mhz = exponent / gates.total_time_us
    return rate_mhz * 1e3


def analytic_rate_aligned_halfspin(
    gamma_b: float, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> RatePerDensity:
    """Closed-form free-evolution rate for an aligned spin-1/2 bath.

    The angular integral of |1 - 3 cos^2 theta| evaluates exactly, giving
    (4 pi^2 / 9 sqrt(3)) * 2 pi * C per spin density, with C the dipolar
    coupling scale.  Serves as the oracle for the quadrature engine.
    """
    if gamma_b <= 0:
        raise MeanFieldError("gyromagnetic ratio must be positive")
    coupling = constants.dipolar_scale(gamma_b, constants.gamma_e)
    rate_mhz = (
        4.0 * math.pi**2 / (9.0 * math.sqrt(3.0))
        * 2.0 * math.pi
        * coupling
        * PPM_PER_NM3
    )
    return RatePerDensity(
        value_khz_per_ppm=rate_mhz * 1e3,
        species="aligned electron-like spin-1/2",
        sequence="free_evolution",
        note=f"gamma_b = {gamma_b} MHz/T",
    )


def static_rate_per_ppm(
    spec: BathSpeciesSpec,
    b_field_t: np.ndarray,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """Free-evolution dephasing rate per ppm (kHz/ppm)."""
    gates = free_evolution_gates(1.0)
    return ensemble_decay_rate(spec, b_field_t, gates, 1.0, constants)


# ---------------------------------------------------------------------------
# DEER rates
# ---------------------------------------------------------------------------

#: finite pulse-fidelity correction to DEER rate-per-density factors;
#: incomplete bath flips raise the density inferred from a measured rate
DEER_FINITE_PULSE_FACTOR = 13.0 / 11.0

DEER_MODES = ("duration_sweep", "pulse_sweep")


def _line_allowed(struct: LevelStructure, pair: tuple[int, int], threshold: float) -> bool:
    off_diag = ~np.eye(len(struct.energies), dtype=bool)
    peak = struct.drive_strengths[off_diag].max()
    return struct.drive_strengths[pair[0], pair[1]] >= threshold * peak


def deer_rate(
    spec: BathSpeciesSpec,
    b_field_t: np.ndarray,
    pair: tuple[int, int],
    orientation_index: int,
    mode: str = "duration_sweep",
    finite_pulse_correction: bool = False,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    amplitude_threshold: float = spin_core.DEFAULT_AMPLITUDE_THRESHOLD,
) -> RatePerDensity:
    """Recoupled decay rate per ppm when one bath transition is driven.

    The rate is quoted per ppm of the *total* species density; only the
    selected orientation group responds to the drive.  ``duration_sweep``
    rates are per unit total evolution time, ``pulse_sweep`` rates per
    unit bath-pulse offset at fixed echo length (twice as steep).
    """
    if mode not in DEER_MODES:
        raise MeanFieldError(f"mode must be one of {DEER_MODES}")
    structs = level_structure(spec, b_field_t, constants)
    struct = structs[orientation_index]
    lo, hi = sorted(pair)
    freq = struct.energies[hi] - struct.energies[lo]
    if freq < spin_core.DEGENERACY_FREQ_MHZ:
        raise MeanFieldError("degenerate level pairs are not DEER targets")
    if not _line_allowed(struct, (hi, lo), amplitude_threshold):
        raise MeanFieldError(
            f"transition {pair} is forbidden for the drive at this field"
        )
    gates = deer_duration_gates(1.0, (hi, lo))
    per_level = gates.level_phase_integrals(struct.coupling_weights)
    pair_sum = (
        struct.populations[hi] * abs(per_level[hi])
        + struct.populations[lo] * abs(per_level[lo])
    )
    angular = ANGULAR_KERNEL_INTEGRAL
    rate_mhz = (
        _engine_scale(spec, constants) * PPM_PER_NM3 * angular
        * struct.weight * pair_sum / gates.total_time_us
    )
    value = rate_mhz * 1e3
    if mode == "pulse_sweep":
        value *= 2.0
    if finite_pulse_correction:
        value *= DEER_FINITE_PULSE_FACTOR
    return RatePerDensity(
        value_khz_per_ppm=value,
        species=spec.name,
        b_gauss=float(np.linalg.norm(b_field_t) / GAUSS_TO_TESLA),
        sequence=f"deer_{mode}",
        transition=(hi, lo),
        note="finite-pulse corrected" if finite_pulse_correction else "ideal pulses",
    )


def p1_deer_line(
    b_gauss: float,
    target_freq_mhz: float = 152.0,
    window_mhz: float = 3.0,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
):
    """Strongest allowed P1 transition near a target frequency.

    Returns (orientation_index, (upper, lower), freq_mhz) scanning both
    P1 orientation groups.
    """
    spec = p1_species(constants)
    b = np.array([0.0, 0.0, b_gauss * GAUSS_TO_TESLA])
    best = None
    for idx, struct in enumerate(level_structure(spec, b, constants)):
        n = len(struct.energies)
        off_diag = ~np.eye(n, dtype=bool)
        peak = struct.drive_strengths[off_diag].max()
        for hi in range(n):
            for lo in range(hi):
                freq = struct.energies[hi] - struct.energies[lo]
                if abs(freq - target_freq_mhz) > window_mhz:
                    continue
                strength = struct.drive_strengths[hi, lo]
                if strength < spin_core.DEFAULT_AMPLITUDE_THRESHOLD * peak:
                    continue
                key = (strength, -abs(freq - target_freq_mhz))
                if best is None or key > best[0]:
                    best = (key, idx, (hi, lo), freq)
    if best is None:
        raise MeanFieldError(
            f"no allowed P1 line within {window_mhz} MHz of {target_freq_mhz} MHz"
        )
    return best[1], best[2], best[3]


def p1_total_dephasing_curve(
    b_gauss_values: Sequence[float],
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> list[dict]:
    """Per-level and total P1 dephasing rates per ppm versus field.

    Each row carries the per-level free-evolution contribution of one
    orientation group (already weighted by the group fraction) and the
    group-summed total, in kHz/ppm of total P1 density.
    """
    spec = p1_species(constants)
    base = analytic_rate_aligned_halfspin(constants.gamma_e, constants).value_khz_per_ppm
    rows = []
    for b_gauss in b_gauss_values:
        b = np.array([0.0, 0.0, b_gauss * GAUSS_TO_TESLA])
        structs = level_structure(spec, b, constants)
        field_rows = []
        total = 0.0
        for idx, struct in enumerate(structs):
            name = "on_axis" if idx == 0 else "off_axis"
            for level, w in enumerate(struct.coupling_weights):
                contribution = (
                    2.0 * base * struct.weight * struct.populations[level] * abs(w)
                )
                total += contribution
                field_rows.append({
                    "b_gauss": b_gauss,
                    "orientation": name,
                    "level_index": level,
                    "rate_khz_per_ppm": contribution,
                })
        for row in field_rows:
            row["total_khz_per_ppm"] = total
        rows.extend(field_rows)
    return rows


# ---------------------------------------------------------------------------
# bath driving
# ---------------------------------------------------------------------------

#: minimal squared drive matrix element for a level pair to be drivable
#: with realistic pulse power (fully allowed electron flip is 0.25)
DRIVABILITY_THRESHOLD = 1e-3


def enumerate_pairings(n_levels: int = 6) -> list[tuple[tuple[int, int], ...]]:
    """All perfect matchings of the level set into transition pairs."""
    levels = list(range(n_levels))

    def rec(remaining):
        if not remaining:
            yield ()
            return
        first, *rest = remaining
        for k, partner in enumerate(rest):
            others = rest[:k] + rest[k + 1:]
            for tail in rec(others):
                yield ((first, partner),) + tail

    return list(rec(levels))


def bath_driving_residual(
    b_gauss: float,
    pairing: Sequence[tuple[int, int]],
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    drivability_threshold: float = DRIVABILITY_THRESHOLD,
) -> float:
    """Residual P1 dephasing per ppm under bath driving, kHz/ppm.

    The highly symmetric on-axis group is taken as fully suppressed by
    its own resonant driving; the three tones are allocated to off-axis
    level pairs according to ``pairing``.  A driven pair's coupling and
    population average in the fast-driving limit; pairs whose transition
    is too weak to drive are left untouched, which together with the
    on/off level mismatch sets the residual.
    """
    seen: set[int] = set()
    for a, b in pairing:
        if a == b or a in seen or b in seen:
            raise MeanFieldError("pairing must consist of disjoint level pairs")
        seen |= {a, b}
    spec = p1_species(constants)
    b_field = np.array([0.0, 0.0, b_gauss * GAUSS_TO_TESLA])
    base = analytic_rate_aligned_halfspin(constants.gamma_e, constants).value_khz_per_ppm
    structs = level_structure(spec, b_field, constants)
    total = 0.0
    for idx, struct in enumerate(structs):
        if idx == 0:
            continue  # on-axis group fully suppressed
        w_eff = np.abs(struct.coupling_weights).copy()
        pops = struct.populations.copy()
        for a, b in pairing:
            if struct.drive_strengths[a, b] < drivability_threshold:
                continue
            avg = 0.5 * abs(struct.coupling_weights[a] + struct.coupling_weights[b])
            w_eff[a] = avg
            w_eff[b] = avg
            pop_avg = 0.5 * (pops[a] + pops[b])
            pops[a] = pop_avg
            pops[b] = pop_avg
        total += 2.0 * base * struct.weight * float(np.dot(pops, w_eff))
    return total


def best_pairing(
    b_gauss: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    drivability_threshold: float = DRIVABILITY_THRESHOLD,
) -> tuple[tuple[tuple[int, int], ...], float]:
    """Pairing with the lowest residual rate and that rate (kHz/ppm)."""
    best = None
    for pairing in enumerate_pairings():
        residual = bath_driving_residual(b_gauss, pairing, constants, drivability_threshold)
        if best is None or residual < best[1]:
            best = (pairing, residual)
    return best


# ---------------------------------------------------------------------------
# off-axis NV DEER
# ---------------------------------------------------------------------------

#: fraction of each bath-NV group addressed by a single hyperfine line
NV_HYPERFINE_LINE_FRACTION = 1.0 / 3.0

#: default optical polarization of the bath NV m_s = 0 level, calibrated
#: against the measured off-axis DEER concentration factor
NV_BATH_POLARIZATION = 0.60


def nv_offaxis_deer_rate(
    b_field_t: np.ndarray | None = None,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    polarization: float = NV_BATH_POLARIZATION,
    finite_pulse_correction: bool = False,
) -> RatePerDensity:
    """Off-axis NV DEER decay per ppm of total NV density, kHz/ppm.

    Each of the three off-axis orientation groups holds a quarter of the
    NV density; the drive addresses one of the three hyperfine lines of
    each group and swaps its m_s = 0 and m_s = -1 levels during the echo.
    """
    if b_field_t is None:
        b_field_t = np.array([0.0, 0.0, 9.5 * GAUSS_TO_TESLA])
    spec = nv_offaxis_species(polarization, constants)
    struct = level_structure(spec, np.asarray(b_field_t, dtype=float), constants)[0]
    # the m_s = 0 level has the smallest |lab-z coupling|; for an axis at
    # an obtuse angle to the field the m_s = -1 level carries the most
    # positive coupling weight
    level_zero = int(np.argmin(np.abs(struct.coupling_weights)))
    level_minus = int(np.argmax(struct.coupling_weights))
    gates = deer_duration_gates(1.0, (level_zero, level_minus))
    phases = gates.level_phase_integrals(struct.coupling_weights)
    pair_sum = NV_HYPERFINE_LINE_FRACTION * (
        struct.populations[level_zero] * abs(phases[level_zero])
        + struct.populations[level_minus] * abs(phases[level_minus])
    )
    per_group = (
        _engine_scale(spec, constants) * PPM_PER_NM3 * ANGULAR_KERNEL_INTEGRAL
        * pair_sum / gates.total_time_us
    )
    value = 3.0 * 0.25 * per_group * 1e3
    if finite_pulse_correction:
        value *= DEER_FINITE_PULSE_FACTOR
    return RatePerDensity(
        value_khz_per_ppm=value,
        species="nv_offaxis",
        b_gauss=float(np.linalg.norm(b_field_t) / GAUSS_TO_TESLA),
        sequence="deer_duration_sweep",
        transition=(level_zero, level_minus),
        note=f"polarization {polarization}",
    )


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def rate_table_rows_to_csv(rows: list[dict]) -> str:
    """Render rate-vs-field rows with stable column order."""
    header = ["b_gauss", "level_index", "orientation", "rate_khz_per_ppm", "total_khz_per_ppm"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(col)) for col in header))
    return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)
