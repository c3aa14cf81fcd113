"""Spin operators, Hamiltonian builders and transition spectra.

Builds the small dense Hamiltonians the rest of the package consumes: the
NV ground-state triplet, the strain/electric-field quadratic terms, and the
P1 center (electron spin 1/2 hyperfine-coupled to the host nitrogen
spin 1).  Everything is expressed in MHz with h = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .constants import DEFAULT_CONSTANTS, PhysicalConstants

HERMITICITY_RTOL = 1e-12
UNIT_NORM_ATOL = 1e-12
DEGENERACY_FREQ_MHZ = 1e-6
DEFAULT_AMPLITUDE_THRESHOLD = 1e-4


class SpinCoreError(ValueError):
    """Raised on invalid spin-space inputs."""


@dataclass(frozen=True)
class SpinQuantum:
    """A half-integer spin magnitude; operator dimension is 2s + 1."""

    s: float

    def __post_init__(self):
        doubled = 2.0 * self.s
        if self.s < 0 or abs(doubled - round(doubled)) > 1e-12:
            raise SpinCoreError(f"spin must be a non-negative half-integer, got {self.s}")

    @property
    def dim(self) -> int:
        return int(round(2.0 * self.s)) + 1

    def projections(self) -> np.ndarray:
        """Magnetic quantum numbers in descending order s, s-1, ..., -s."""
        return self.s - np.arange(self.dim)


@dataclass(frozen=True)
class HermitianOperator:
    """Dense complex square matrix validated to be Hermitian."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=complex)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise SpinCoreError(f"operator must be a square matrix, got shape {arr.shape}")
        scale = max(np.abs(arr).max(), 1.0)
        if np.abs(arr - arr.conj().T).max() > HERMITICITY_RTOL * scale:
            raise SpinCoreError("matrix is not Hermitian within tolerance")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def __add__(self, other: "HermitianOperator") -> "HermitianOperator":
        return HermitianOperator(self.entries + _entries(other))

    def __rmul__(self, scalar: float) -> "HermitianOperator":
        return HermitianOperator(float(scalar) * self.entries)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


def _entries(op) -> np.ndarray:
    if isinstance(op, HermitianOperator):
        return op.entries
    return np.asarray(op, dtype=complex)


@dataclass(frozen=True)
class StrainTensor:
    """Symmetric 3x3 dimensionless strain tensor."""

    epsilon: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.epsilon, dtype=float)
        if arr.shape != (3, 3):
            raise SpinCoreError("strain tensor must be 3x3")
        if not np.all(np.isfinite(arr)):
            raise SpinCoreError("strain components must be finite")
        if np.abs(arr - arr.T).max() > 1e-12 * max(np.abs(arr).max(), 1.0):
            raise SpinCoreError("strain tensor must be symmetric")
        arr.setflags(write=False)
        object.__setattr__(self, "epsilon", arr)

    @classmethod
    def zero(cls) -> "StrainTensor":
        return cls(np.zeros((3, 3)))

    @classmethod
    def from_components(cls, xx=0.0, yy=0.0, zz=0.0, xy=0.0, xz=0.0, yz=0.0):
        return cls(np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]], dtype=float))


@dataclass(frozen=True)
class Orientation:
    """Unit vector of a defect symmetry axis in the lab (bias-field) frame."""

    axis: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.axis, dtype=float)
        if vec.shape != (3,):
            raise SpinCoreError("orientation must be a 3-vector")
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > UNIT_NORM_ATOL:
            raise SpinCoreError(f"orientation must be unit norm, |v| = {norm}")
        vec.setflags(write=False)
        object.__setattr__(self, "axis", vec)

    @classmethod
    def from_angles(cls, theta: float, phi: float = 0.0) -> "Orientation":
        """Polar/azimuthal angles in radians relative to the lab z axis."""
        return cls(np.array([
            math.sin(theta) * math.cos(phi),
            math.sin(theta) * math.sin(phi),
            math.cos(theta),
        ]))

    @property
    def cos_polar(self) -> float:
        return float(self.axis[2])

    def frame(self) -> np.ndarray:
        """Orthonormal frame (columns x', y', z') with z' along the axis."""
        z = self.axis
        seed = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        x = seed - z * np.dot(seed, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return np.column_stack([x, y, z])

    def to_frame(self, vec_lab: np.ndarray) -> np.ndarray:
        """Express a lab-frame vector in the defect frame."""
        return self.frame().T @ np.asarray(vec_lab, dtype=float)


ON_AXIS = Orientation(np.array([0.0, 0.0, 1.0]))
OFF_AXIS = Orientation.from_angles(math.acos(-1.0 / 3.0))


class SpinOperators(NamedTuple):
    sx: HermitianOperator
    sy: HermitianOperator
    sz: HermitianOperator


def spin_operators(spin: SpinQuantum | float) -> SpinOperators:
    """Angular-momentum matrices for spin s in the |s>, ..., |-s> basis."""
    if not isinstance(spin, SpinQuantum):
        spin = SpinQuantum(spin)
    m = spin.projections()
    sz = np.diag(m).astype(complex)
    # <m+1| S+ |m> on the superdiagonal in descending-m ordering
    raise_elems = np.sqrt(spin.s * (spin.s + 1.0) - m[1:] * (m[1:] + 1.0))
    sp = np.zeros((spin.dim, spin.dim), dtype=complex)
    sp[np.arange(spin.dim - 1), np.arange(1, spin.dim)] = raise_elems
    sm = sp.conj().T
    sx = (sp + sm) / 2.0
    sy = (sp - sm) / 2.0j
    return SpinOperators(HermitianOperator(sx), HermitianOperator(sy), HermitianOperator(sz))


class Eigensystem(NamedTuple):
    values: np.ndarray    # ascending, MHz
    vectors: np.ndarray   # columns, orthonormal


def eigensystem(operator) -> Eigensystem:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a Hermitian matrix."""
    h = _entries(operator)
    if isinstance(operator, np.ndarray):
        operator = HermitianOperator(h)  # validates hermiticity and shape
    values, vectors = np.linalg.eigh(h)
    scale = max(np.abs(values).max(), 1.0)
    residual = np.abs(h @ vectors - vectors * values).max()
    if residual > 1e-10 * scale:
        raise SpinCoreError(f"eigensystem residual {residual:.3e} exceeds tolerance")
    return Eigensystem(values, vectors)


def build_nv_hamiltonian(
    delta_mhz: float,
    b_field_t: np.ndarray,
    bath_shift_mhz: float = 0.0,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> HermitianOperator:
    """NV ground-state triplet: (D + delta) Sz^2 + gamma_e B.S + A Sz.

    ``delta_mhz`` is the combined strain/electric quadratic shift and
    ``bath_shift_mhz`` the mean spin-bath coupling, both in MHz.  The field
    is a lab-frame 3-vector in Tesla with z along the NV axis.
    """
    b = np.asarray(b_field_t, dtype=float)
    if b.shape != (3,) or not np.all(np.isfinite(b)):
        raise SpinCoreError("magnetic field must be a finite 3-vector in Tesla")
    if not (np.isfinite(delta_mhz) and np.isfinite(bath_shift_mhz)):
        raise SpinCoreError("Hamiltonian coefficients must be finite")
    sx, sy, sz = (op.entries for op in spin_operators(SpinQuantum(1.0)))
    h = (constants.d_gs + delta_mhz) * (sz @ sz)
    h = h + constants.gamma_e * (b[0] * sx + b[1] * sy + b[2] * sz)
    h = h + bath_shift_mhz * sz
    return HermitianOperator(h)


def strain_couplings(strain: StrainTensor, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Spin-strain coupling amplitudes (Mx, My, Mz) in MHz."""
    e = strain.epsilon
    mx = constants.b * (e[0, 0] - e[1, 1]) + 2.0 * constants.c * e[1, 2]
    my = -2.0 * constants.b * e[0, 1] - 2.0 * constants.c * e[0, 2]
    mz = constants.a1 * e[2, 2] + constants.a2 * (e[0, 0] + e[1, 1])
    return mx, my, mz


def build_strain_ef_hamiltonian(
    strain: StrainTensor | None = None,
    e_field_v_per_cm: np.ndarray | None = None,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> HermitianOperator:
    """Quadratic strain and electric-field terms of the NV triplet.

    Returns (Mz + d_par Ez) Sz^2 + (Mx + d_perp Ex)(Sy^2 - Sx^2)
    + (My + d_perp Ey)(Sx Sy + Sy Sx); electric dipole parameters are
    Hz cm/V, so the electric contributions are converted to MHz here.
    """
    mx = my = mz = 0.0
    if strain is not None:
        mx, my, mz = strain_couplings(strain, constants)
    ex = ey = ez = 0.0
    if e_field_v_per_cm is not None:
        e = np.asarray(e_field_v_per_cm, dtype=float)
        if e.shape != (3,) or not np.all(np.isfinite(e)):
            raise SpinCoreError("electric field must be a finite 3-vector in V/cm")
        ex, ey, ez = e * 1e-6  # Hz -> MHz once multiplied by d in Hz cm/V
    sx, sy, sz = (op.entries for op in spin_operators(SpinQuantum(1.0)))
    par = mz + constants.d_parallel * ez
    t1 = mx + constants.d_perpendicular * ex
    t2 = my + constants.d_perpendicular * ey
    h = par * (sz @ sz) + t1 * (sy @ sy - sx @ sx) + t2 * (sx @ sy + sy @ sx)
    return HermitianOperator(h)


def build_p1_hamiltonian(
    b_field_t: np.ndarray,
    orientation: Orientation = ON_AXIS,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> HermitianOperator:
    """P1 center: electron spin 1/2 coupled to the host nitrogen spin 1.

    gamma_e S.B + A_par Sz Iz + A_perp (Sx Ix + Sy Iy) + Q Iz^2, built in
    the defect frame with the lab field rotated into it.  The nuclear
    Zeeman term is omitted (negligible against the hyperfine couplings).

    The transverse hyperfine coupling is the axially symmetric flip-flop
    form, so the spectrum depends on the defect axis only through its
    polar angle to the field.
    """
    b_lab = np.asarray(b_field_t, dtype=float)
    if b_lab.shape != (3,) or not np.all(np.isfinite(b_lab)):
        raise SpinCoreError("magnetic field must be a finite 3-vector in Tesla")
    b = orientation.to_frame(b_lab)
    s = spin_operators(SpinQuantum(0.5))
    i = spin_operators(SpinQuantum(1.0))
    eye_s = np.eye(2)
    eye_i = np.eye(3)
    sx, sy, sz = (np.kron(op.entries, eye_i) for op in s)
    ix, iy, iz = (np.kron(eye_s, op.entries) for op in i)
    h = constants.gamma_e * (b[0] * sx + b[1] * sy + b[2] * sz)
    h = h + constants.a_parallel_p1 * (sz @ iz)
    h = h + constants.a_perp_p1 * (sx @ ix + sy @ iy)
    h = h + constants.q_p1 * (iz @ iz)
    return HermitianOperator(h)


def dipolar_coupling_tensor(
    r_nm: np.ndarray,
    gamma_1: float,
    gamma_2: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> np.ndarray:
    """Point-dipole coupling tensor D (MHz) with H = S1 . D . S2.

    D_ab = prefactor * gamma_1 * gamma_2 / r^3 * (delta_ab - 3 rhat_a rhat_b);
    traceless, falls off as 1/r^3.
    """
    r = np.asarray(r_nm, dtype=float)
    if r.shape != (3,):
        raise SpinCoreError("separation must be a 3-vector in nm")
    dist = np.linalg.norm(r)
    if dist == 0.0 or not np.isfinite(dist):
        raise SpinCoreError("separation vector must be finite and non-zero")
    rhat = r / dist
    scale = constants.dipolar_scale(gamma_1, gamma_2) / dist**3
    return scale * (np.eye(3) - 3.0 * np.outer(rhat, rhat))


def secular_zz_coupling(
    r_nm: np.ndarray,
    gamma_1: float,
    gamma_2: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """Sz Sz coefficient of the dipolar tensor: prefactor (1 - 3 cos^2 theta)/r^3."""
    return float(dipolar_coupling_tensor(r_nm, gamma_1, gamma_2, constants)[2, 2])


@dataclass(frozen=True)
class TransitionLine:
    freq_mhz: float
    strength: float      # |<n|drive|m>|^2, symmetric in n <-> m
    upper: int
    lower: int
    degenerate: bool = False


def transition_spectrum(
    hamiltonian,
    drive,
    amplitude_threshold: float = DEFAULT_AMPLITUDE_THRESHOLD,
) -> list[TransitionLine]:
    """Drive-allowed transitions between eigenstates of ``hamiltonian``.

    Returns one line per unordered level pair whose squared drive matrix
    element reaches ``amplitude_threshold`` times the largest one.  Pairs
    closer than 1 kHz are reported at frequency zero and flagged
    degenerate.
    """
    h = _entries(hamiltonian)
    v = _entries(drive)
    if h.shape != v.shape:
        raise SpinCoreError(f"dimension mismatch: {h.shape} vs {v.shape}")
    values, vectors = eigensystem(hamiltonian)
    element = vectors.conj().T @ v @ vectors
    strength = np.abs(element) ** 2
    peak = strength.max(initial=0.0, where=~np.eye(len(values), dtype=bool))
    # a drive that commutes with H leaves only rounding noise off-diagonal
    if peak <= 1e-20 * max(np.abs(v).max() ** 2, 1e-300):
        return []
    lines = []
    for upper in range(len(values)):
        for lower in range(upper):
            s = strength[upper, lower]
            if peak == 0.0 or s < amplitude_threshold * peak:
                continue
            freq = values[upper] - values[lower]
            degenerate = abs(freq) < DEGENERACY_FREQ_MHZ
            lines.append(TransitionLine(
                freq_mhz=0.0 if degenerate else float(freq),
                strength=float(s),
                upper=upper,
                lower=lower,
                degenerate=degenerate,
            ))
    lines.sort(key=lambda line: line.freq_mhz)
    return lines
