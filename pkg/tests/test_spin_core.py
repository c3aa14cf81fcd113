import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvdephase import spin_core as sc
from nvdephase.constants import DEFAULT_CONSTANTS, GAUSS_TO_TESLA

C = DEFAULT_CONSTANTS


# ---------------------------------------------------------------------------
# spin operators
# ---------------------------------------------------------------------------

def brute_force_spin_matrices(s):
    """Independent construction from raw ladder matrix elements."""
    dim = int(round(2 * s)) + 1
    m = [s - k for k in range(dim)]
    sp = np.zeros((dim, dim), dtype=complex)
    for row in range(dim):
        for col in range(dim):
            if m[row] == m[col] + 1:
                sp[row, col] = math.sqrt(s * (s + 1) - m[col] * (m[col] + 1))
    sm = sp.conj().T
    return (sp + sm) / 2, (sp - sm) / 2j, np.diag(m).astype(complex)


def test_spin_half_sz():
    ops = sc.spin_operators(0.5)
    assert np.allclose(np.diag(ops.sz.entries), [0.5, -0.5])


def test_spin_one_sz_and_trace():
    ops = sc.spin_operators(1.0)
    assert np.allclose(np.diag(ops.sz.entries), [1.0, 0.0, -1.0])
    assert np.trace(ops.sx.entries @ ops.sx.entries).real == pytest.approx(2.0)


def test_rejects_non_half_integer():
    with pytest.raises(sc.SpinCoreError):
        sc.spin_operators(0.7)
    with pytest.raises(sc.SpinCoreError):
        sc.spin_operators(-0.5)


@given(st.integers(min_value=1, max_value=7))
def test_commutators_and_brute_force(doubled):
    s = doubled / 2.0
    ops = sc.spin_operators(s)
    sx, sy, sz = (op.entries for op in ops)
    assert np.allclose(sx @ sy - sy @ sx, 1j * sz, atol=1e-12)
    assert np.allclose(sy @ sz - sz @ sy, 1j * sx, atol=1e-12)
    bx, by, bz = brute_force_spin_matrices(s)
    assert np.allclose(sx, bx) and np.allclose(sy, by) and np.allclose(sz, bz)
    casimir = sx @ sx + sy @ sy + sz @ sz
    assert np.allclose(casimir, s * (s + 1) * np.eye(ops.sz.dim), atol=1e-12)


def test_hermitian_operator_rejects_nonhermitian():
    with pytest.raises(sc.SpinCoreError):
        sc.HermitianOperator(np.array([[0.0, 1.0], [0.0, 0.0]]))


# ---------------------------------------------------------------------------
# NV Hamiltonian
# ---------------------------------------------------------------------------

def test_nv_zero_field():
    h = sc.build_nv_hamiltonian(0.0, np.zeros(3))
    vals = sc.eigensystem(h).values
    assert np.allclose(vals, [0.0, 2870.0, 2870.0])


def test_nv_axial_field_splitting():
    bz = 10 * GAUSS_TO_TESLA
    h = sc.build_nv_hamiltonian(0.0, np.array([0.0, 0.0, bz]))
    vals = sc.eigensystem(h).values
    zeeman = C.gamma_e * bz
    assert vals[2] - vals[1] == pytest.approx(2 * zeeman, rel=1e-12)
    assert np.allclose(sorted([0.0, C.d_gs - zeeman, C.d_gs + zeeman]), vals)


def test_nv_delta_shifts_both_branches():
    bz = 10 * GAUSS_TO_TESLA
    ref = sc.eigensystem(sc.build_nv_hamiltonian(0.0, np.array([0, 0, bz]))).values
    shifted = sc.eigensystem(sc.build_nv_hamiltonian(0.05, np.array([0, 0, bz]))).values
    assert shifted[1] - ref[1] == pytest.approx(0.05, abs=1e-9)
    assert shifted[2] - ref[2] == pytest.approx(0.05, abs=1e-9)
    assert (shifted[2] - shifted[1]) == pytest.approx(ref[2] - ref[1], abs=1e-9)


def test_nv_axial_commutes_with_sz():
    bz = 25 * GAUSS_TO_TESLA
    h = sc.build_nv_hamiltonian(0.0, np.array([0.0, 0.0, bz])).entries
    sz = sc.spin_operators(1.0).sz.entries
    assert np.abs(h @ sz - sz @ h).max() < 1e-12


# ---------------------------------------------------------------------------
# strain / electric field
# ---------------------------------------------------------------------------

def test_electric_field_sz2_coefficient():
    h = sc.build_strain_ef_hamiltonian(None, np.array([0.0, 0.0, 1.0]))
    # Sz^2 coefficient is read off the m_s = +1 diagonal entry
    assert h.entries[0, 0].real == pytest.approx(0.35e-6, rel=1e-12)


def test_strain_zz_only():
    strain = sc.StrainTensor.from_components(zz=1e-6)
    mx, my, mz = sc.strain_couplings(strain)
    assert mz == pytest.approx(-8e-3, rel=1e-12)   # -8 kHz in MHz
    assert mx == 0.0 and my == 0.0


def test_no_strain_no_field_is_zero():
    h = sc.build_strain_ef_hamiltonian(sc.StrainTensor.zero(), np.zeros(3))
    assert np.abs(h.entries).max() == 0.0


def test_strain_traceless_off_sz2():
    strain = sc.StrainTensor.from_components(xx=2e-6, yy=-1e-6, xy=3e-7, yz=1e-7)
    h = sc.build_strain_ef_hamiltonian(strain, None).entries
    _, _, mz = sc.strain_couplings(strain)
    transverse = h - mz * np.diag([1.0, 0.0, 1.0])
    assert abs(np.trace(transverse)) < 1e-15


# ---------------------------------------------------------------------------
# P1 Hamiltonian
# ---------------------------------------------------------------------------

def brute_force_p1(b_vec_frame):
    """Direct 6x6 construction by explicit basis enumeration."""
    states = [(ms, mi) for ms in (0.5, -0.5) for mi in (1, 0, -1)]
    h = np.zeros((6, 6), dtype=complex)
    ge, apar, aperp, q = C.gamma_e, C.a_parallel_p1, C.a_perp_p1, C.q_p1
    for i, (ms1, mi1) in enumerate(states):
        for j, (ms2, mi2) in enumerate(states):
            val = 0.0
            if (ms1, mi1) == (ms2, mi2):
                val += ge * b_vec_frame[2] * ms1 + apar * ms1 * mi1 + q * mi1**2
            # transverse electron Zeeman
            if mi1 == mi2 and abs(ms1 - ms2) == 1:
                val += ge * (b_vec_frame[0] - 1j * b_vec_frame[1] * np.sign(ms1 - ms2)) / 2
            # flip-flop hyperfine: S+I- + S-I+ scaled by aperp/2
            if ms1 - ms2 == 1 and mi1 - mi2 == -1:
                val += aperp / 2 * math.sqrt(2 - mi2 * (mi2 - 1))
            if ms1 - ms2 == -1 and mi1 - mi2 == 1:
                val += aperp / 2 * math.sqrt(2 - mi2 * (mi2 + 1))
            h[i, j] += val
    return h


def test_p1_zero_field_matches_brute_force():
    h = sc.build_p1_hamiltonian(np.zeros(3))
    oracle = np.linalg.eigvalsh(brute_force_p1(np.zeros(3)))
    assert np.allclose(sc.eigensystem(h).values, oracle, atol=1e-10)


def test_p1_finite_field_matches_brute_force():
    b = np.array([0.0, 0.0, 9.5 * GAUSS_TO_TESLA])
    h = sc.build_p1_hamiltonian(b, sc.ON_AXIS)
    oracle = np.linalg.eigvalsh(brute_force_p1(b))
    assert np.allclose(sc.eigensystem(h).values, oracle, atol=1e-10)


def test_p1_zero_field_golden(golden_dir):
    vals = sc.eigensystem(sc.build_p1_hamiltonian(np.zeros(3))).values
    golden = np.loadtxt(golden_dir / "p1_zero_field_eigenvalues.csv", delimiter=",", skiprows=1)
    assert np.allclose(vals, np.sort(golden), atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_p1_zero_field_orientation_invariant(seed):
    rng = np.random.default_rng(seed)
    vec = rng.normal(size=3)
    orientation = sc.Orientation(vec / np.linalg.norm(vec))
    ref = sc.eigensystem(sc.build_p1_hamiltonian(np.zeros(3), sc.ON_AXIS)).values
    rot = sc.eigensystem(sc.build_p1_hamiltonian(np.zeros(3), orientation)).values
    assert np.abs(ref - rot).max() < 1e-9


def test_p1_on_off_axis_spectra_differ_at_field():
    b = np.array([0.0, 0.0, 9.5 * GAUSS_TO_TESLA])
    on = sc.eigensystem(sc.build_p1_hamiltonian(b, sc.ON_AXIS)).values
    off = sc.eigensystem(sc.build_p1_hamiltonian(b, sc.OFF_AXIS)).values
    assert np.abs(on - off).max() > 1.0


# ---------------------------------------------------------------------------
# eigensystem
# ---------------------------------------------------------------------------

def test_eigensystem_diagonal():
    vals = sc.eigensystem(np.diag([3.0, 1.0, 2.0])).values
    assert np.allclose(vals, [1.0, 2.0, 3.0])


def test_eigensystem_pauli_x_half():
    h = sc.spin_operators(0.5).sx
    assert np.allclose(sc.eigensystem(h).values, [-0.5, 0.5])


def test_eigensystem_rejects_nonhermitian():
    with pytest.raises(sc.SpinCoreError):
        sc.eigensystem(np.array([[0.0, 1.0], [0.5, 0.0]]))


def test_eigensystem_vs_characteristic_polynomial():
    rng = np.random.default_rng(42)
    a = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
    h = (a + a.conj().T) / 2
    system = sc.eigensystem(h)
    roots = np.sort(np.roots(np.poly(h)).real)
    assert np.abs(system.values - roots).max() < 1e-9
    # orthonormality
    gram = system.vectors.conj().T @ system.vectors
    assert np.abs(gram - np.eye(6)).max() < 1e-12


# ---------------------------------------------------------------------------
# dipolar tensor
# ---------------------------------------------------------------------------

def test_dipolar_axial_coefficient():
    r = np.array([0.0, 0.0, 4.0])
    zz = sc.secular_zz_coupling(r, C.gamma_e, C.gamma_e)
    expected = -2.0 * C.dipolar_scale(C.gamma_e, C.gamma_e) / 4.0**3
    assert zz == pytest.approx(expected, rel=1e-12)


def test_dipolar_magic_angle_null():
    theta = math.acos(math.sqrt(1.0 / 3.0))
    r = 5.0 * np.array([math.sin(theta), 0.0, math.cos(theta)])
    assert abs(sc.secular_zz_coupling(r, C.gamma_e, C.gamma_e)) < 1e-12


def test_dipolar_inverse_cube():
    r = np.array([1.0, 2.0, 2.0])
    d1 = sc.dipolar_coupling_tensor(r, C.gamma_e, C.gamma_e)
    d2 = sc.dipolar_coupling_tensor(2 * r, C.gamma_e, C.gamma_e)
    assert np.allclose(d1, 8.0 * d2, rtol=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_dipolar_traceless(vec):
    r = np.asarray(vec)
    if np.linalg.norm(r) < 1e-3:
        return
    d = sc.dipolar_coupling_tensor(r, C.gamma_e, C.gamma_c13)
    assert abs(np.trace(d)) <= 1e-12 * max(np.abs(d).max(), 1e-300)


def test_dipolar_rejects_zero_separation():
    with pytest.raises(sc.SpinCoreError):
        sc.dipolar_coupling_tensor(np.zeros(3), C.gamma_e, C.gamma_e)


# ---------------------------------------------------------------------------
# transition spectrum
# ---------------------------------------------------------------------------

def test_identity_drive_no_transitions():
    h = sc.build_p1_hamiltonian(np.array([0, 0, 9.5 * GAUSS_TO_TESLA]))
    lines = sc.transition_spectrum(h, np.eye(6))
    assert lines == []


def test_transition_spectrum_dimension_mismatch():
    with pytest.raises(sc.SpinCoreError):
        sc.transition_spectrum(np.eye(3), np.eye(2))


def test_transition_strength_symmetric():
    b = np.array([0, 0, 9.5 * GAUSS_TO_TESLA])
    h = sc.build_p1_hamiltonian(b)
    sx = np.kron(sc.spin_operators(0.5).sx.entries, np.eye(3))
    vals, vecs = sc.eigensystem(h)
    element = vecs.conj().T @ sx @ vecs
    assert np.abs(element - element.conj().T).max() < 1e-12


def test_p1_spectrum_includes_line_near_152():
    """The measured DEER comb at 9.5 G shows a branch at 152 MHz; it is an
    off-axis line, the nearest on-axis branch sits several MHz away."""
    b = np.array([0, 0, 9.5 * GAUSS_TO_TESLA])
    sx = np.kron(sc.spin_operators(0.5).sx.entries, np.eye(3))
    freqs = []
    for orientation in (sc.ON_AXIS, sc.OFF_AXIS):
        h = sc.build_p1_hamiltonian(b, orientation)
        freqs += [line.freq_mhz for line in sc.transition_spectrum(h, sx)]
    assert min(abs(f - 152.0) for f in freqs) < 2.0


def test_p1_spectrum_vs_field_golden(golden_dir):
    rows = np.loadtxt(golden_dir / "p1_spectrum_vs_b.csv", delimiter=",", skiprows=1)
    sx = np.kron(sc.spin_operators(0.5).sx.entries, np.eye(3))
    for b_gauss, freq, strength, upper, lower, orient_flag in rows:
        orientation = sc.ON_AXIS if orient_flag == 0 else sc.OFF_AXIS
        h = sc.build_p1_hamiltonian(np.array([0, 0, b_gauss * GAUSS_TO_TESLA]), orientation)
        lines = sc.transition_spectrum(h, sx)
        match = [l for l in lines if l.upper == int(upper) and l.lower == int(lower)]
        assert match, f"line ({upper},{lower}) missing at {b_gauss} G"
        assert match[0].freq_mhz == pytest.approx(freq, abs=1e-6)
        assert match[0].strength == pytest.approx(strength, rel=1e-6)


# ---------------------------------------------------------------------------
# orientation helpers
# ---------------------------------------------------------------------------

def test_orientation_requires_unit_norm():
    with pytest.raises(sc.SpinCoreError):
        sc.Orientation(np.array([1.0, 1.0, 0.0]))


def test_off_axis_polar_angle():
    assert sc.OFF_AXIS.cos_polar == pytest.approx(-1.0 / 3.0, abs=1e-12)


def test_frame_is_orthonormal():
    frame = sc.OFF_AXIS.frame()
    assert np.allclose(frame.T @ frame, np.eye(3), atol=1e-12)
    assert np.allclose(frame[:, 2], sc.OFF_AXIS.axis)
