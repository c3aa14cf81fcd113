import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvdephase import meanfield as mf
from nvdephase import spin_core as sc
from nvdephase.constants import DEFAULT_CONSTANTS, GAUSS_TO_TESLA

C = DEFAULT_CONSTANTS
B95 = np.array([0.0, 0.0, 9.5 * GAUSS_TO_TESLA])
B_ALIGNED = np.array([0.0, 0.0, 0.01])  # 100 G, well above any mixing


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def test_sphere_grid_weights_sum_to_4pi():
    _, _, w = mf.sphere_grid(8)
    assert w.sum() == pytest.approx(4 * math.pi, rel=1e-12)


def test_integrate_sphere_constant():
    assert mf.integrate_sphere(lambda u, phi: np.ones_like(u)) == pytest.approx(
        4 * math.pi, rel=1e-12
    )


def test_integrate_sphere_kernel_exact():
    value = mf.integrate_sphere(lambda u, phi: np.abs(1 - 3 * u * u))
    assert value == pytest.approx(mf.ANGULAR_KERNEL_INTEGRAL, rel=1e-12)


def test_integrate_sphere_nonconvergent_reports_estimate():
    rng = np.random.default_rng(0)

    def noisy(u, phi):
        return rng.normal(size=u.shape)

    with pytest.raises(mf.QuadratureError) as err:
        mf.integrate_sphere(noisy, rel_tol=1e-12)
    assert err.value.error_estimate > 0


# ---------------------------------------------------------------------------
# gate functions
# ---------------------------------------------------------------------------

def test_gates_validation():
    with pytest.raises(mf.MeanFieldError):
        mf.SequenceGates(mf.PiecewiseConstant((0.0, 1.0), (0.5,)), 1.0)
    with pytest.raises(mf.MeanFieldError):
        mf.PiecewiseConstant((0.0, 0.5, 0.5, 1.0), (1.0, -1.0, 1.0))


def test_echo_gate_integral_vanishes():
    gates = mf.hahn_echo_gates(2.0)
    assert gates.s_nv.integral() == pytest.approx(0.0, abs=1e-12)


def test_r_functions_complementary():
    gates = mf.deer_duration_gates(1.0, (0, 1))
    r0 = gates.r_function(0)
    r1 = gates.r_function(1)
    for t in (0.1, 0.4, 0.6, 0.9):
        assert r0(t) + r1(t) == pytest.approx(1.0)
        assert r0(t) in (0.0, 1.0)
    assert gates.r_function(3)(0.5) == 1.0  # undriven level always occupied


def test_deer_duration_phase_integrals():
    w = np.array([0.3, -0.1, 0.05])
    gates = mf.deer_duration_gates(2.0, (0, 1))
    phases = gates.level_phase_integrals(w)
    # s = +1 on the first half with coupling w_a, -1 on the second with w_b
    assert phases[0] == pytest.approx((w[0] - w[1]) * 1.0)
    assert phases[1] == pytest.approx((w[1] - w[0]) * 1.0)
    assert phases[2] == pytest.approx(0.0, abs=1e-12)  # echoed away


def test_pulse_sweep_phase_linear_in_offset():
    w = np.array([0.25, -0.15])
    slopes = []
    for rf in (0.2, 0.4):
        gates = mf.deer_pulse_sweep_gates(1.0, rf, (0, 1))
        phases = gates.level_phase_integrals(w)
        slopes.append(phases[0] / rf)
    assert slopes[0] == pytest.approx(slopes[1], rel=1e-12)
    assert slopes[0] == pytest.approx(w[0] - w[1], rel=1e-12)


def test_driven_evolution_averages_exactly():
    w = np.array([0.4, -0.2, 0.1])
    gates = mf.driven_evolution_gates(3.0, [(0, 1)], swaps_per_pair=6)
    phases = gates.level_phase_integrals(w)
    assert phases[0] == pytest.approx(3.0 * (w[0] + w[1]) / 2, rel=1e-12)
    assert phases[2] == pytest.approx(3.0 * w[2], rel=1e-12)


# ---------------------------------------------------------------------------
# closed form against quadrature engine
# ---------------------------------------------------------------------------

def test_closed_form_electron_anchor():
    rate = mf.analytic_rate_aligned_halfspin(C.gamma_e)
    assert rate.value_khz_per_ppm == pytest.approx(141.0, rel=1e-9)


def test_closed_form_linear_in_gamma():
    full = mf.analytic_rate_aligned_halfspin(C.gamma_e).value_khz_per_ppm
    half = mf.analytic_rate_aligned_halfspin(C.gamma_e / 2).value_khz_per_ppm
    assert half == pytest.approx(full / 2, rel=1e-12)


def test_closed_form_c13():
    rate = mf.analytic_rate_aligned_halfspin(C.gamma_c13).value_khz_per_ppm
    assert rate == pytest.approx(141.0 * C.gamma_c13 / C.gamma_e, rel=1e-12)
    assert rate == pytest.approx(0.054, rel=0.01)


@pytest.mark.parametrize("gamma", [C.gamma_e, C.gamma_e / 31.0, C.gamma_e / 997.0])
def test_quadrature_matches_closed_form_over_three_decades(gamma):
    spec = mf.electron_species(gamma=gamma)
    engine = mf.ensemble_decay_rate(spec, B_ALIGNED, mf.free_evolution_gates(1.0), 1.0)
    oracle = mf.analytic_rate_aligned_halfspin(gamma).value_khz_per_ppm
    assert engine == pytest.approx(oracle, rel=0.01)


def test_c13_species_rate():
    rate = mf.static_rate_per_ppm(mf.c13_species(), B_ALIGNED)
    assert rate == pytest.approx(0.0538, rel=0.01)


# ---------------------------------------------------------------------------
# engine properties
# ---------------------------------------------------------------------------

def test_zero_density_zero_rate():
    spec = mf.electron_species()
    assert mf.ensemble_decay_rate(spec, B_ALIGNED, mf.free_evolution_gates(1.0), 0.0) == 0.0


@given(st.floats(min_value=0.01, max_value=50.0))
@settings(max_examples=20, deadline=None)
def test_rate_linear_in_density(density):
    spec = mf.electron_species()
    gates = mf.free_evolution_gates(1.0)
    unit = mf.ensemble_decay_rate(spec, B_ALIGNED, gates, 1.0)
    scaled = mf.ensemble_decay_rate(spec, B_ALIGNED, gates, density)
    assert scaled == pytest.approx(density * unit, rel=1e-9)


def test_echo_null_for_static_coupling():
    spec = mf.p1_species()
    rate = mf.ensemble_decay_rate(spec, B95, mf.hahn_echo_gates(1.0), 1.0)
    assert rate == pytest.approx(0.0, abs=1e-12)


def test_pi_train_null_for_static_coupling():
    spec = mf.electron_species()
    rate = mf.ensemble_decay_rate(spec, B_ALIGNED, mf.pi_train_gates(1.0, 4), 1.0)
    assert rate == pytest.approx(0.0, abs=1e-12)


def test_polarization_permutation_invariance_halfspin():
    gates = mf.free_evolution_gates(1.0)
    for p in (0.0, 0.25, 0.7, 1.0):
        spec = mf.BathSpeciesSpec(
            name="electron", gamma=C.gamma_e, level_populations=((p, 1.0 - p),)
        )
        rate = mf.ensemble_decay_rate(spec, B_ALIGNED, gates, 1.0)
        assert rate == pytest.approx(141.0, rel=1e-6)


def test_polarization_flip_invariance_p1():
    """The on-axis coupling weights come in +/- pairs; moving population
    between a pair's two levels leaves the free-evolution rate unchanged."""

    def onaxis_spec(populations):
        return mf.BathSpeciesSpec(
            name="p1_on",
            gamma=C.gamma_e,
            electron_spin=0.5,
            nuclear_spin=1.0,
            hyperfine_parallel=C.a_parallel_p1,
            hyperfine_perp=C.a_perp_p1,
            quadrupole=C.q_p1,
            orientations=((sc.ON_AXIS, 1.0),),
            level_populations=None if populations is None else (populations,),
        )

    gates = mf.free_evolution_gates(1.0)
    base = mf.ensemble_decay_rate(onaxis_spec(None), B95, gates, 1.0)
    struct = mf.level_structure(onaxis_spec(None), B95)[0]
    w = struct.coupling_weights
    i = int(np.argmax(w))
    j = int(np.argmin(np.abs(w + w[i])))
    assert abs(w[i] + w[j]) < 1e-9  # a genuine +/- pair
    p = np.full(6, 1.0 / 6.0)
    p[i] += 0.1
    p[j] -= 0.1
    rate = mf.ensemble_decay_rate(onaxis_spec(tuple(p)), B95, gates, 1.0)
    assert rate == pytest.approx(base, rel=1e-9)


# ---------------------------------------------------------------------------
# coupling strengths
# ---------------------------------------------------------------------------

def test_coupling_strengths_zero_gamma():
    spec = mf.BathSpeciesSpec(name="null", gamma=0.0)
    a = mf.coupling_strengths((0.0, 1.0), spec, (5.0, 0.3, 0.1), B_ALIGNED)
    assert np.abs(a).max() == 0.0


def test_coupling_strengths_aligned_halfspin():
    spec = mf.electron_species()
    r = 6.0
    a = mf.coupling_strengths((0.0, 1.0), spec, (r, 0.0, 0.0), B_ALIGNED)
    expected = C.dipolar_scale(C.gamma_e, C.gamma_e) * 2.0 / r**3 * 0.5
    assert sorted(a[0]) == pytest.approx([-expected, expected], rel=1e-6)


def test_coupling_strengths_r_cubed_scaling():
    spec = mf.p1_species()
    theta = 0.4
    u1 = 10.0**3 * mf.coupling_strengths((0.0, 1.0), spec, (10.0, theta, 0.0), B95)
    u2 = 20.0**3 * mf.coupling_strengths((0.0, 1.0), spec, (20.0, theta, 0.0), B95)
    # identical once the 1/r^3 scaling is removed, up to the residual
    # beyond-first-order level repulsion at the closer distance
    assert np.allclose(u1, u2, rtol=0.0, atol=2e-3 * np.abs(u1).max())


def test_coupling_strengths_match_level_weights():
    """Eigenvalue differences at small coupling reproduce the first-order
    expectation-value weights used by the rate engine."""
    spec = mf.p1_species()
    r, theta = 20.0, 0.7
    a = mf.coupling_strengths((0.0, 1.0), spec, (r, theta, 0.0), B95)
    j = C.dipolar_scale(C.gamma_e, C.gamma_e) * (1 - 3 * math.cos(theta) ** 2) / r**3
    for row, struct in zip(a, mf.level_structure(spec, B95)):
        assert np.allclose(np.sort(row), np.sort(j * struct.coupling_weights), rtol=1e-3, atol=1e-9)


def test_coupling_strengths_rejects_zero_distance():
    with pytest.raises(mf.MeanFieldError):
        mf.coupling_strengths((0.0, 1.0), mf.electron_species(), (0.0, 0.0, 0.0), B_ALIGNED)


# ---------------------------------------------------------------------------
# DEER
# ---------------------------------------------------------------------------

def test_deer_line_near_152():
    idx, pair, freq = mf.p1_deer_line(9.5)
    assert idx == 1  # off-axis group
    assert abs(freq - 152.0) < 2.0


def test_deer_rate_anchor_ideal_and_corrected():
    idx, pair, _ = mf.p1_deer_line(9.5)
    spec = mf.p1_species()
    ideal = mf.deer_rate(spec, B95, pair, idx).value_khz_per_ppm
    corrected = mf.deer_rate(
        spec, B95, pair, idx, finite_pulse_correction=True
    ).value_khz_per_ppm
    assert ideal == pytest.approx(11.0, rel=0.10)
    assert corrected == pytest.approx(13.0, rel=0.10)
    assert corrected == pytest.approx(ideal * 13.0 / 11.0, rel=1e-12)


def test_deer_pulse_sweep_double_rate():
    idx, pair, _ = mf.p1_deer_line(9.5)
    spec = mf.p1_species()
    duration = mf.deer_rate(spec, B95, pair, idx, mode="duration_sweep")
    pulse = mf.deer_rate(spec, B95, pair, idx, mode="pulse_sweep")
    assert pulse.value_khz_per_ppm == pytest.approx(2 * duration.value_khz_per_ppm, rel=1e-12)


def test_deer_rejects_forbidden_transition():
    spec = mf.p1_species()
    structs = mf.level_structure(spec, B95)
    strengths = structs[0].drive_strengths
    n = len(structs[0].energies)
    peak = strengths[~np.eye(n, dtype=bool)].max()
    forbidden = min(
        ((strengths[i, j], (i, j)) for i in range(n) for j in range(i))
    )[1]
    assert strengths[forbidden] < 1e-4 * peak
    with pytest.raises(mf.MeanFieldError):
        mf.deer_rate(spec, B95, forbidden, 0)


def test_deer_probe_gamma_linearity():
    idx, pair, _ = mf.p1_deer_line(9.5)
    spec = mf.p1_species()
    full = mf.deer_rate(spec, B95, pair, idx).value_khz_per_ppm
    halved = mf.deer_rate(
        spec, B95, pair, idx, constants=C.replace(gamma_e=C.gamma_e / 2)
    ).value_khz_per_ppm
    assert halved == pytest.approx(full / 2, rel=1e-12)


def test_gamma_p1_to_deer_ratio():
    idx, pair, _ = mf.p1_deer_line(9.5)
    spec = mf.p1_species()
    deer = mf.deer_rate(spec, B95, pair, idx).value_khz_per_ppm
    static = mf.static_rate_per_ppm(spec, B95)
    assert static / deer == pytest.approx(6.0, rel=0.20)


# ---------------------------------------------------------------------------
# total dephasing curve
# ---------------------------------------------------------------------------

def test_p1_total_curve_bounded_by_electron_limit():
    rows = mf.p1_total_dephasing_curve(np.linspace(1.0, 120.0, 40))
    totals = {row["b_gauss"]: row["total_khz_per_ppm"] for row in rows}
    assert all(total <= 141.0 + 1e-9 for total in totals.values())
    assert max(totals.values()) > 100.0  # approaches the limit at high field


def test_p1_total_curve_gamma_scaling_to_zero():
    constants = C.replace(mu0_hbar_prefactor=0.0)
    rows = mf.p1_total_dephasing_curve([10.0], constants)
    assert all(row["total_khz_per_ppm"] == 0.0 for row in rows)


def test_rate_table_csv_round_trips():
    rows = mf.p1_total_dephasing_curve([9.5])
    text = mf.rate_table_rows_to_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0].split(",")[0] == "b_gauss"
    assert len(lines) == len(rows) + 1


# ---------------------------------------------------------------------------
# bath driving
# ---------------------------------------------------------------------------

def test_enumerate_pairings_count_and_coverage():
    pairings = mf.enumerate_pairings()
    assert len(pairings) == 15
    assert len(set(map(frozenset, (frozenset(map(frozenset, p)) for p in pairings)))) == 15
    for pairing in pairings:
        levels = sorted(level for pair in pairing for level in pair)
        assert levels == list(range(6))


def test_driving_residual_bounded_by_bare():
    bare = mf.static_rate_per_ppm(mf.p1_species(), np.array([0, 0, 10 * GAUSS_TO_TESLA]))
    for pairing in mf.enumerate_pairings():
        residual = mf.bath_driving_residual(10.0, pairing)
        assert residual <= bare + 1e-9


def test_driving_monotone_in_pairs():
    full = ((0, 5), (1, 4), (2, 3))
    for b_gauss in (10.0, 50.0):
        previous = mf.bath_driving_residual(b_gauss, ())
        for k in range(1, 4):
            residual = mf.bath_driving_residual(b_gauss, full[:k])
            assert residual <= previous + 1e-12
            previous = residual


def test_driving_rejects_overlapping_pairs():
    with pytest.raises(mf.MeanFieldError):
        mf.bath_driving_residual(10.0, ((0, 1), (1, 2)))


@pytest.mark.parametrize(
    "b_gauss,target,lo,hi",
    [(10.0, 4.0, 2.8, None), (30.0, 11.0, 7.7, 14.3), (100.0, 32.0, 22.4, 41.6)],
)
def test_best_pairing_suppression(b_gauss, target, lo, hi):
    bare = mf.static_rate_per_ppm(
        mf.p1_species(), np.array([0, 0, b_gauss * GAUSS_TO_TESLA])
    )
    _, residual = mf.best_pairing(b_gauss)
    suppression = bare / residual
    assert suppression >= lo
    if hi is not None:
        assert suppression <= hi


# ---------------------------------------------------------------------------
# off-axis NV DEER
# ---------------------------------------------------------------------------

def test_nv_offaxis_deer_anchor():
    rate = mf.nv_offaxis_deer_rate()
    assert rate.value_khz_per_ppm == pytest.approx(10.1, rel=0.10)


def test_nv_offaxis_maps_measured_rate_to_density():
    rate = mf.nv_offaxis_deer_rate()
    assert 1.2 / rate.value_khz_per_ppm == pytest.approx(0.12, rel=0.10)


def test_nv_offaxis_linear_in_coupling_scale():
    full = mf.nv_offaxis_deer_rate().value_khz_per_ppm
    halved = mf.nv_offaxis_deer_rate(
        constants=C.replace(mu0_hbar_prefactor=C.mu0_hbar_prefactor / 2)
    ).value_khz_per_ppm
    assert halved == pytest.approx(full / 2, rel=1e-12)


def test_nv_offaxis_polarization_bounds():
    with pytest.raises(mf.MeanFieldError):
        mf.nv_offaxis_species(polarization=1.5)
