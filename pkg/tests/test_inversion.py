"""Cost breakdown, alternating updates, driver loop, and the NSE metric."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scatlab.domain import ContrastMap, ImagingGrid
from scatlab.errors import DataError, DivergenceError
from scatlab.forward import simulate_scattered_fields
from scatlab.inversion import (
    CostBreakdown,
    InversionConfig,
    InversionState,
    _cost_terms,
    _radiate_all,
    cost,
    nse,
    run,
    update_chi,
    update_w,
)
from scatlab.subspace import dominant_current


def _norms(e_s_meas, decomp):
    dom = dominant_current(decomp, e_s_meas)
    return np.sum(np.abs(e_s_meas) ** 2, axis=2), dom


class TestCost:
    def test_all_zero_state_gives_one_per_pair(self, foam_setup):
        # W = 0, chi = 0, lambda = 0: both normalized residuals equal one,
        # so the halved total is K * P
        m = foam_setup["data"].e_scat_rx
        K, P, Q = m.shape
        grid = foam_setup["grid"]
        norm_meas, dom = _norms(m, foam_setup["decomp"])
        zeros_w = np.zeros((K, P, grid.n_cells), dtype=complex)
        breakdown = _cost_terms(
            np.zeros(grid.n_cells, dtype=complex), zeros_w,
            np.zeros((K, P), dtype=complex), np.zeros_like(m), m,
            foam_setup["e_inc"].e_inc_domain, zeros_w, np.zeros_like(m),
            0.5, dom.norm_sq, norm_meas,
        )
        assert breakdown.total == pytest.approx(K * P, rel=1e-12)
        assert breakdown.data_term == pytest.approx(K * P / 2, rel=1e-12)
        assert breakdown.calib_term == pytest.approx(K * P / 2, rel=1e-12)
        assert breakdown.state_term == 0.0
        assert breakdown.reg_term == 0.0

    def test_parts_sum_to_total_and_nonnegative(self, foam_setup):
        rng = np.random.default_rng(3)
        m = foam_setup["data"].e_scat_rx
        K, P, Q = m.shape
        n = foam_setup["grid"].n_cells
        norm_meas, dom = _norms(m, foam_setup["decomp"])
        w = rng.normal(size=(K, P, n)) + 1j * rng.normal(size=(K, P, n))
        chi_v = rng.normal(size=n) * 0.2 + 0j
        lam = rng.normal(size=(K, P)) + 1j * rng.normal(size=(K, P))
        ops = foam_setup["operators"]
        breakdown = _cost_terms(
            chi_v, w, lam, m * 0.7, m, foam_setup["e_inc"].e_inc_domain,
            _radiate_all(w, ops, "g_domain"), _radiate_all(w, ops, "g_sensor"),
            0.3, dom.norm_sq, norm_meas,
        )
        parts = [breakdown.data_term, breakdown.state_term,
                 breakdown.calib_term, breakdown.reg_term]
        assert all(p >= 0 for p in parts)
        assert breakdown.total == pytest.approx(sum(parts), rel=1e-12)

    def test_exact_forward_state_scores_near_zero(self, foam_setup):
        # true chi and lambda with consistent simulated fields: data and
        # state terms at solver-tolerance scale, calibration term zero
        truth = foam_setup["truth"]
        ops = foam_setup["operators"]
        e_inc = foam_setup["e_inc"].e_inc_domain
        lam_true = 2.0
        fields = simulate_scattered_fields(
            truth, ops, e_inc, lambdas=lam_true * np.ones((1, 8)), method="direct"
        )
        m = fields.e_scat_rx
        norm_meas, dom = _norms(m, foam_setup["decomp"])
        lam = lam_true * np.ones((1, 8), dtype=complex)
        breakdown = _cost_terms(
            truth.values, fields.current, lam, m / lam_true, m, e_inc,
            fields.e_domain, _radiate_all(fields.current, ops, "g_sensor"),
            0.0, dom.norm_sq, norm_meas,
        )
        assert breakdown.data_term < 1e-12
        assert breakdown.state_term < 1e-12
        assert breakdown.calib_term < 1e-20

    def test_beta_linearity(self, foam_setup):
        rng = np.random.default_rng(5)
        m = foam_setup["data"].e_scat_rx
        K, P, _ = m.shape
        n = foam_setup["grid"].n_cells
        norm_meas, dom = _norms(m, foam_setup["decomp"])
        w = rng.normal(size=(K, P, n)) + 0j
        chi_v = rng.normal(size=n) * 0.1 + 0j
        lam = np.full((K, P), 1.3 - 0.2j)
        ops = foam_setup["operators"]
        args = (
            chi_v, w, lam, m, m, foam_setup["e_inc"].e_inc_domain,
            _radiate_all(w, ops, "g_domain"), _radiate_all(w, ops, "g_sensor"),
        )
        b1 = _cost_terms(*args, 0.4, dom.norm_sq, norm_meas)
        b2 = _cost_terms(*args, 0.8, dom.norm_sq, norm_meas)
        assert b2.reg_term == pytest.approx(2 * b1.reg_term, rel=1e-12)
        assert b2.data_term == b1.data_term
        assert b2.state_term == b1.state_term
        assert b2.calib_term == b1.calib_term

    def test_zero_norm_measurement_rejected(self, foam_setup):
        m = np.zeros_like(foam_setup["data"].e_scat_rx)
        grid = foam_setup["grid"]
        state = InversionState(
            chi=ContrastMap(grid, np.zeros(grid.n_cells)),
            w=np.zeros((1, 8, grid.n_cells), dtype=complex),
            lambda_=np.ones((1, 8), dtype=complex),
            e_s_sim=np.zeros_like(m),
        )
        dom = dominant_current(foam_setup["decomp"], foam_setup["data"].e_scat_rx)
        with pytest.raises(DataError):
            cost(state, m, foam_setup["e_inc"].e_inc_domain,
                 foam_setup["operators"], dom, InversionConfig())

    def test_reduces_to_two_term_cost_with_unit_lambda(self, foam_setup):
        # lambda = 1, beta = 0, simulated = measured: the calibration and
        # regularizer terms vanish and the data/state split carries the
        # whole cost (checked with two frequencies via stacking)
        rng = np.random.default_rng(7)
        m = foam_setup["data"].e_scat_rx
        m2 = np.concatenate([m, 1.3 * m], axis=0)  # fake second frequency
        K, P, Q = m2.shape
        n = foam_setup["grid"].n_cells
        ops = foam_setup["operators"]
        dom = dominant_current(foam_setup["decomp"], m)
        norm2 = np.concatenate([dom.norm_sq, dom.norm_sq * 1.3 ** 2], axis=0)
        w = rng.normal(size=(K, P, n)) + 1j * rng.normal(size=(K, P, n))
        chi_v = 0.1 * rng.normal(size=n) + 0j
        e_inc2 = np.concatenate([foam_setup["e_inc"].e_inc_domain] * 2, axis=0)
        e_dom = np.concatenate([_radiate_all(w[:1], ops, "g_domain"),
                                _radiate_all(w[1:], ops, "g_domain")], axis=0)
        gs_w = np.concatenate([_radiate_all(w[:1], ops, "g_sensor"),
                               _radiate_all(w[1:], ops, "g_sensor")], axis=0)
        breakdown = _cost_terms(
            chi_v, w, np.ones((K, P), dtype=complex), m2, m2, e_inc2, e_dom,
            gs_w, 0.0, norm2, np.sum(np.abs(m2) ** 2, axis=2),
        )
        assert breakdown.calib_term == 0.0
        assert breakdown.reg_term == 0.0
        assert breakdown.total == pytest.approx(
            breakdown.data_term + breakdown.state_term, rel=1e-12
        )


class TestUpdateW:
    def test_matches_dense_least_squares(self, small_setup):
        rng = np.random.default_rng(7)
        grid = small_setup["grid"]
        ops = small_setup["operators"]
        n = grid.n_cells
        K, P = 1, 2
        q = ops.sensors.n_rx
        chi_v = rng.normal(size=n) * 0.4 + 0j
        lam = np.full((K, P), 1.3 + 0.2j)
        m = rng.normal(size=(K, P, q)) + 1j * rng.normal(size=(K, P, q))
        eta_s = np.sum(np.abs(m) ** 2, axis=2)
        eta_d = np.full((K, P), 2.7)
        e_inc = small_setup["e_inc"].e_inc_domain[:, :P]
        gs, gd = ops.g_sensor[0], ops.g_domain[0]
        w_opt = np.zeros((K, P, n), dtype=complex)
        for p in range(P):
            a = np.vstack([
                gs / np.sqrt(eta_s[0, p]),
                (np.eye(n) - chi_v[:, None] * gd) / np.sqrt(eta_d[0, p]),
            ])
            b = np.concatenate([
                m[0, p] / np.sqrt(eta_s[0, p]),
                lam[0, p] * chi_v * e_inc[0, p] / np.sqrt(eta_d[0, p]),
            ])
            w_opt[0, p] = np.linalg.lstsq(a, b, rcond=None)[0]
        w = update_w(np.zeros((K, P, n), complex), chi_v, lam, m, e_inc, ops,
                     eta_d, eta_s, n_iters=400)
        assert np.linalg.norm(w - w_opt) / np.linalg.norm(w_opt) < 1e-8

    def test_stationary_at_minimizer(self, small_setup):
        rng = np.random.default_rng(11)
        grid = small_setup["grid"]
        ops = small_setup["operators"]
        n = grid.n_cells
        q = ops.sensors.n_rx
        chi_v = rng.normal(size=n) * 0.3 + 0j
        lam = np.ones((1, 1), dtype=complex)
        m = rng.normal(size=(1, 1, q)) + 1j * rng.normal(size=(1, 1, q))
        eta_s = np.sum(np.abs(m) ** 2, axis=2)
        eta_d = np.ones((1, 1))
        e_inc = small_setup["e_inc"].e_inc_domain[:, :1]
        gs, gd = ops.g_sensor[0], ops.g_domain[0]
        a = np.vstack([gs / np.sqrt(eta_s[0, 0]),
                       (np.eye(n) - chi_v[:, None] * gd)])
        b = np.concatenate([m[0, 0] / np.sqrt(eta_s[0, 0]), chi_v * e_inc[0, 0]])
        w_opt = np.linalg.lstsq(a, b, rcond=None)[0].reshape(1, 1, n)
        moved = update_w(w_opt.copy(), chi_v, lam, m, e_inc, ops, eta_d, eta_s, 5)
        assert np.linalg.norm(moved - w_opt) / np.linalg.norm(w_opt) < 1e-10

    def test_descent_property(self, foam_setup):
        rng = np.random.default_rng(13)
        m = foam_setup["data"].e_scat_rx
        K, P, _ = m.shape
        n = foam_setup["grid"].n_cells
        norm_meas, dom = _norms(m, foam_setup["decomp"])
        chi_v = 0.3 * rng.normal(size=n) + 0j
        lam = np.ones((K, P), dtype=complex)
        ops = foam_setup["operators"]
        e_inc = foam_setup["e_inc"].e_inc_domain

        def two_term_cost(w):
            e_dom = _radiate_all(w, ops, "g_domain")
            gs_w = _radiate_all(w, ops, "g_sensor")
            b = _cost_terms(chi_v, w, lam, m, m, e_inc, e_dom, gs_w,
                            0.0, dom.norm_sq, norm_meas)
            return b.data_term + b.state_term

        w = dom.w_plus.copy()
        before = two_term_cost(w)
        for _ in range(5):
            w = update_w(w, chi_v, lam, m, e_inc, ops, dom.norm_sq, norm_meas, 3)
            after = two_term_cost(w)
            assert after <= before + 1e-12
            before = after


class TestUpdateChi:
    def test_recovers_consistent_contrast(self, foam_setup):
        # W = chi * E with consistent fields: the closed form returns chi
        truth = foam_setup["truth"]
        ops = foam_setup["operators"]
        e_inc = foam_setup["e_inc"].e_inc_domain
        lam = np.full((1, 8), 1.4 - 0.3j)
        fields = simulate_scattered_fields(truth, ops, e_inc, lambdas=lam, method="direct")
        dom = dominant_current(foam_setup["decomp"], fields.e_scat_rx)
        chi0 = ContrastMap(foam_setup["grid"], np.zeros(foam_setup["grid"].n_cells))
        rec = update_chi(chi0, fields.current, lam, e_inc, fields.e_domain,
                         dom.norm_sq, project=False)
        active = np.abs(truth.values) > 0
        err = np.linalg.norm(rec.values[active] - truth.values[active])
        assert err / np.linalg.norm(truth.values[active]) < 1e-10

    def test_single_cell_hand_ratio(self):
        # one cell, one (k, p): chi = conj(E) W / |E|^2
        grid = ImagingGrid(1, 1, 0.01, 0.01)
        w = np.array([[[0.8 - 0.4j]]])
        e_inc = np.array([[[1.1 + 0.7j]]])
        e_dom = np.array([[[0.2 - 0.1j]]])
        lam = np.array([[1.5 + 0.5j]])
        e_tot = lam[0, 0] * e_inc[0, 0, 0] + e_dom[0, 0, 0]
        expected = np.conj(e_tot) * w[0, 0, 0] / abs(e_tot) ** 2
        chi0 = ContrastMap(grid, np.zeros(1))
        rec = update_chi(chi0, w, lam, e_inc, e_dom, np.ones((1, 1)), project=False)
        assert rec.values[0] == pytest.approx(expected, rel=1e-12)

    def test_projection_clamps_to_physical_quadrant(self):
        grid = ImagingGrid(1, 1, 0.01, 0.01)
        w = np.array([[[(-0.2 + 0.3j) * (1.0 + 0j)]]])  # raw chi = -0.2+0.3j
        e_inc = np.array([[[1.0 + 0j]]])
        e_dom = np.array([[[0.0 + 0j]]])
        lam = np.ones((1, 1), dtype=complex)
        chi0 = ContrastMap(grid, np.zeros(1))
        rec = update_chi(chi0, w, lam, e_inc, e_dom, np.ones((1, 1)))
        assert rec.values[0].real == 0.0
        assert rec.values[0].imag == 0.0

    def test_zero_field_cell_left_unchanged(self):
        grid = ImagingGrid(2, 1, 0.02, 0.01)
        w = np.zeros((1, 1, 2), dtype=complex)
        w[0, 0, 0] = 1.0
        e_inc = np.zeros((1, 1, 2), dtype=complex)
        e_inc[0, 0, 0] = 1.0
        e_dom = np.zeros((1, 1, 2), dtype=complex)
        lam = np.ones((1, 1), dtype=complex)
        chi0 = ContrastMap(grid, np.array([0.0, 0.7 + 0j]))
        rec = update_chi(chi0, w, lam, e_inc, e_dom, np.ones((1, 1)), project=False)
        assert rec.values[1] == pytest.approx(0.7)   # untouched cell
        assert rec.values[0] == pytest.approx(1.0)

    def test_cgd_agrees_with_closed_form(self, small_setup):
        rng = np.random.default_rng(17)
        grid = small_setup["grid"]
        ops = small_setup["operators"]
        n = grid.n_cells
        K, P = 1, 4
        e_inc = small_setup["e_inc"].e_inc_domain
        w = rng.normal(size=(K, P, n)) + 1j * rng.normal(size=(K, P, n))
        e_dom = _radiate_all(w, ops, "g_domain")
        lam = np.full((K, P), 0.9 + 0.1j)
        eta = np.full((K, P), 1.7)
        chi0 = ContrastMap(grid, np.zeros(n))
        closed = update_chi(chi0, w, lam, e_inc, e_dom, eta, mode="closed_form",
                            project=False)
        cgd = update_chi(chi0, w, lam, e_inc, e_dom, eta, mode="cgd",
                         n_iters=300, project=False)
        rel = np.linalg.norm(cgd.values - closed.values) / np.linalg.norm(closed.values)
        assert rel < 1e-6


class TestRunDriver:
    def test_descent_of_every_substep_and_outer_sequence(self, foam_setup):
        # instrumented mini-run: cost never increases across W and chi
        # sub-steps (fixed simulated field), nor across outer iterations
        m = foam_setup["data"].e_scat_rx
        ops = foam_setup["operators"]
        e_inc = foam_setup["e_inc"].e_inc_domain
        norm_meas, dom = _norms(m, foam_setup["decomp"])
        chi = ContrastMap(foam_setup["grid"], np.zeros(foam_setup["grid"].n_cells))
        w = dom.w_plus.copy()
        lam = np.ones((1, 8), dtype=complex)
        e_dom = _radiate_all(w, ops, "g_domain")
        chi = update_chi(chi, w, lam, e_inc, e_dom, dom.norm_sq)

        def total(w_, chi_):
            e_d = _radiate_all(w_, ops, "g_domain")
            gs_w = _radiate_all(w_, ops, "g_sensor")
            return _cost_terms(chi_.values, w_, lam, m, m, e_inc, e_d, gs_w,
                               0.0, dom.norm_sq, norm_meas).total

        prev_outer = total(w, chi)
        for _ in range(6):
            before = total(w, chi)
            w = update_w(w, chi.values, lam, m, e_inc, ops, dom.norm_sq,
                         norm_meas, 4)
            after_w = total(w, chi)
            assert after_w <= before + 1e-12
            e_dom = _radiate_all(w, ops, "g_domain")
            chi = update_chi(chi, w, lam, e_inc, e_dom, dom.norm_sq)
            after_chi = total(w, chi)
            assert after_chi <= after_w + 1e-12
            assert after_chi <= prev_outer + 1e-12
            prev_outer = after_chi

    def test_run_reaches_good_reconstruction_without_calibration(self, foam_setup):
        # noiseless synthetic data, true lambda = 1 supplied, calibration
        # off: the reconstruction lands well under the quality bar
        cfg = InversionConfig(
            beta=0.0, calibration_mode="none", exact_solver="direct",
            max_outer_iters=150, termination_tol=1e-9,
        )
        state = run(foam_setup["data"].e_scat_rx, foam_setup["e_inc"].e_inc_domain,
                    foam_setup["operators"], foam_setup["decomp"], cfg)
        report = nse(state.chi, foam_setup["truth"])
        assert report.nse < 0.05
        totals = [c.total for c in state.cost_history]
        assert all(b <= a + 1e-10 for a, b in zip(totals, totals[1:]))

    def test_termination_tolerance_stops_loop(self, foam_setup):
        cfg = InversionConfig(beta=0.0, calibration_mode="none",
                              exact_solver="direct", max_outer_iters=200,
                              termination_tol=1e-2)
        state = run(foam_setup["data"].e_scat_rx, foam_setup["e_inc"].e_inc_domain,
                    foam_setup["operators"], foam_setup["decomp"], cfg)
        assert state.converged
        assert state.iteration < 200

    def test_calibration_none_pins_lambda(self, foam_setup):
        cfg = InversionConfig(beta=0.5, calibration_mode="none",
                              exact_solver="direct", max_outer_iters=3,
                              termination_tol=1e-12)
        state = run(foam_setup["data"].e_scat_rx, foam_setup["e_inc"].e_inc_domain,
                    foam_setup["operators"], foam_setup["decomp"], cfg)
        assert np.all(state.lambda_ == 1.0)

    def test_divergence_guard_raises(self, foam_setup):
        # sabotage: a huge termination-free run on data scaled so wildly the
        # guard must trip is hard to fabricate honestly, so the guard is
        # exercised directly on its contract: a cost history that grows
        # tenfold aborts with the state attached
        m = foam_setup["data"].e_scat_rx
        cfg = InversionConfig(beta=0.0, calibration_mode="none",
                              exact_solver="direct", max_outer_iters=4,
                              termination_tol=1e-15, divergence_factor=0.5)
        # divergence_factor < 1 turns the guard into a tripwire on any
        # non-strictly-decreasing step, which the first iterations satisfy
        with pytest.raises(DivergenceError) as info:
            run(m, foam_setup["e_inc"].e_inc_domain, foam_setup["operators"],
                foam_setup["decomp"], cfg)
        assert isinstance(info.value.state, InversionState)

    def test_joint_calibration_recovers_uniform_scale(self, foam_setup):
        lam_true = 2.0
        data = simulate_scattered_fields(
            foam_setup["truth"], foam_setup["operators"],
            foam_setup["e_inc"].e_inc_domain,
            lambdas=lam_true * np.ones((1, 8)), method="direct",
        )
        cfg = InversionConfig(beta=1e-3, calibration_mode="joint",
                              exact_solver="direct", max_outer_iters=50,
                              termination_tol=5e-4)
        state = run(data.e_scat_rx, foam_setup["e_inc"].e_inc_domain,
                    foam_setup["operators"], foam_setup["decomp"], cfg)
        assert abs(state.lambda_[0, 0] - lam_true) <= 0.1
        assert np.allclose(state.lambda_, state.lambda_[0, 0])


class TestNse:
    def test_identical_maps_zero(self, foam_setup):
        truth = foam_setup["truth"]
        report = nse(truth, truth)
        assert report.nse == 0.0

    def test_free_space_estimate_oracle(self, foam_setup):
        # direct summation oracle over scatterer pixels, averaged over L
        truth = foam_setup["truth"]
        grid = foam_setup["grid"]
        estimate = ContrastMap(grid, np.zeros(grid.n_cells))
        eps_true = 1.0 + truth.values.real
        expected = np.sum((1.0 - eps_true) ** 2 / eps_true ** 2) / grid.n_cells
        assert nse(estimate, truth).nse == pytest.approx(expected, rel=1e-12)

    def test_grid_mismatch_rejected(self, foam_setup):
        other = ImagingGrid(8, 8, 0.15, 0.15)
        with pytest.raises(DataError):
            nse(ContrastMap(other, np.zeros(64)), foam_setup["truth"])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2 ** 31- 1))
def test_nse_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    grid = ImagingGrid(6, 6, 0.06, 0.06)
    est = ContrastMap(grid, rng.uniform(0, 2, size=36) + 0j)
    tru = ContrastMap(grid, rng.uniform(0, 2, size=36) + 0j)
    perm = rng.permutation(36)
    base = nse(est, tru).nse
    shuffled = nse(
        ContrastMap(grid, est.values[perm]), ContrastMap(grid, tru.values[perm])
    ).nse
    assert shuffled == pytest.approx(base, rel=1e-12)
