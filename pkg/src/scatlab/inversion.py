"""Alternating contrast-source inversion with data-driven calibration.

One outer iteration updates, in order: the contrast sources W (conjugate
gradients on the two quadratic field terms), the contrast chi (per-cell
closed form, optionally CGD), the simulated scattered field (exact
forward solve or neural surrogate), and the calibration factors lambda
(one CGD pass).  The loop stops when the total cost changes by less than
the termination tolerance.

The total cost per (frequency k, transmitter p), halved and summed:

    ||E_meas - G_S W||^2 / ||E_meas||^2                      data fidelity
  + ||W - chi (lambda E_inc + G_D W)||^2 / ||W+||^2          state mismatch
  + ||lambda E_sim - E_meas||^2 / ||E_meas||^2               calibration fit
  + beta |lambda|^2                                          regularizer
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import calibration
from .calibration import CalibrationProblem, CalibrationState
from .domain import ContrastMap
from .errors import ConfigurationError, DataError, DivergenceError
from .forward import GreensOperators, simulate_scattered_fields
from .subspace import DominantCurrent, SubspaceDecomposition, dominant_current


@dataclass(frozen=True)
class InversionConfig:
    beta: float = 1e-3
    termination_tol: float = 5e-4
    max_outer_iters: int = 200
    w_inner_iters: int = 20
    chi_mode: str = "closed_form"
    chi_inner_iters: int = 20
    calibration_mode: str = "per_tx"
    lambda_domain: str = "complex"
    surrogate_mode: str = "exact_forward"
    exact_solver: str = "cgd"
    forward_tol: float = 1e-8
    forward_max_iter: int = 2000
    calibration_passes: int = 1
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.termination_tol <= 0:
            raise ConfigurationError("termination tolerance must be positive")
        if self.beta < 0:
            raise ConfigurationError("beta must be nonnegative")
        if self.calibration_mode not in ("none", "joint", "per_tx"):
            raise ConfigurationError(f"unknown calibration_mode {self.calibration_mode!r}")
        if self.lambda_domain not in ("real", "complex"):
            raise ConfigurationError(f"unknown lambda_domain {self.lambda_domain!r}")
        if self.surrogate_mode not in ("exact_forward", "neural"):
            raise ConfigurationError(f"unknown surrogate_mode {self.surrogate_mode!r}")
        if self.chi_mode not in ("closed_form", "cgd"):
            raise ConfigurationError(f"unknown chi_mode {self.chi_mode!r}")


@dataclass(frozen=True)
class CostBreakdown:
    data_term: float
    state_term: float
    calib_term: float
    reg_term: float
    total: float

    def as_dict(self):
        return {
            "data_term": self.data_term,
            "state_term": self.state_term,
            "calib_term": self.calib_term,
            "reg_term": self.reg_term,
            "total": self.total,
        }


@dataclass
class InversionState:
    chi: ContrastMap
    w: np.ndarray
    lambda_: np.ndarray
    e_s_sim: np.ndarray
    iteration: int = 0
    cost_history: list = field(default_factory=list)
    lambda_history: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""


@dataclass(frozen=True)
class NseReport:
    nse: float
    error_map: np.ndarray


def _check_norms(norm_meas_sq, norm_wplus_sq):
    if np.any(norm_meas_sq <= 0):
        raise DataError("a (frequency, transmitter) pair has zero measured field norm")
    if np.any(norm_wplus_sq <= 0):
        raise DataError("a (frequency, transmitter) pair has zero dominant-current norm")


def _radiate_all(w, operators, which):
    """Batched G W per frequency; which is 'g_domain' or 'g_sensor'."""
    mats = getattr(operators, which)
    out = np.empty(w.shape[:2] + (mats[0].shape[0],), dtype=complex)
    for k, mat in enumerate(mats):
        out[k] = w[k] @ mat.T
    return out


def _cost_terms(chi_v, w, lam, e_s_sim, e_s_meas, e_inc_domain, e_domain,
                gs_w, beta, norm_wplus_sq, norm_meas_sq):
    lam = np.asarray(lam, dtype=complex)
    t1 = np.sum(np.abs(e_s_meas - gs_w) ** 2, axis=2) / norm_meas_sq
    e_tot = lam[:, :, np.newaxis] * e_inc_domain + e_domain
    mism = w - chi_v[np.newaxis, np.newaxis, :] * e_tot
    t2 = np.sum(np.abs(mism) ** 2, axis=2) / norm_wplus_sq
    t3 = np.sum(np.abs(lam[:, :, np.newaxis] * e_s_sim - e_s_meas) ** 2, axis=2) / norm_meas_sq
    t4 = beta * np.abs(lam) ** 2
    return CostBreakdown(
        data_term=0.5 * float(np.sum(t1)),
        state_term=0.5 * float(np.sum(t2)),
        calib_term=0.5 * float(np.sum(t3)),
        reg_term=0.5 * float(np.sum(t4)),
        total=0.5 * float(np.sum(t1 + t2 + t3 + t4)),
    )


def cost(
    state: InversionState,
    e_s_meas: np.ndarray,
    e_inc_domain: np.ndarray,
    operators: GreensOperators,
    dom: DominantCurrent,
    config: InversionConfig,
) -> CostBreakdown:
    """Evaluate the full cost breakdown for an inversion state."""
    norm_meas_sq = np.sum(np.abs(e_s_meas) ** 2, axis=2)
    _check_norms(norm_meas_sq, dom.norm_sq)
    e_domain = _radiate_all(state.w, operators, "g_domain")
    gs_w = _radiate_all(state.w, operators, "g_sensor")
    return _cost_terms(
        state.chi.values, state.w, state.lambda_, state.e_s_sim, e_s_meas,
        e_inc_domain, e_domain, gs_w,
        config.beta, dom.norm_sq, norm_meas_sq,
    )


def update_w(
    w: np.ndarray,
    chi_v: np.ndarray,
    lam: np.ndarray,
    e_s_meas: np.ndarray,
    e_inc_domain: np.ndarray,
    operators: GreensOperators,
    norm_wplus_sq: np.ndarray,
    norm_meas_sq: np.ndarray,
    n_iters: int,
) -> np.ndarray:
    """Fixed-count Polak-Ribiere CG on the W-dependent cost terms.

    Minimizes, per (k, p), the data-fidelity plus state-mismatch terms
    (the only W-dependent ones) with conjugate-coordinate gradients and
    exact line searches; the cost never increases.  Batched over
    transmitters within each frequency.
    """
    w = np.array(w, dtype=complex, copy=True)
    K, P, n = w.shape
    for k in range(K):
        gs = operators.g_sensor[k]
        gd = operators.g_domain[k]
        gs_c = np.conj(gs)
        gd_c = np.conj(gd)
        eta_s = norm_meas_sq[k][:, np.newaxis]
        eta_d = norm_wplus_sq[k][:, np.newaxis]
        rhs2 = lam[k][:, np.newaxis] * chi_v[np.newaxis, :] * e_inc_domain[k]

        wk = w[k]
        r1 = e_s_meas[k] - wk @ gs.T
        u = (wk - chi_v[np.newaxis, :] * (wk @ gd.T)) - rhs2
        g_prev = None
        d_prev = None
        for _ in range(n_iters):
            # Adjoint of (I - diag(chi) G_D) reverses the product order:
            # (I - conj(G_D) diag(conj(chi))) u, row-vector form below.
            g = -(r1 / eta_s) @ gs_c + (u - (np.conj(chi_v)[np.newaxis, :] * u) @ gd_c) / eta_d
            if g_prev is None:
                d = -g
            else:
                denom = np.sum(np.abs(g_prev) ** 2, axis=1)
                pr = np.real(np.sum(np.conj(g) * (g - g_prev), axis=1))
                beta_pr = np.where(denom > 0, np.maximum(0.0, pr / np.where(denom > 0, denom, 1.0)), 0.0)
                d = -g + beta_pr[:, np.newaxis] * d_prev
                bad = np.real(np.sum(np.conj(d) * g, axis=1)) >= 0.0
                if np.any(bad):
                    d[bad] = -g[bad]
            a1d = d @ gs.T
            a2d = d - chi_v[np.newaxis, :] * (d @ gd.T)
            num = (
                np.sum(np.conj(a1d) * r1, axis=1) / eta_s[:, 0]
                - np.sum(np.conj(a2d) * u, axis=1) / eta_d[:, 0]
            )
            den = (
                np.sum(np.abs(a1d) ** 2, axis=1) / eta_s[:, 0]
                + np.sum(np.abs(a2d) ** 2, axis=1) / eta_d[:, 0]
            )
            alpha = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
            wk = wk + alpha[:, np.newaxis] * d
            r1 = r1 - alpha[:, np.newaxis] * a1d
            u = u + alpha[:, np.newaxis] * a2d
            g_prev, d_prev = g, d
        if not np.all(np.isfinite(wk)):
            raise FloatingPointError("non-finite current iterate in W update")
        w[k] = wk
    return w


def _chi_normal_parts(w, lam, e_inc_domain, e_domain, norm_wplus_sq):
    """Per-cell numerator and denominator of the chi least-squares system."""
    e_tot = np.asarray(lam, dtype=complex)[:, :, np.newaxis] * e_inc_domain + e_domain
    weights = 1.0 / norm_wplus_sq
    num = np.einsum("kp,kpn->n", weights, np.conj(e_tot) * w)
    den = np.einsum("kp,kpn->n", weights, np.abs(e_tot) ** 2).real
    return num, den, e_tot


def project_contrast(chi_v: np.ndarray) -> np.ndarray:
    """Clamp to the physical quadrant: eps_r >= 1 and passive loss.

    With the exp(+j omega t) convention, chi = eps_r - 1 - j sigma/(omega eps0),
    so passivity requires Im(chi) <= 0.
    """
    return np.maximum(chi_v.real, 0.0) + 1j * np.minimum(chi_v.imag, 0.0)


def update_chi(
    chi: ContrastMap,
    w: np.ndarray,
    lam: np.ndarray,
    e_inc_domain: np.ndarray,
    e_domain: np.ndarray,
    norm_wplus_sq: np.ndarray,
    mode: str = "closed_form",
    n_iters: int = 20,
    project: bool = True,
) -> ContrastMap:
    """Minimize the state-mismatch term over the contrast.

    The term decouples per cell into a scalar quadratic, so the closed
    form chi_l = sum(conj(E_l) W_l / ||W+||^2) / sum(|E_l|^2 / ||W+||^2)
    with E = lambda E_inc + G_D W is the exact minimizer; CGD mode runs
    conjugate gradients on the same quadratic instead.  Cells where the
    total field vanishes for every (k, p) keep their previous value.
    The physical projection afterwards is the exact constrained
    minimizer because the quadratic is an |E|^2-weighted distance.
    """
    num, den, e_tot = _chi_normal_parts(w, lam, e_inc_domain, e_domain, norm_wplus_sq)
    old = chi.values
    if mode == "closed_form":
        new = np.where(den > 0, num / np.where(den > 0, den, 1.0), old)
    elif mode == "cgd":
        x = np.array(old, dtype=complex, copy=True)
        g_prev = d_prev = None
        for _ in range(n_iters):
            g = den * x - num
            if g_prev is None:
                d = -g
            else:
                denom = np.vdot(g_prev, g_prev).real
                pr = np.real(np.vdot(g, g - g_prev))
                beta_pr = max(0.0, pr / denom) if denom > 0 else 0.0
                d = -g + beta_pr * d_prev
                if np.real(np.vdot(d, g)) >= 0.0:
                    d = -g
            curv = float(np.sum(den * np.abs(d) ** 2))
            if curv <= 0:
                break
            alpha = -np.vdot(d, g) / curv
            x = x + alpha * d
            g_prev, d_prev = g, d
        new = np.where(den > 0, x, old)
    else:
        raise ConfigurationError(f"unknown chi mode {mode!r}")
    if project:
        new = project_contrast(new)
    return chi.with_values(new)


def refresh_simulated_field(
    chi: ContrastMap,
    operators: GreensOperators,
    e_inc_domain: np.ndarray,
    config: InversionConfig,
    surrogate=None,
) -> np.ndarray:
    """Recompute the uncalibrated simulated scattered field for chi."""
    if config.surrogate_mode == "neural":
        from .surrogate import predict

        return predict(surrogate, chi)
    reports = []
    fields = simulate_scattered_fields(
        chi, operators, e_inc_domain,
        tol=config.forward_tol, max_iter=config.forward_max_iter,
        method=config.exact_solver,
        on_report=lambda k, p, rep: reports.append((k, p, rep)),
    )
    stale = [(k, p) for k, p, rep in reports if not rep.converged]
    if stale:
        warnings.warn(
            f"forward refresh did not fully converge for {len(stale)} (k,p) pairs",
            stacklevel=2,
        )
    return fields.e_scat_rx


def nse(estimate: ContrastMap, truth: ContrastMap) -> NseReport:
    """Normalized squared error between permittivity maps.

    Delta averages the per-pixel normalized errors |eps_est - eps_true|^2
    / |eps_true|^2 over the L image pixels, with eps = 1 + chi.  The
    per-pixel normalization keeps the metric comparable across grid
    resolutions; error_map holds the unaveraged per-pixel values.
    """
    if estimate.grid != truth.grid:
        raise DataError("estimate and truth live on different grids")
    eps_est = 1.0 + estimate.values
    eps_true = 1.0 + truth.values
    err = np.abs(eps_est - eps_true) ** 2 / np.abs(eps_true) ** 2
    return NseReport(nse=float(np.mean(err)), error_map=err)


def run(
    e_s_meas: np.ndarray,
    e_inc_domain: np.ndarray,
    operators: GreensOperators,
    decomp: SubspaceDecomposition,
    config: InversionConfig,
    surrogate=None,
    on_iteration: Optional[Callable[[InversionState], None]] = None,
) -> InversionState:
    """Full alternating minimization loop with termination |dJ| <= tol.

    Initialization: W from the dominant current, chi from one closed-form
    chi step, lambda = 1 everywhere.  With calibration_mode="none" the
    calibration factors stay pinned at 1.

    Raises
    ------
    DataError
        On zero-norm measurements or dominant currents, or a surrogate
        trained for a different geometry.
    DivergenceError
        If the total cost grows past divergence_factor times its minimum.
    """
    e_s_meas = np.asarray(e_s_meas, dtype=complex)
    e_inc_domain = np.asarray(e_inc_domain, dtype=complex)
    K, P, _ = e_s_meas.shape

    if config.surrogate_mode == "neural":
        if surrogate is None:
            raise ConfigurationError("surrogate_mode='neural' requires a surrogate")
        from .domain import geometry_hash

        run_hash = geometry_hash(operators.grid, operators.sensors, operators.freqs)
        if surrogate.geometry_hash != run_hash:
            raise DataError("surrogate geometry hash does not match the run geometry")

    norm_meas_sq = np.sum(np.abs(e_s_meas) ** 2, axis=2)
    dom = dominant_current(decomp, e_s_meas)
    _check_norms(norm_meas_sq, dom.norm_sq)

    chi_v0 = np.zeros(operators.grid.n_cells, dtype=complex)
    w = dom.w_plus.copy()
    lam = np.ones((K, P), dtype=complex)
    e_domain = _radiate_all(w, operators, "g_domain")
    chi = update_chi(
        ContrastMap(operators.grid, chi_v0), w, lam, e_inc_domain, e_domain,
        dom.norm_sq, mode="closed_form",
    )
    e_s_sim = refresh_simulated_field(chi, operators, e_inc_domain, config, surrogate)

    cal_state = CalibrationState.initial(
        K, P,
        mode=config.calibration_mode if config.calibration_mode != "none" else "per_tx",
        domain=config.lambda_domain,
    )

    state = InversionState(chi=chi, w=w, lambda_=lam, e_s_sim=e_s_sim)
    j_prev = np.inf
    j_min = np.inf
    for it in range(1, config.max_outer_iters + 1):
        w = update_w(
            w, chi.values, lam, e_s_meas, e_inc_domain, operators,
            dom.norm_sq, norm_meas_sq, config.w_inner_iters,
        )
        e_domain = _radiate_all(w, operators, "g_domain")
        chi = update_chi(
            chi, w, lam, e_inc_domain, e_domain, dom.norm_sq,
            mode=config.chi_mode, n_iters=config.chi_inner_iters,
        )
        e_s_sim = refresh_simulated_field(chi, operators, e_inc_domain, config, surrogate)
        if config.calibration_mode != "none":
            problem = CalibrationProblem.from_fields(
                chi.values, w, e_inc_domain, e_domain, e_s_sim, e_s_meas,
                config.beta, dom.norm_sq,
            )
            cal_state = calibration.update(cal_state, problem, passes=config.calibration_passes)
            lam = np.array(cal_state.lambda_, copy=True)

        gs_w = _radiate_all(w, operators, "g_sensor")
        breakdown = _cost_terms(
            chi.values, w, lam, e_s_sim, e_s_meas, e_inc_domain, e_domain,
            gs_w, config.beta, dom.norm_sq, norm_meas_sq,
        )
        state.chi = chi
        state.w = w
        state.lambda_ = lam
        state.e_s_sim = e_s_sim
        state.iteration = it
        state.cost_history.append(breakdown)
        state.lambda_history.append(lam.copy())
        if on_iteration is not None:
            on_iteration(state)

        j_min = min(j_min, breakdown.total)
        if breakdown.total > config.divergence_factor * j_min and it > 1:
            raise DivergenceError(
                f"cost {breakdown.total:.6g} exceeded {config.divergence_factor} x "
                f"minimum {j_min:.6g} at iteration {it}",
                state=state,
            )
        if abs(breakdown.total - j_prev) <= config.termination_tol:
            state.converged = True
            state.reason = "cost change below termination tolerance"
            return state
        j_prev = breakdown.total
    state.reason = "maximum outer iterations reached"
    return state
