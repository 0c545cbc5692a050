"""Complex calibration-factor estimation by conjugate gradient descent.

Each transmitter's calibration scalar lambda enters the total cost in two
places: it scales the incident field inside the state-mismatch term and
it scales the simulated scattered field against the measurement.  Both
terms are quadratic in lambda, so for fixed currents and contrast the
lambda-dependent part of the cost collapses, per (frequency, transmitter),
to

    J_lam = 1/2 * (A |lambda|^2 - 2 Re(conj(lambda) b) + c)

with real curvature A = ||chi E_inc||^2 / ||W+||^2
                      + ||E_sim||^2 / ||E_meas||^2 + beta
and b collecting the matching cross terms.  The conjugate-coordinate
gradient of the unhalved sum is then g = A lambda - b, the Polak-Ribiere
update supplies the direction, and the exact line-search step is
alpha = -<d, g> / (conj(d) A d), all in closed form.

Gradient derivation (conjugate-coordinate / Wirtinger calculus), writing
u = W - chi (G_D W), v = chi E_inc, s = E_sim, m = E_meas:

    d/d(conj(lambda)) ||u - lambda v||^2 = lambda ||v||^2 - <v, u>
    d/d(conj(lambda)) ||lambda s - m||^2 = lambda ||s||^2 - <s, m>
    d/d(conj(lambda)) beta |lambda|^2   = beta lambda

so g = (lambda ||v||^2 - <v,u>) / ||W+||^2
     + (lambda ||s||^2 - <s,m>) / ||m||^2 + beta lambda,
which vanishes at the single-variable minimizer.  <x, y> denotes the
conjugate-linear-in-first-argument inner product sum(conj(x) * y).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class CalibrationState:
    """Calibration factors plus CGD memory.

    lambda_ is (K, P); in joint mode the entries are identical across p
    for each k.  prev_gradient / prev_direction store the effective CGD
    memory: shaped (K, P) in per_tx mode, (K,) in joint mode; None before
    the first pass.  domain="real" constrains lambda to the real axis.
    """

    lambda_: np.ndarray
    prev_gradient: Optional[np.ndarray] = None
    prev_direction: Optional[np.ndarray] = None
    mode: str = "per_tx"
    domain: str = "complex"

    def __post_init__(self):
        lam = np.array(self.lambda_, dtype=complex, copy=True)
        if lam.ndim != 2:
            raise ValueError("lambda_ must be (K, P)")
        if self.mode not in ("per_tx", "joint"):
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        if self.domain not in ("complex", "real"):
            raise ValueError(f"unknown lambda domain {self.domain!r}")
        if self.mode == "joint" and not np.allclose(lam, lam[:, :1]):
            raise ValueError("joint mode requires identical lambda across transmitters")
        if self.domain == "real" and np.any(np.abs(lam.imag) > 0):
            raise ValueError("real domain requires Im(lambda) = 0")
        lam.setflags(write=False)
        object.__setattr__(self, "lambda_", lam)

    @staticmethod
    def initial(n_freq: int, n_tx: int, mode: str = "per_tx", domain: str = "complex"):
        return CalibrationState(
            lambda_=np.ones((n_freq, n_tx), dtype=complex), mode=mode, domain=domain
        )


@dataclass(frozen=True)
class CalibrationProblem:
    """Quadratic lambda-cost coefficients per (k, p): A real, b complex, c real."""

    curvature: np.ndarray
    cross: np.ndarray
    offset: np.ndarray

    @staticmethod
    def from_fields(chi_values, w, e_inc_domain, e_domain, e_s_sim, e_s_meas,
                    beta, norm_wplus_sq):
        """Collapse the field arrays into per-(k, p) quadratic coefficients.

        e_domain must equal G_D w for the current iterate.  Norms of the
        measured field are taken from e_s_meas directly.
        """
        chi_v = np.asarray(chi_values, dtype=complex).reshape(-1)
        v = chi_v[np.newaxis, np.newaxis, :] * e_inc_domain
        u = w - chi_v[np.newaxis, np.newaxis, :] * e_domain
        norm_meas_sq = np.sum(np.abs(e_s_meas) ** 2, axis=2)
        vv = np.sum(np.abs(v) ** 2, axis=2)
        vu = np.sum(np.conj(v) * u, axis=2)
        ss = np.sum(np.abs(e_s_sim) ** 2, axis=2)
        sm = np.sum(np.conj(e_s_sim) * e_s_meas, axis=2)
        uu = np.sum(np.abs(u) ** 2, axis=2)
        a = vv / norm_wplus_sq + ss / norm_meas_sq + beta
        b = vu / norm_wplus_sq + sm / norm_meas_sq
        c = uu / norm_wplus_sq + np.ones_like(uu)
        return CalibrationProblem(curvature=a.real, cross=b, offset=c.real)

    def cost(self, lam: np.ndarray) -> float:
        """Lambda-dependent cost: sum over (k, p) of the halved quadratics."""
        lam = np.asarray(lam, dtype=complex)
        terms = (
            self.curvature * np.abs(lam) ** 2
            - 2.0 * np.real(np.conj(lam) * self.cross)
            + self.offset
        )
        return 0.5 * float(np.sum(terms))


def gradient(state: CalibrationState, problem: CalibrationProblem) -> np.ndarray:
    """Conjugate-coordinate gradient g = A lambda - b per (k, p)."""
    return problem.curvature * state.lambda_ - problem.cross


def direction(grad: np.ndarray, state: CalibrationState) -> np.ndarray:
    """Polak-Ribiere(+) direction with steepest-descent resets.

    grad must already be in the effective shape for the state's mode
    ((K,) per frequency in joint mode, (K, P) otherwise).
    """
    if state.prev_gradient is None or state.prev_direction is None:
        return -grad
    g_prev = state.prev_gradient
    denom = np.abs(g_prev) ** 2
    pr = np.real(np.conj(grad) * (grad - g_prev))
    with np.errstate(divide="ignore", invalid="ignore"):
        beta_pr = np.where(denom > 0, np.maximum(0.0, pr / np.where(denom > 0, denom, 1.0)), 0.0)
    d = -grad + beta_pr * state.prev_direction
    # A conjugate direction must still descend; otherwise restart.
    non_descent = np.real(np.conj(d) * grad) >= 0.0
    d = np.where(non_descent, -grad, d)
    return d


def step_size(d: np.ndarray, grad: np.ndarray, curvature: np.ndarray) -> np.ndarray:
    """Exact minimizer of the quadratic cost along d.

    alpha = -<d, g> / (conj(d) H d); zero curvature along a nonzero
    direction means the quadratic is flat there, so alpha = 0 with a
    warning.
    """
    denom = curvature * np.abs(d) ** 2
    num = -np.conj(d) * grad
    alpha = np.zeros_like(d)
    flat = denom <= 0.0
    if np.any(flat & (np.abs(d) > 0)):
        warnings.warn("zero curvature along calibration search direction", stacklevel=2)
    ok = ~flat
    alpha[ok] = num[ok] / denom[ok]
    return alpha


def _effective(problem: CalibrationProblem, state: CalibrationState):
    """Gradient/curvature in the effective variable shape for the mode."""
    g = gradient(state, problem)
    h = problem.curvature
    if state.mode == "joint":
        # One lambda per frequency: coherently sum gradient and curvature over p.
        return np.sum(g, axis=1), np.sum(h, axis=1)
    return g, h


def update(
    state: CalibrationState, problem: CalibrationProblem, passes: int = 1
) -> CalibrationState:
    """Run one or more CGD passes on lambda; never increases the cost.

    The exact line search on a quadratic cannot ascend, but a rejection
    guard protects against numerical corner cases: a pass that would
    increase the lambda-cost is rolled back and the CGD memory cleared.
    """
    cur = state
    for _ in range(passes):
        g_eff, h_eff = _effective(problem, cur)
        if cur.domain == "real":
            # Constrained steepest descent along the real axis.
            g_eff = g_eff.real.astype(complex)
        d = direction(g_eff, cur)
        alpha = step_size(d, g_eff, h_eff)
        step = alpha * d
        if cur.mode == "joint":
            lam_new = cur.lambda_ + step[:, np.newaxis]
        else:
            lam_new = cur.lambda_ + step
        if cur.domain == "real":
            lam_new = lam_new.real.astype(complex)
        if problem.cost(lam_new) > problem.cost(cur.lambda_) + 1e-12:
            cur = replace(cur, prev_gradient=None, prev_direction=None)
            continue
        cur = CalibrationState(
            lambda_=lam_new,
            prev_gradient=g_eff,
            prev_direction=d,
            mode=cur.mode,
            domain=cur.domain,
        )
    return cur
