"""Method-of-Moments forward problem for 2D TM scattering.

Discretizes the total-field integral equation on the imaging grid with
pulse basis functions and point collocation.  The scalar background
Green's function is

    g(r, r') = (1/4j) * H0^(2)(k0 |r - r'|)

for the exp(+j*omega*t) time convention (outgoing Hankel-2 waves).  The
induced-current unknown is the contrast source

    w(r) = chi(r) * E_total(r)        [V/m]

so the radiation constant j*omega*mu of the physical ampere current and
the source normalization j*omega*eps0 fold together into k0^2 inside the
discrete operators:

    E_d = G_D w,   E_s = G_S w,   G = k0^2 * integral_cell g(., r') dA'.

Off-diagonal entries use the midpoint rule (g at cell centers times cell
area); the singular self cell is integrated analytically over the
equal-area disk of radius a = cell_size / sqrt(pi):

    k0^2 * int_disk g dA = -j*(pi*k0*a/2)*H1^(2)(k0*a) - 1.

The state equation ties everything together: with calibration factor
lambda_c scaling the incident field,

    M[w] = w / chi - G_D w = lambda_c * E_inc

whose solution satisfies w = chi * (lambda_c * E_inc + G_D w).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist
from scipy.special import hankel2

from .domain import (
    ContrastMap,
    FrequencySet,
    ImagingGrid,
    SensorArray,
    validate_sensor_clearance,
)
from .errors import DomainError, GeometryError

# Cells with |chi| at or below this are treated as background (no current).
ACTIVE_EPS = 1e-12


@dataclass(frozen=True)
class GreensOperators:
    """Dense discrete radiation operators per frequency.

    g_domain[k] is the N x N operator mapping contrast sources on the grid
    to the scattered field on the grid (symmetric by reciprocity);
    g_sensor[k] is the Q x N operator mapping the same sources to the
    receiver ring.
    """

    grid: ImagingGrid
    sensors: SensorArray
    freqs: FrequencySet
    g_domain: tuple
    g_sensor: tuple

    @property
    def n_freq(self) -> int:
        return len(self.g_domain)


@dataclass
class FieldSet:
    """Stacked complex fields indexed by (frequency, transmitter).

    Shapes: e_inc_domain (K, P, N); e_inc_rx (K, P, Q) or None;
    e_scat_rx (K, P, Q) or None; e_domain (K, P, N) or None;
    current (K, P, N) or None.
    """

    e_inc_domain: np.ndarray
    e_inc_rx: Optional[np.ndarray] = None
    e_scat_rx: Optional[np.ndarray] = None
    e_domain: Optional[np.ndarray] = None
    current: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    relative_residual: float
    converged: bool


def greens_self_term(k0: float, cell_size: float) -> complex:
    """Analytic k0^2-scaled integral of g over the equal-area disk."""
    a = cell_size / np.sqrt(np.pi)
    return -0.5j * np.pi * k0 * a * hankel2(1, k0 * a) - 1.0


def build_greens(
    grid: ImagingGrid, sensors: SensorArray, freqs: FrequencySet
) -> GreensOperators:
    """Assemble dense Green's operators for every frequency.

    Raises
    ------
    GeometryError
        If any sensor lies inside the grid or two cell centers coincide.
    """
    validate_sensor_clearance(grid, sensors)
    centers = grid.cell_centers
    area = grid.cell_area

    dom_dist = cdist(centers, centers)
    off_diag = ~np.eye(grid.n_cells, dtype=bool)
    if np.any(dom_dist[off_diag] <= 0.0):
        raise GeometryError("coincident cell centers in imaging grid")
    rx_dist = cdist(sensors.rx_positions, centers)
    if np.any(rx_dist <= 0.0):
        raise GeometryError("receiver coincides with a grid cell center")

    g_domain = []
    g_sensor = []
    for k0 in freqs.k0:
        scale = k0 ** 2 * area / 4j
        gd = np.zeros_like(dom_dist, dtype=complex)
        gd[off_diag] = scale * hankel2(0, k0 * dom_dist[off_diag])
        np.fill_diagonal(gd, greens_self_term(k0, grid.cell_size))
        gd.setflags(write=False)
        gs = scale * hankel2(0, k0 * rx_dist)
        gs.setflags(write=False)
        g_domain.append(gd)
        g_sensor.append(gs)
    return GreensOperators(
        grid=grid,
        sensors=sensors,
        freqs=freqs,
        g_domain=tuple(g_domain),
        g_sensor=tuple(g_sensor),
    )


def incident_field(
    sensors: SensorArray,
    grid: ImagingGrid,
    freqs: FrequencySet,
    at_receivers: bool = True,
) -> FieldSet:
    """Line-source incident field (1/4j) H0^(2)(k0 |r - r_tx|) per (k, p)."""
    centers = grid.cell_centers
    tx_dom = cdist(sensors.tx_positions, centers)
    K, P = freqs.n_freq, sensors.n_tx
    e_dom = np.empty((K, P, grid.n_cells), dtype=complex)
    for k, k0 in enumerate(freqs.k0):
        e_dom[k] = hankel2(0, k0 * tx_dom) / 4j

    e_rx = None
    if at_receivers:
        tx_rx = cdist(sensors.tx_positions, sensors.rx_positions)
        if np.any(tx_rx <= grid.cell_size * 1e-9):
            raise GeometryError(
                "a receiver coincides with a transmitter; incident field at "
                "receivers is singular there"
            )
        e_rx = np.empty((K, P, sensors.n_rx), dtype=complex)
        for k, k0 in enumerate(freqs.k0):
            e_rx[k] = hankel2(0, k0 * tx_rx) / 4j
    return FieldSet(e_inc_domain=e_dom, e_inc_rx=e_rx)


def active_set(chi: np.ndarray) -> np.ndarray:
    """Indices of cells carrying current: |chi| above the background cutoff."""
    return np.flatnonzero(np.abs(chi) > ACTIVE_EPS)


def apply_state_operator(
    w: np.ndarray, chi: ContrastMap, g_domain: np.ndarray
) -> np.ndarray:
    """Evaluate M[w] = w/chi - G_D w cell-wise over the active set.

    Background cells (chi = 0) are excluded; they must carry no current.

    Raises
    ------
    DomainError
        If w is nonzero on a cell with chi = 0.
    """
    w = np.asarray(w, dtype=complex).reshape(-1)
    chi_v = chi.values
    act = active_set(chi_v)
    inactive = np.ones(chi_v.size, dtype=bool)
    inactive[act] = False
    if np.any(np.abs(w[inactive]) > 0.0):
        raise DomainError("current on a zero-contrast cell is outside the operator domain")
    out = np.zeros_like(w)
    out[act] = w[act] / chi_v[act] - g_domain[np.ix_(act, act)] @ w[act]
    return out


def assemble_state_matrix(chi: ContrastMap, g_domain: np.ndarray) -> tuple:
    """Dense M = diag(1/chi) - G_D restricted to the active set.

    Returns (matrix, active_indices); used by the direct solver and by
    equivalence checks against the iterative path.
    """
    act = active_set(chi.values)
    if act.size == 0:
        return np.zeros((0, 0), dtype=complex), act
    m = -g_domain[np.ix_(act, act)].copy()
    m[np.diag_indices(act.size)] += 1.0 / chi.values[act]
    return m, act


def _cgnr(apply_m, apply_mh, b, tol, max_iter):
    """Conjugate gradient on the normal equations; returns (x, report).

    Convergence is measured on the original residual ||M x - b|| / ||b||.
    """
    b_norm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return x, SolverReport(iterations=0, relative_residual=0.0, converged=True)
    r = b.copy()
    s = apply_mh(r)
    p = s.copy()
    gamma = np.vdot(s, s).real
    rel = 1.0
    for it in range(1, max_iter + 1):
        q = apply_m(p)
        qq = np.vdot(q, q).real
        if qq == 0.0:
            return x, SolverReport(iterations=it, relative_residual=rel, converged=False)
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        rel = np.linalg.norm(r) / b_norm
        if rel <= tol:
            return x, SolverReport(iterations=it, relative_residual=float(rel), converged=True)
        s = apply_mh(r)
        gamma_new = np.vdot(s, s).real
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, SolverReport(iterations=max_iter, relative_residual=float(rel), converged=False)


def forward_solve(
    chi: ContrastMap,
    lambda_c: complex,
    g_domain: np.ndarray,
    g_sensor: np.ndarray,
    e_inc: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 2000,
    method: str = "cgd",
) -> tuple:
    """Solve the state equation M[w] = lambda_c * E_inc for one (k, p).

    Parameters
    ----------
    method : {"cgd", "direct"}
        "cgd" iterates conjugate gradients on the normal equations of M
        restricted to the active set; "direct" factorizes the equivalent
        total-field system (I - G_D diag(chi)) E = lambda_c E_inc, which is
        exactly M written in the total field E = w / chi.

    Returns
    -------
    (w, e_scat_rx, report)
        Full-grid contrast source (zero on background cells), scattered
        field at the receivers G_S w, and a convergence report.

    Notes
    -----
    Scaling the calibration factor scales the solution linearly:
    forward_solve(chi, c * lambda_c) returns c * w and c * e_scat.
    A contrast with eps_r < 1 is unphysical for the lossless scenes here;
    it triggers a warning but is still solved.
    """
    chi_v = chi.values
    n = chi_v.size
    if np.real(chi_v).min() < -ACTIVE_EPS:
        import warnings

        warnings.warn("contrast implies eps_r < 1; solving anyway", stacklevel=2)

    w = np.zeros(n, dtype=complex)
    act = active_set(chi_v)
    if act.size == 0:
        return w, np.zeros(g_sensor.shape[0], dtype=complex), SolverReport(0, 0.0, True)

    b = lambda_c * np.asarray(e_inc, dtype=complex)[act]
    if method == "direct":
        a_mat = np.eye(n, dtype=complex) - g_domain * chi_v[np.newaxis, :]
        e_tot = scipy.linalg.solve(a_mat, lambda_c * np.asarray(e_inc, dtype=complex))
        w = chi_v * e_tot
        m_act, _ = assemble_state_matrix(chi, g_domain)
        resid = np.linalg.norm(m_act @ w[act] - b)
        b_norm = np.linalg.norm(b)
        rel = float(resid / b_norm) if b_norm > 0 else 0.0
        report = SolverReport(iterations=1, relative_residual=rel, converged=True)
        return w, g_sensor @ w, report
    if method != "cgd":
        raise ValueError(f"unknown solve method {method!r}")

    gd_act = g_domain[np.ix_(act, act)]
    inv_chi = 1.0 / chi_v[act]

    def apply_m(x):
        return inv_chi * x - gd_act @ x

    def apply_mh(y):
        # G_D is symmetric, so its conjugate transpose is its conjugate.
        return np.conj(inv_chi) * y - np.conj(gd_act) @ y

    w_act, report = _cgnr(apply_m, apply_mh, b, tol, max_iter)
    w[act] = w_act
    return w, g_sensor @ w, report


def radiate(w: np.ndarray, operators: GreensOperators, k: int, target: str) -> np.ndarray:
    """Radiate a current to the domain ("domain") or the receivers ("receivers")."""
    w = np.asarray(w, dtype=complex).reshape(-1)
    if target == "domain":
        return operators.g_domain[k] @ w
    if target == "receivers":
        return operators.g_sensor[k] @ w
    raise ValueError(f"unknown radiation target {target!r}")


def simulate_scattered_fields(
    chi: ContrastMap,
    operators: GreensOperators,
    e_inc_domain: np.ndarray,
    lambdas: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_iter: int = 2000,
    method: str = "cgd",
    on_report: Optional[Callable[[int, int, SolverReport], None]] = None,
) -> FieldSet:
    """Run the forward problem for every (frequency, transmitter) pair.

    lambdas is a (K, P) complex array of calibration scalings (default all
    ones).  With method="direct" the total-field matrix is factorized once
    per frequency and reused across transmitters.
    """
    K, P, n = e_inc_domain.shape
    if lambdas is None:
        lambdas = np.ones((K, P), dtype=complex)
    lambdas = np.asarray(lambdas, dtype=complex).reshape(K, P)
    chi_v = chi.values
    q = operators.sensors.n_rx

    w_all = np.zeros((K, P, n), dtype=complex)
    es_all = np.zeros((K, P, q), dtype=complex)
    ed_all = np.zeros((K, P, n), dtype=complex)
    for k in range(K):
        gd = operators.g_domain[k]
        gs = operators.g_sensor[k]
        if method == "direct" and np.any(np.abs(chi_v) > ACTIVE_EPS):
            a_mat = np.eye(n, dtype=complex) - gd * chi_v[np.newaxis, :]
            lu = scipy.linalg.lu_factor(a_mat)
            rhs = (lambdas[k][:, None] * e_inc_domain[k]).T
            e_tot = scipy.linalg.lu_solve(lu, rhs).T
            w_all[k] = chi_v[np.newaxis, :] * e_tot
            if on_report is not None:
                for p in range(P):
                    on_report(k, p, SolverReport(1, 0.0, True))
        else:
            for p in range(P):
                w_all[k, p], _, report = forward_solve(
                    chi, lambdas[k, p], gd, gs, e_inc_domain[k, p],
                    tol=tol, max_iter=max_iter, method=method,
                )
                if on_report is not None:
                    on_report(k, p, report)
        es_all[k] = w_all[k] @ gs.T
        ed_all[k] = w_all[k] @ gd.T
    return FieldSet(
        e_inc_domain=e_inc_domain,
        e_scat_rx=es_all,
        e_domain=ed_all,
        current=w_all,
    )
