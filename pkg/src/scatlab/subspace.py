"""Signal-subspace split of the receiver Green's operator.

The SVD G_S = U Sigma V* separates receiver space into a signal subspace
(leading singular triplets) and a noise subspace.  Projecting measured
scattered fields onto the signal subspace and back-propagating through
the leading right singular vectors yields the dominant current: the
minimum-norm current that reproduces the signal-subspace part of the
data.  The inversion uses it both as the initial current iterate and as
the normalizer of the state-mismatch term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError
from .forward import GreensOperators


@dataclass(frozen=True)
class CutoffRule:
    """How many singular values to keep.

    kind="ratio": keep every sigma_i with sigma_i / sigma_1 >= value.
    kind="fixed": keep exactly `value` leading singular values.
    """

    kind: str = "ratio"
    value: float = 1e-3

    def select(self, sigma: np.ndarray) -> int:
        if self.kind == "ratio":
            if sigma[0] <= 0:
                return 0
            return int(np.count_nonzero(sigma / sigma[0] >= self.value))
        if self.kind == "fixed":
            return int(min(self.value, sigma.size))
        raise ConfigurationError(f"unknown cutoff rule kind {self.kind!r}")


@dataclass(frozen=True)
class SubspaceDecomposition:
    """Per-frequency economy SVD of G_S with a retained-rank cutoff.

    u[k] is Q x r, sigma[k] is r (descending), v[k] is N x r with
    orthonormal columns, l_plus[k] the number of retained triplets.
    """

    u: tuple
    sigma: tuple
    v: tuple
    l_plus: tuple

    @property
    def n_freq(self) -> int:
        return len(self.sigma)


@dataclass(frozen=True)
class DominantCurrent:
    """Signal-subspace current per (k, p).

    coefficients[k] is (P, L+_k); w_plus is (K, P, N); norm_sq is the
    squared norm ||W+||^2 per (k, p), the state-term normalizer.
    """

    coefficients: tuple
    w_plus: np.ndarray
    norm_sq: np.ndarray


def decompose(
    operators: GreensOperators, cutoff_rule: Optional[CutoffRule] = None
) -> SubspaceDecomposition:
    """Full SVD of every per-frequency receiver operator.

    Raises
    ------
    ConfigurationError
        If the cutoff retains no singular values at some frequency.
    """
    rule = cutoff_rule or CutoffRule()
    us, sigmas, vs, ls = [], [], [], []
    for k, gs in enumerate(operators.g_sensor):
        u, s, vh = np.linalg.svd(gs, full_matrices=False)
        l_plus = rule.select(s)
        if l_plus < 1:
            raise ConfigurationError(
                f"cutoff rule retains no singular values at frequency index {k}"
            )
        for arr in (u, s, vh):
            arr.setflags(write=False)
        us.append(u)
        sigmas.append(s)
        vs.append(vh.conj().T)
        ls.append(l_plus)
    return SubspaceDecomposition(u=tuple(us), sigma=tuple(sigmas), v=tuple(vs), l_plus=tuple(ls))


def dominant_current(decomp: SubspaceDecomposition, e_s_meas: np.ndarray) -> DominantCurrent:
    """Back-project measured fields through the retained singular triplets.

    w+_i = (u_i* E_s) / sigma_i for i <= L+, W+ = V+ w+.

    Raises
    ------
    DataError
        If a retained singular value is zero (the cutoff rule must
        exclude the numerical null space).
    """
    e_s = np.asarray(e_s_meas, dtype=complex)
    K, P, Q = e_s.shape
    n = decomp.v[0].shape[0]
    coeffs = []
    w_plus = np.zeros((K, P, n), dtype=complex)
    norm_sq = np.zeros((K, P))
    for k in range(K):
        l = decomp.l_plus[k]
        sig = decomp.sigma[k][:l]
        if np.any(sig == 0.0):
            raise DataError("retained singular value is zero; fix the cutoff rule")
        # (P, L+): coefficients of the data in the leading left singular basis.
        c = (e_s[k] @ np.conj(decomp.u[k][:, :l])) / sig[np.newaxis, :]
        coeffs.append(c)
        w_plus[k] = c @ decomp.v[k][:, :l].T
        # Columns of V+ are orthonormal, so ||W+|| = ||w+||.
        norm_sq[k] = np.sum(np.abs(c) ** 2, axis=1)
    return DominantCurrent(coefficients=tuple(coeffs), w_plus=w_plus, norm_sq=norm_sq)
