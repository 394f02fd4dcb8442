"""Core CRF types: parameters, unary potentials and assignment scores.

Every model here is binary: each node takes label state 0 or 1.  A
multi-category model is a list of independent :class:`CrfParams`, one per
category, sharing the same features and kernels.

Score convention
----------------
For a label assignment ``y`` the model assigns

    Score(y) = sum_i U[i, y_i] - sum_{i<j} mu_s[y_i, y_j] * W[i, j]

where ``W = sum_k w_k S_k`` is the weighted kernel sum and
``mu_s = (mu + mu.T) / 2``.  Because ``W`` is symmetric this equals half of
the ordered double sum ``sum_i sum_{j != i} mu[y_i, y_j] W[i, j]``.  The
mean-field update in :mod:`dcrf.meanfield` is the exact coordinate update of
this distribution, ``P(y) ∝ exp(Score(y))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from dcrf.kernels import KernelSet

N_STATES = 2
N_KERNELS = 3


class ConfigurationError(ValueError):
    """Raised for shape mismatches and out-of-range configuration values."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def as_feature_matrix(features, name: str = "features") -> np.ndarray:
    """Validate and return an N x D float64 feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ConfigurationError(f"{name} must have N >= 1 and D >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return x


@dataclass(frozen=True)
class CrfParams:
    """Learnable parameters of one binary CRF.

    Attributes
    ----------
    unary_weights : (2, D) array, one row per label state.
    unary_bias : (2,) array.
    kernel_weights : (3,) array, one scalar per kernel (text, set, group).
    compatibility : (2, 2) label compatibility table ``mu``.
    reg_lambda : L2 regularisation strength on ``unary_weights``.
    """

    unary_weights: np.ndarray
    unary_bias: np.ndarray
    kernel_weights: np.ndarray
    compatibility: np.ndarray
    reg_lambda: float = 0.0

    def __post_init__(self):
        wa = _frozen(self.unary_weights)
        if wa.ndim != 2 or wa.shape[0] != N_STATES:
            raise ConfigurationError(f"unary_weights must be 2 x D, got {wa.shape}")
        ba = _frozen(self.unary_bias)
        if ba.shape != (N_STATES,):
            raise ConfigurationError(f"unary_bias must have shape (2,), got {ba.shape}")
        wb = _frozen(self.kernel_weights)
        if wb.shape != (N_KERNELS,):
            raise ConfigurationError(f"kernel_weights must have shape (3,), got {wb.shape}")
        mu = _frozen(self.compatibility)
        if mu.shape != (N_STATES, N_STATES):
            raise ConfigurationError(f"compatibility must be 2 x 2, got {mu.shape}")
        for name, arr in (("unary_weights", wa), ("unary_bias", ba),
                          ("kernel_weights", wb), ("compatibility", mu)):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} contains non-finite values")
        lam = float(self.reg_lambda)
        if not np.isfinite(lam) or lam < 0:
            raise ConfigurationError(f"reg_lambda must be finite and >= 0, got {lam}")
        object.__setattr__(self, "unary_weights", wa)
        object.__setattr__(self, "unary_bias", ba)
        object.__setattr__(self, "kernel_weights", wb)
        object.__setattr__(self, "compatibility", mu)
        object.__setattr__(self, "reg_lambda", lam)

    @property
    def dim(self) -> int:
        return self.unary_weights.shape[1]

    @property
    def symmetric_compatibility(self) -> np.ndarray:
        return 0.5 * (self.compatibility + self.compatibility.T)

    @classmethod
    def zeros(cls, dim: int, reg_lambda: float = 0.0) -> "CrfParams":
        return cls(np.zeros((N_STATES, dim)), np.zeros(N_STATES),
                   np.zeros(N_KERNELS), np.zeros((N_STATES, N_STATES)), reg_lambda)

    def replace(self, **changes) -> "CrfParams":
        fields = dict(unary_weights=self.unary_weights, unary_bias=self.unary_bias,
                      kernel_weights=self.kernel_weights,
                      compatibility=self.compatibility, reg_lambda=self.reg_lambda)
        fields.update(changes)
        return CrfParams(**fields)

    def arrays(self) -> dict[str, np.ndarray]:
        """The learnable tensors by name (``reg_lambda`` excluded)."""
        return {
            "unary_weights": self.unary_weights,
            "unary_bias": self.unary_bias,
            "kernel_weights": self.kernel_weights,
            "compatibility": self.compatibility,
        }

    def equals(self, other: "CrfParams") -> bool:
        if not isinstance(other, CrfParams) or self.reg_lambda != other.reg_lambda:
            return False
        mine, theirs = self.arrays(), other.arrays()
        return all(np.array_equal(mine[k], theirs[k]) for k in mine)


def unary_potentials(features, params: CrfParams) -> np.ndarray:
    """Return the N x 2 unary score matrix ``U = X @ w_A.T + b_A``."""
    x = as_feature_matrix(features)
    if x.shape[1] != params.dim:
        raise ConfigurationError(
            f"feature dimension {x.shape[1]} does not match unary_weights "
            f"dimension {params.dim}")
    return x @ params.unary_weights.T + params.unary_bias


def combined_kernel(kernels: "KernelSet", kernel_weights) -> np.ndarray:
    """Dense ``sum_k w_k S_k``.  Allocates an N x N array."""
    w = np.asarray(kernel_weights, dtype=np.float64)
    out = np.zeros((kernels.n, kernels.n))
    for wk, km in zip(w, kernels):
        if wk != 0.0:
            out += wk * km.values
    return out


def _check_score_inputs(assign: np.ndarray, U, kernels: "KernelSet") -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != N_STATES:
        raise ConfigurationError(f"unary matrix must be N x 2, got {U.shape}")
    if assign.shape[-1] != U.shape[0] or kernels.n != U.shape[0]:
        raise ConfigurationError(
            f"node counts disagree: assignment {assign.shape[-1]}, unary {U.shape[0]}, "
            f"kernels {kernels.n}")
    if not np.all((assign == 0) | (assign == 1)):
        raise ConfigurationError("label assignments must contain only 0 and 1")
    return U


def assignment_scores(assignments, U, kernels: "KernelSet", params: CrfParams,
                      weighted_kernel: np.ndarray | None = None) -> np.ndarray:
    """Vectorised :func:`assignment_score` over an M x N batch of assignments.

    ``weighted_kernel`` may be passed to reuse a precomputed
    :func:`combined_kernel`.
    """
    y = np.atleast_2d(np.asarray(assignments))
    U = _check_score_inputs(y, U, kernels)
    yf = y.astype(np.float64)
    unary = U[:, 0].sum() + yf @ (U[:, 1] - U[:, 0])
    W = combined_kernel(kernels, params.kernel_weights) if weighted_kernel is None else weighted_kernel
    mu = params.compatibility
    off = 1.0 - yf
    wy, wn = yf @ W, off @ W
    # sum_{i != j} mu[y_i, y_j] W_ij, using the zero diagonal of W
    pair = (mu[0, 0] * np.einsum("mi,mi->m", off, wn)
            + mu[0, 1] * np.einsum("mi,mi->m", off, wy)
            + mu[1, 0] * np.einsum("mi,mi->m", yf, wn)
            + mu[1, 1] * np.einsum("mi,mi->m", yf, wy))
    return unary - 0.5 * pair


def assignment_score(assign, U, kernels: "KernelSet", params: CrfParams) -> float:
    """Log-potential of one label assignment; ``P(y) ∝ exp(score)``."""
    y = np.asarray(assign)
    if y.ndim != 1:
        raise ConfigurationError(f"assignment must be 1-D, got shape {y.shape}")
    return float(assignment_scores(y[None, :], U, kernels, params)[0])
