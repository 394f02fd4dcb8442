"""Mean-field inference on the fully connected binary CRF.

One iteration is the recurrent cell

    Qt_k  = S_k @ Q                      message passing, per kernel
    C     = sum_k w_k Qt_k               kernel weighting (1x1 "convolution")
    H     = C @ mu_s.T                   compatibility transform
    Q_new = softmax(U - H)               unary addition + normalisation

with ``mu_s`` the symmetrised compatibility (see :mod:`dcrf.core` for why).
Parallel mode updates every row from the same incoming ``Q``; sequential mode
sweeps rows in index order and is exact coordinate descent on the variational
free energy, so the free energy never increases.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from dcrf.core import N_STATES, ConfigurationError, CrfParams, combined_kernel
from dcrf.kernels import KernelSet

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class MeanFieldConfig:
    max_iters: int = 5
    mode: Literal["parallel", "sequential"] = "parallel"
    damping: float = 0.0
    convergence_tol: float = 1e-6
    record_trajectory: bool = False

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ConfigurationError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.mode not in ("parallel", "sequential"):
            raise ConfigurationError(f"mode must be 'parallel' or 'sequential', got {self.mode!r}")
        if not (0.0 <= self.damping < 1.0):
            raise ConfigurationError(f"damping must lie in [0, 1), got {self.damping}")
        if self.convergence_tol < 0:
            raise ConfigurationError("convergence_tol must be >= 0")


@dataclass
class MeanFieldTrace:
    """Diagnostics of one :func:`run_inference` call.

    ``free_energies`` (only with ``record_trajectory``) starts with the value at
    the initial marginals, so it has ``iterations + 1`` entries.
    """

    deltas: list[float] = field(default_factory=list)
    free_energies: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def softmax_rows(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _check_unary(U, n: int | None = None) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != N_STATES:
        raise ConfigurationError(f"unary matrix must be N x 2, got {U.shape}")
    if n is not None and U.shape[0] != n:
        raise ConfigurationError(f"unary has {U.shape[0]} rows but kernels have N={n}")
    if not np.all(np.isfinite(U)):
        raise ConfigurationError("unary matrix contains non-finite values")
    return U


def init_marginals(U) -> np.ndarray:
    """Row-wise softmax of the unary scores."""
    return softmax_rows(_check_unary(U))


def message_pass(Q, kernels: KernelSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``S_k @ Q`` for each kernel; the zero diagonal excludes self-messages."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != (kernels.n, N_STATES):
        raise ConfigurationError(f"marginals shape {Q.shape} does not match N={kernels.n}")
    return tuple(km.values @ Q for km in kernels)


def combine_and_transform(q_tilde, params: CrfParams) -> np.ndarray:
    """Weight the per-kernel messages and apply the compatibility transform."""
    if len(q_tilde) != len(params.kernel_weights):
        raise ConfigurationError(f"expected {len(params.kernel_weights)} message matrices")
    shapes = {np.shape(q) for q in q_tilde}
    if len(shapes) != 1 or next(iter(shapes))[1:] != (N_STATES,):
        raise ConfigurationError(f"message matrices must share an N x 2 shape, got {shapes}")
    check = sum(w * np.asarray(q, dtype=np.float64)
                for w, q in zip(params.kernel_weights, q_tilde))
    return check @ params.symmetric_compatibility.T


def _weighted_messages(Q: np.ndarray, kernels: KernelSet, weights) -> np.ndarray:
    """``sum_k w_k S_k @ Q``, skipping zero-weight channels."""
    out = np.zeros_like(Q)
    for w, km in zip(weights, kernels):
        if w != 0.0:
            out += w * (km.values @ Q)
    return out


def mf_step(Q, U, kernels: KernelSet, params: CrfParams,
            config: MeanFieldConfig = MeanFieldConfig(),
            weighted_kernel: np.ndarray | None = None) -> np.ndarray:
    """One mean-field update, parallel or sequential, with optional damping.

    ``weighted_kernel`` (sequential mode only) reuses a precomputed
    ``sum_k w_k S_k`` across calls.
    """
    Q_in = np.asarray(Q, dtype=np.float64)
    U = _check_unary(U, kernels.n)
    if Q_in.shape != U.shape:
        raise ConfigurationError(f"marginals shape {Q_in.shape} != unary shape {U.shape}")
    mu_s = params.symmetric_compatibility
    if config.mode == "parallel":
        h = _weighted_messages(Q_in, kernels, params.kernel_weights) @ mu_s.T
        Q_new = softmax_rows(U - h)
        if config.damping > 0:
            Q_new = (1.0 - config.damping) * Q_new + config.damping * Q_in
        return Q_new

    W = combined_kernel(kernels, params.kernel_weights) if weighted_kernel is None else weighted_kernel
    Q_cur = Q_in.copy()
    d = config.damping
    for i in range(Q_cur.shape[0]):
        a = U[i] - mu_s @ (W[i] @ Q_cur)
        a -= a.max()
        q = np.exp(a)
        q /= q.sum()
        Q_cur[i] = (1.0 - d) * q + d * Q_cur[i] if d > 0 else q
    return Q_cur


def variational_free_energy(Q, U, kernels: KernelSet, params: CrfParams) -> float:
    """``-E_Q[Score] - H(Q)``; equals ``KL(Q || P) - log Z``."""
    Q = np.asarray(Q, dtype=np.float64)
    U = _check_unary(U, kernels.n)
    energy = -float(np.sum(Q * U))
    msgs = _weighted_messages(Q, kernels, params.kernel_weights)
    energy += 0.5 * float(np.sum(Q * (msgs @ params.compatibility.T)))
    neg_entropy = float(np.sum(Q * np.log(np.clip(Q, LOG_CLAMP, 1.0))))
    return energy + neg_entropy


def run_inference(U, kernels: KernelSet, params: CrfParams,
                  config: MeanFieldConfig = MeanFieldConfig()) -> tuple[np.ndarray, MeanFieldTrace]:
    """Initialise with ``softmax(U)`` and iterate :func:`mf_step`.

    Stops after ``config.max_iters`` steps or once the L-infinity change of
    ``Q`` drops below ``config.convergence_tol`` (0 disables early stopping).
    """
    U = _check_unary(U, kernels.n)
    Q = softmax_rows(U)
    trace = MeanFieldTrace()
    if config.record_trajectory:
        trace.free_energies.append(variational_free_energy(Q, U, kernels, params))
    W = None
    if config.mode == "sequential":
        W = combined_kernel(kernels, params.kernel_weights)
    for _ in range(config.max_iters):
        Q_next = mf_step(Q, U, kernels, params, config, weighted_kernel=W)
        delta = float(np.max(np.abs(Q_next - Q)))
        Q = Q_next
        trace.iterations += 1
        trace.deltas.append(delta)
        if config.record_trajectory:
            trace.free_energies.append(variational_free_energy(Q, U, kernels, params))
        if config.convergence_tol > 0 and delta < config.convergence_tol:
            trace.converged = True
            break
    return Q, trace
