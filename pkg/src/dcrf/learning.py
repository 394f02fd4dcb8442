"""Training: loss, gradients through unrolled mean-field, RMSProp, drivers.

Gradients are computed by hand-written reverse-mode accumulation over a fixed
number ``T`` of parallel mean-field steps (no early stopping while
differentiating).  Kernel bandwidths are never differentiated; they are picked
by :func:`grid_search_bandwidths`.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from dcrf.core import ConfigurationError, CrfParams, N_KERNELS, as_feature_matrix
from dcrf.dataio import DatasetBundle
from dcrf.kernels import (KernelSet, gaussian_from_sq_distances, jaccard_distances,
                          jaccard_from_distances, squared_distances)
from dcrf.meanfield import MeanFieldConfig, run_inference, softmax_rows
from dcrf.metrics import average_precision

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
HOLDOUT_FRACTION = 0.1


class NonFiniteGradientError(FloatingPointError):
    pass


class DegenerateCategoryWarning(UserWarning):
    """A category has no positive (or no negative) training nodes."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    epochs: int = 50
    unroll_T: int = 5
    reg_lambda: float = 0.1
    seed: int = 0
    transductive: bool = True
    damping: float = 0.0
    l2_squared: bool = True
    ranking_hinge: bool = False
    unary_only: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 < self.rmsprop_decay < 1:
            raise ConfigurationError("rmsprop_decay must lie in (0, 1)")
        if not self.rmsprop_epsilon > 0:
            raise ConfigurationError("rmsprop_epsilon must be > 0")
        if self.epochs < 0 or self.unroll_T < 1:
            raise ConfigurationError("epochs must be >= 0 and unroll_T >= 1")
        if self.reg_lambda < 0:
            raise ConfigurationError("reg_lambda must be >= 0")
        if not 0 <= self.damping < 1:
            raise ConfigurationError("damping must lie in [0, 1)")

    def inference_config(self) -> MeanFieldConfig:
        """Fixed-depth parallel inference matching the training graph."""
        return MeanFieldConfig(max_iters=self.unroll_T, mode="parallel",
                               damping=self.damping, convergence_tol=0.0)


@dataclass(frozen=True)
class LossBreakdown:
    weighted_bce: float
    ranking_pos: float
    ranking_neg: float
    l2_reg: float

    @property
    def total(self) -> float:
        return self.weighted_bce + self.ranking_pos + self.ranking_neg + self.l2_reg

    @property
    def data_loss(self) -> float:
        return self.total - self.l2_reg


@dataclass(frozen=True)
class GradientSet:
    unary_weights: np.ndarray
    unary_bias: np.ndarray
    kernel_weights: np.ndarray
    compatibility: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "unary_weights": self.unary_weights,
            "unary_bias": self.unary_bias,
            "kernel_weights": self.kernel_weights,
            "compatibility": self.compatibility,
        }


# -- loss ------------------------------------------------------------------

def _l2(params: CrfParams, squared: bool) -> tuple[float, np.ndarray]:
    wa = params.unary_weights
    lam = params.reg_lambda
    if squared:
        return lam * float(np.sum(wa * wa)), 2.0 * lam * wa
    norm = float(np.sqrt(np.sum(wa * wa)))
    grad = lam * wa / norm if norm > 0 else np.zeros_like(wa)
    return lam * norm, grad


def _loss_with_grad(Q, labels, mask, params: CrfParams, l2_squared: bool = True,
                    ranking_hinge: bool = False, warn: bool = True):
    """Loss breakdown plus dLoss/dQ (N x 2) and the regulariser's dLoss/dw_A."""
    Q = np.asarray(Q, dtype=np.float64)
    y = np.asarray(labels)
    m = np.asarray(mask, dtype=bool)
    if y.shape != (Q.shape[0],) or m.shape != (Q.shape[0],):
        raise ConfigurationError(
            f"labels {y.shape} and mask {m.shape} must both have length N={Q.shape[0]}")
    pos = m & (y == 1)
    neg = m & (y == 0)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if warn and (n_pos == 0 or n_neg == 0) and m.any():
        warnings.warn(f"degenerate category: {n_pos} positives, {n_neg} negatives in mask; "
                      f"dropping the empty class's loss terms", DegenerateCategoryWarning,
                      stacklevel=3)
    gQ = np.zeros_like(Q)
    q0 = np.clip(Q[:, 0], PROB_CLAMP, 1 - PROB_CLAMP)
    q1 = np.clip(Q[:, 1], PROB_CLAMP, 1 - PROB_CLAMP)
    inside0 = (Q[:, 0] > PROB_CLAMP) & (Q[:, 0] < 1 - PROB_CLAMP)
    inside1 = (Q[:, 1] > PROB_CLAMP) & (Q[:, 1] < 1 - PROB_CLAMP)
    bce = rank_pos = rank_neg = 0.0
    if n_pos:
        wp = 1.0 / n_pos
        bce += -wp * float(np.sum(np.log(q1[pos])))
        gQ[pos, 1] += np.where(inside1[pos], -wp / q1[pos], 0.0)
        margin = 1.0 - (Q[pos, 1] - Q[pos, 0])
        active = margin > 0 if ranking_hinge else np.ones_like(margin, dtype=bool)
        rank_pos = wp * float(np.sum(margin[active]))
        gQ[pos, 1] -= wp * active
        gQ[pos, 0] += wp * active
    if n_neg:
        wn = 1.0 / n_neg
        bce += -wn * float(np.sum(np.log(q0[neg])))
        gQ[neg, 0] += np.where(inside0[neg], -wn / q0[neg], 0.0)
        margin = 1.0 - (Q[neg, 0] - Q[neg, 1])
        active = margin > 0 if ranking_hinge else np.ones_like(margin, dtype=bool)
        rank_neg = wn * float(np.sum(margin[active]))
        gQ[neg, 0] -= wn * active
        gQ[neg, 1] += wn * active
    reg, g_reg = _l2(params, l2_squared)
    return LossBreakdown(bce, rank_pos, rank_neg, reg), gQ, g_reg


def dcrf_loss(Q, labels, mask, params: CrfParams, l2_squared: bool = True,
              ranking_hinge: bool = False) -> LossBreakdown:
    """Class-balanced cross entropy + ranking terms + L2 on the unary weights.

    Positives are weighted by ``1/N+`` and negatives by ``1/N-`` over the
    masked nodes.  With ``l2_squared=False`` the regulariser is ``lambda*|w_A|``
    instead of ``lambda*|w_A|^2``; ``ranking_hinge`` wraps each ranking term
    in ``max(0, .)``.
    """
    return _loss_with_grad(Q, labels, mask, params, l2_squared, ranking_hinge)[0]


# -- forward / backward ----------------------------------------------------

@dataclass
class _Tape:
    X: np.ndarray
    U: np.ndarray
    Q0: np.ndarray
    steps: list = field(default_factory=list)  # (Q_prev, messages, C, P)


def _forward(X, kernels: KernelSet, params: CrfParams, T: int, damping: float):
    U = X @ params.unary_weights.T + params.unary_bias
    Q = softmax_rows(U)
    tape = _Tape(X, U, Q)
    w = params.kernel_weights
    mu_s = params.symmetric_compatibility
    for _ in range(T):
        msgs = [km.values @ Q for km in kernels]
        C = w[0] * msgs[0] + w[1] * msgs[1] + w[2] * msgs[2]
        P = softmax_rows(U - C @ mu_s.T)
        Q_next = (1.0 - damping) * P + damping * Q if damping > 0 else P
        tape.steps.append((Q, msgs, C, P))
        Q = Q_next
    return Q, tape


def _softmax_backward(P: np.ndarray, g: np.ndarray) -> np.ndarray:
    return P * (g - np.sum(g * P, axis=1, keepdims=True))


def _backward(tape: _Tape, gQ: np.ndarray, kernels: KernelSet, params: CrfParams,
              damping: float) -> GradientSet:
    w = params.kernel_weights
    mu_s = params.symmetric_compatibility
    gU = np.zeros_like(tape.U)
    g_w = np.zeros(N_KERNELS)
    g_mu_s = np.zeros((2, 2))
    for Q_prev, msgs, C, P in reversed(tape.steps):
        gA = _softmax_backward(P, (1.0 - damping) * gQ)
        gU += gA
        gH = -gA
        g_mu_s += gH.T @ C
        gC = gH @ mu_s
        for k in range(N_KERNELS):
            g_w[k] += float(np.sum(gC * msgs[k]))
        g_prev = damping * gQ if damping > 0 else np.zeros_like(gQ)
        for k, km in enumerate(kernels):
            if w[k] != 0.0:
                g_prev += w[k] * (km.values.T @ gC)
        gQ = g_prev
    gU += _softmax_backward(tape.Q0, gQ)
    return GradientSet(
        unary_weights=gU.T @ tape.X,
        unary_bias=gU.sum(axis=0),
        kernel_weights=g_w,
        compatibility=0.5 * (g_mu_s + g_mu_s.T),
    )


def _check_finite(grads: GradientSet) -> None:
    for name, arr in grads.arrays().items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")


def forward_marginals(features, kernels: KernelSet, params: CrfParams,
                      config: TrainConfig) -> np.ndarray:
    """Marginals after exactly ``unroll_T`` parallel steps (the training graph)."""
    X = as_feature_matrix(features)
    return _forward(X, kernels, params, config.unroll_T, config.damping)[0]


def _loss_grad_q(features, kernels, labels, mask, params, config, warn=True):
    X = as_feature_matrix(features)
    if X.shape[0] != kernels.n:
        raise ConfigurationError(f"{X.shape[0]} feature rows but kernels have N={kernels.n}")
    if X.shape[1] != params.dim:
        raise ConfigurationError(
            f"feature dimension {X.shape[1]} does not match unary_weights dimension {params.dim}")
    Q, tape = _forward(X, kernels, params, config.unroll_T, config.damping)
    loss, gQ, g_reg = _loss_with_grad(Q, labels, mask, params, config.l2_squared,
                                      config.ranking_hinge, warn)
    grads = _backward(tape, gQ, kernels, params, config.damping)
    grads = replace(grads, unary_weights=grads.unary_weights + g_reg)
    _check_finite(grads)
    return loss, grads, Q


def loss_and_gradients(features, kernels: KernelSet, labels, mask, params: CrfParams,
                       config: TrainConfig) -> tuple[LossBreakdown, GradientSet]:
    """Total loss and its exact gradient w.r.t. every :class:`CrfParams` tensor."""
    loss, grads, _ = _loss_grad_q(features, kernels, labels, mask, params, config)
    return loss, grads


# -- optimiser -------------------------------------------------------------

def rmsprop_init(params: CrfParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays().items()}


def rmsprop_step(params: CrfParams, grads: GradientSet, state: dict[str, np.ndarray],
                 config: TrainConfig) -> tuple[CrfParams, dict[str, np.ndarray]]:
    rho, lr, eps = config.rmsprop_decay, config.learning_rate, config.rmsprop_epsilon
    new_state, updated = {}, {}
    g_all = grads.arrays()
    for name, value in params.arrays().items():
        g = g_all[name]
        acc = rho * state[name] + (1.0 - rho) * g * g
        new_state[name] = acc
        updated[name] = value - lr * g / (np.sqrt(acc) + eps)
    return params.replace(**updated), new_state


# -- per-category training -------------------------------------------------

def init_params(dim: int, config: TrainConfig, category_index: int = 0) -> CrfParams:
    """He fan-in init for w_A, zero bias, 0.1 kernel weights, Potts compatibility."""
    rng = np.random.default_rng([config.seed, category_index])
    wa = rng.normal(0.0, math.sqrt(2.0 / dim), size=(2, dim))
    wb = np.zeros(N_KERNELS) if config.unary_only else np.full(N_KERNELS, 0.1)
    return CrfParams(wa, np.zeros(2), wb, 1.0 - np.eye(2), config.reg_lambda)


def prior_params(dim: int, labels, mask, reg_lambda: float) -> CrfParams:
    """A unary-only model that predicts the (add-one smoothed) class prior."""
    y = np.asarray(labels)[np.asarray(mask, dtype=bool)]
    p1 = (y.sum() + 1.0) / (y.size + 2.0)
    bias = np.log([1.0 - p1, p1])
    return CrfParams(np.zeros((2, dim)), bias, np.zeros(N_KERNELS), 1.0 - np.eye(2), reg_lambda)


def split_masks(bundle: DatasetBundle) -> tuple[np.ndarray, np.ndarray]:
    """Training and validation masks over labeled nodes.

    Without a validation split, the last 10% of training nodes (by index) are
    held out instead.
    """
    train = bundle.split_mask("train") & bundle.labeled
    val = bundle.split_mask("validation") & bundle.labeled
    if not val.any():
        idx = np.flatnonzero(train)
        n_hold = int(math.floor(len(idx) * HOLDOUT_FRACTION))
        if n_hold > 0:
            held = idx[len(idx) - n_hold:]
            train = train.copy()
            train[held] = False
            val = np.zeros_like(train)
            val[held] = True
    return train, val


@dataclass
class TrainResult:
    params: CrfParams
    best_epoch: int
    train_losses: list[float]
    val_losses: list[float]
    degenerate: bool = False

    @property
    def final_train_loss(self) -> float:
        return self.train_losses[-1] if self.train_losses else math.nan

    @property
    def final_val_loss(self) -> float:
        return self.val_losses[-1] if self.val_losses else math.nan


def train_category(bundle: DatasetBundle, kernels: KernelSet, category_index: int,
                   config: TrainConfig) -> TrainResult:
    """Full-batch RMSProp training of one category's binary CRF.

    Returns the parameters with the lowest validation data loss (cross
    entropy + ranking, regulariser excluded) seen over all evaluated epochs,
    or the final parameters when there is no validation split.
    """
    if not 0 <= category_index < bundle.n_categories:
        raise ConfigurationError(f"category index {category_index} out of range")
    if kernels.n != bundle.n:
        raise ConfigurationError(f"kernels cover {kernels.n} nodes, dataset has {bundle.n}")
    X = bundle.image_features
    y = bundle.labels[:, category_index].astype(np.int64)
    train, val = split_masks(bundle)
    n_pos = int(y[train].sum())
    if n_pos == 0 or n_pos == int(train.sum()):
        warnings.warn(f"category {bundle.categories[category_index]!r} has {n_pos} positives "
                      f"among {int(train.sum())} training nodes; returning a prior-only model",
                      DegenerateCategoryWarning, stacklevel=2)
        return TrainResult(prior_params(X.shape[1], y, train, config.reg_lambda), 0, [], [], True)

    if config.transductive:
        tr_X, tr_K, tr_y, tr_mask = X, kernels, y, train
        val_graph = None
    else:
        nodes = np.flatnonzero(train)
        tr_X, tr_K, tr_y, tr_mask = X[nodes], kernels.subset(nodes), y[nodes], np.ones(len(nodes), bool)
        val_nodes = np.flatnonzero(train | val)
        val_graph = (X[val_nodes], kernels.subset(val_nodes), y[val_nodes], val[val_nodes])

    def val_loss(p: CrfParams, Q_full=None) -> float:
        if not val.any():
            return math.nan
        if val_graph is None:
            Q = Q_full if Q_full is not None else forward_marginals(X, kernels, p, config)
            return _loss_with_grad(Q, y, val, p, config.l2_squared, config.ranking_hinge,
                                   warn=False)[0].data_loss
        vX, vK, vy, vm = val_graph
        Q = forward_marginals(vX, vK, p, config)
        return _loss_with_grad(Q, vy, vm, p, config.l2_squared, config.ranking_hinge,
                               warn=False)[0].data_loss

    params = init_params(X.shape[1], config, category_index)
    state = rmsprop_init(params)
    best, best_epoch, best_val = params, 0, math.inf
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(config.epochs + 1):
        if epoch < config.epochs:
            loss, grads, Q = _loss_grad_q(tr_X, tr_K, tr_y, tr_mask, params, config)
            train_losses.append(loss.total)
            v = val_loss(params, Q if config.transductive else None)
        else:
            Q = forward_marginals(tr_X, tr_K, params, config)
            train_losses.append(_loss_with_grad(Q, tr_y, tr_mask, params, config.l2_squared,
                                                config.ranking_hinge, warn=False)[0].total)
            v = val_loss(params, Q if config.transductive else None)
        val_losses.append(v)
        if not math.isnan(v) and v < best_val:
            best, best_epoch, best_val = params, epoch, v
        if epoch == config.epochs:
            break
        if config.unary_only:
            grads = replace(grads, kernel_weights=np.zeros(N_KERNELS),
                            compatibility=np.zeros((2, 2)))
        params, state = rmsprop_step(params, grads, state, config)
    if math.isinf(best_val):
        best, best_epoch = params, config.epochs
    log.debug("category %d: best epoch %d, val loss %.6g", category_index, best_epoch, best_val)
    return TrainResult(best, best_epoch, train_losses, val_losses)


def train_all(bundle: DatasetBundle, kernels: KernelSet, config: TrainConfig) -> list[TrainResult]:
    """One independent model per category."""
    return [train_category(bundle, kernels, c, config) for c in range(bundle.n_categories)]


# -- prediction ------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    marginals: np.ndarray  # N x C, probability of label 1
    labels: np.ndarray     # N x C, 0/1


def predict(features, kernels: KernelSet, params_per_category: Sequence[CrfParams],
            config: MeanFieldConfig, n_categories: int | None = None) -> Prediction:
    """Run inference per category; label is ``Q_i(1) >= 0.5``."""
    X = as_feature_matrix(features)
    if n_categories is not None and len(params_per_category) != n_categories:
        raise ConfigurationError(
            f"model has {len(params_per_category)} categories, expected {n_categories}")
    if not params_per_category:
        raise ConfigurationError("no category parameters supplied")
    cols = []
    for p in params_per_category:
        if p.dim != X.shape[1]:
            raise ConfigurationError(
                f"model feature dimension {p.dim} does not match data dimension {X.shape[1]}")
        U = X @ p.unary_weights.T + p.unary_bias
        Q, _ = run_inference(U, kernels, p, config)
        cols.append(Q[:, 1])
    marg = np.column_stack(cols)
    return Prediction(marg, (marg >= 0.5).astype(np.int8))


# -- bandwidth grid search -------------------------------------------------

@dataclass(frozen=True)
class BandwidthGrid:
    text: tuple[float, ...]
    set: tuple[float, ...]
    group: tuple[float, ...]
    metric: Literal["macro_ap", "loss"] = "macro_ap"

    def __post_init__(self):
        for name in ("text", "set", "group"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values:
                raise ConfigurationError(f"empty {name} bandwidth grid")
            if any(not (v > 0 and math.isfinite(v)) for v in values):
                raise ConfigurationError(f"{name} bandwidths must be > 0")
            object.__setattr__(self, name, values)
        if self.metric not in ("macro_ap", "loss"):
            raise ConfigurationError(f"unknown selection metric {self.metric!r}")

    def candidates(self) -> list[tuple[float, float, float]]:
        return list(itertools.product(self.text, self.set, self.group))


@dataclass
class GridSearchResult:
    best: tuple[float, float, float]
    evaluations: list[tuple[tuple[float, float, float], float]]


class KernelCache:
    """Pairwise distances for one dataset, reused across bandwidth triples."""

    def __init__(self, bundle: DatasetBundle, n_threads: int = 1):
        self.text_sq = squared_distances(bundle.text_embeddings, n_threads)
        self.set_d = jaccard_distances(bundle.sets, n_threads)
        self.group_d = jaccard_distances(bundle.groups, n_threads)

    def kernels(self, thetas: tuple[float, float, float]) -> KernelSet:
        th_text, th_set, th_group = thetas
        return KernelSet(gaussian_from_sq_distances(self.text_sq, th_text, "text"),
                         jaccard_from_distances(self.set_d, th_set, "set"),
                         jaccard_from_distances(self.group_d, th_group, "group"))


def validation_score(bundle: DatasetBundle, kernels: KernelSet, results: Sequence[TrainResult],
                     config: TrainConfig, metric: str) -> float:
    """Higher is better: validation macro-AP, or minus the mean validation loss."""
    _, val = split_masks(bundle)
    if metric == "loss":
        losses = []
        for c, r in enumerate(results):
            Q = forward_marginals(bundle.image_features, kernels, r.params, config)
            y = bundle.labels[:, c]
            losses.append(_loss_with_grad(Q, y, val, r.params, config.l2_squared,
                                          config.ranking_hinge, warn=False)[0].data_loss)
        return -float(np.mean(losses))
    pred = predict(bundle.image_features, kernels, [r.params for r in results],
                   config.inference_config())
    aps = [average_precision(pred.marginals[val, c], bundle.labels[val, c])
           for c in range(bundle.n_categories)]
    aps = [a for a in aps if not math.isnan(a)]
    return float(np.mean(aps)) if aps else math.nan


def grid_search_bandwidths(bundle: DatasetBundle, grid: BandwidthGrid, config: TrainConfig,
                           n_threads: int = 1, cache: KernelCache | None = None) -> GridSearchResult:
    """Exhaustive search over (theta_text, theta_set, theta_group).

    Iterates text outermost and group innermost; the first candidate with the
    best validation score wins ties.  A single-candidate grid is returned
    without training.
    """
    candidates = grid.candidates()
    if len(candidates) == 1:
        return GridSearchResult(candidates[0], [])
    _, val = split_masks(bundle)
    if not val.any():
        raise ConfigurationError("grid search needs validation nodes")
    cache = cache or KernelCache(bundle, n_threads)
    evaluations = []
    best, best_score = None, -math.inf
    for thetas in candidates:
        kernels = cache.kernels(thetas)
        results = train_all(bundle, kernels, config)
        score = validation_score(bundle, kernels, results, config, grid.metric)
        evaluations.append((thetas, score))
        log.info("grid candidate %s: %s = %.6g", thetas, grid.metric, score)
        if score > best_score:
            best, best_score = thetas, score
    if best is None:
        best = candidates[0]
    return GridSearchResult(best, evaluations)
