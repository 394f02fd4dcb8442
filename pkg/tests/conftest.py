import math

import numpy as np
import pytest

from dcrf.core import CrfParams
from dcrf.kernels import KernelSet


def rand_kernel(rng, n):
    s = np.triu(rng.uniform(0.0, 1.0, (n, n)), 1)
    return s + s.T


def rand_kernels(rng, n):
    return KernelSet.from_arrays(*(rand_kernel(rng, n) for _ in range(3)))


def rand_params(rng, dim=3, coupling=0.5, reg_lambda=0.0):
    return CrfParams(rng.normal(size=(2, dim)), rng.normal(size=2),
                     rng.uniform(-coupling, coupling, 3), rng.uniform(0.0, 1.0, (2, 2)),
                     reg_lambda)


def loop_score(assign, U, kernels, params):
    """Score by explicit loops: unary sum minus half the ordered pair sum."""
    n = len(assign)
    mats = [km.values for km in kernels]
    total = 0.0
    for i in range(n):
        total += U[i][assign[i]]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            w = 0.0
            for k in range(3):
                w += params.kernel_weights[k] * mats[k][i][j]
            total -= 0.5 * params.compatibility[assign[i]][assign[j]] * w
    return total


def loop_exact(U, kernels, params):
    """Exact marginals and log Z via itertools-free recursion over assignments."""
    n = len(U)
    scores, assigns = [], []
    for m in range(2 ** n):
        a = [(m >> i) & 1 for i in range(n)]
        assigns.append(a)
        scores.append(loop_score(a, U, kernels, params))
    top = max(scores)
    z = sum(math.exp(s - top) for s in scores)
    marg = np.zeros((n, 2))
    for a, s in zip(assigns, scores):
        p = math.exp(s - top) / z
        for i in range(n):
            marg[i][a[i]] += p
    return top + math.log(z), marg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
