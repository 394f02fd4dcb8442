"""Similarity kernels over nodes.

Three channels feed the pairwise potential: a Gaussian kernel over text
embeddings and Gaussian-of-Jaccard kernels over user-set and group tokens.
All kernels are dense, symmetric, and have a zero diagonal so that pairwise
sums never include ``j == i``.

Construction is tiled over the upper triangle; each tile is mirrored into the
lower triangle, which keeps the result exactly symmetric.  Tiles can be
computed on a thread pool (numpy releases the GIL inside the heavy calls).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import sparse

from dcrf.core import ConfigurationError, as_feature_matrix

CHANNELS = ("text", "set", "group")
_TILE = 1024


@dataclass(frozen=True)
class KernelMatrix:
    """An N x N similarity matrix for one metadata channel."""

    values: np.ndarray
    tag: str
    theta: float

    def __post_init__(self):
        if self.tag not in CHANNELS:
            raise ConfigurationError(f"unknown kernel channel {self.tag!r}")
        # takes ownership of the array without copying: kernels can be ~700 MB
        s = np.asarray(self.values, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ConfigurationError(f"kernel must be square, got {s.shape}")
        s.setflags(write=False)
        object.__setattr__(self, "values", s)
        object.__setattr__(self, "theta", float(self.theta))
        check_kernel(s)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def check_kernel(s: np.ndarray) -> None:
    """Raise unless ``s`` is symmetric, zero-diagonal and valued in [0, 1]."""
    if np.any(np.diagonal(s) != 0.0):
        raise ConfigurationError("kernel diagonal must be exactly 0")
    if not np.all(np.isfinite(s)):
        raise ConfigurationError("kernel contains non-finite values")
    if s.min(initial=0.0) < 0.0 or s.max(initial=0.0) > 1.0:
        raise ConfigurationError("kernel values must lie in [0, 1]")
    n = s.shape[0]
    for start in range(0, n, _TILE):
        stop = min(start + _TILE, n)
        if not np.array_equal(s[start:stop], s[:, start:stop].T):
            raise ConfigurationError("kernel is not symmetric")


@dataclass(frozen=True)
class KernelSet:
    """The text, set and group kernels, in that order."""

    text: KernelMatrix
    set: KernelMatrix
    group: KernelMatrix

    def __post_init__(self):
        for tag, km in zip(CHANNELS, (self.text, self.set, self.group)):
            if km.tag != tag:
                raise ConfigurationError(f"expected a {tag!r} kernel, got {km.tag!r}")
        if not (self.text.n == self.set.n == self.group.n):
            raise ConfigurationError(
                f"kernel sizes disagree: {self.text.n}, {self.set.n}, {self.group.n}")

    def __iter__(self) -> Iterator[KernelMatrix]:
        return iter((self.text, self.set, self.group))

    @property
    def n(self) -> int:
        return self.text.n

    @property
    def thetas(self) -> tuple[float, float, float]:
        return (self.text.theta, self.set.theta, self.group.theta)

    @classmethod
    def from_arrays(cls, text, set_, group, thetas=(1.0, 1.0, 1.0)) -> "KernelSet":
        return cls(*(KernelMatrix(np.asarray(v, dtype=np.float64), tag, th)
                     for v, tag, th in zip((text, set_, group), CHANNELS, thetas)))

    def subset(self, index) -> "KernelSet":
        """Restrict every kernel to the nodes in ``index``."""
        idx = np.asarray(index)
        return KernelSet(*(KernelMatrix(km.values[np.ix_(idx, idx)], km.tag, km.theta)
                           for km in self))


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not np.isfinite(theta) or theta <= 0:
        raise ConfigurationError(f"bandwidth theta must be > 0, got {theta}")
    return theta


def _tiles(n: int) -> list[tuple[slice, slice]]:
    starts = range(0, n, _TILE)
    return [(slice(a, min(a + _TILE, n)), slice(b, min(b + _TILE, n)))
            for a in starts for b in starts if b >= a]


def _fill_symmetric(n: int, tile_fn, n_threads: int = 1) -> np.ndarray:
    """Build an N x N matrix from ``tile_fn(rows, cols)`` on upper tiles."""
    out = np.empty((n, n))

    def work(tile):
        r, c = tile
        block = tile_fn(r, c)
        out[r, c] = block
        if r != c:
            out[c, r] = block.T
        else:
            # diagonal tiles: force exact symmetry inside the tile
            upper = np.triu(block, 1)
            out[r, c] = upper + upper.T

    tiles = _tiles(n)
    if n_threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(work, tiles))
    else:
        for t in tiles:
            work(t)
    np.fill_diagonal(out, 0.0)
    return out


def squared_distances(embeddings, n_threads: int = 1) -> np.ndarray:
    """Pairwise squared Euclidean distances, exactly symmetric, zero diagonal."""
    x = as_feature_matrix(embeddings, "embeddings")
    sq = np.einsum("ij,ij->i", x, x)

    def tile(r, c):
        d = sq[r, None] + sq[None, c] - 2.0 * (x[r] @ x[c].T)
        return np.maximum(d, 0.0, out=d)

    return _fill_symmetric(x.shape[0], tile, n_threads)


def gaussian_from_sq_distances(sq_dists: np.ndarray, theta: float, tag: str) -> KernelMatrix:
    theta = _check_theta(theta)
    s = np.exp(sq_dists * (-0.5 / theta))
    np.fill_diagonal(s, 0.0)
    return KernelMatrix(s, tag, theta)


def gaussian_text_kernel(embeddings, theta: float, n_threads: int = 1) -> KernelMatrix:
    """``S[i, j] = exp(-|x_i - x_j|^2 / (2 theta))`` off the diagonal."""
    theta = _check_theta(theta)
    x = as_feature_matrix(embeddings, "embeddings")
    sq = np.einsum("ij,ij->i", x, x)
    scale = -0.5 / theta

    def tile(r, c):
        d = sq[r, None] + sq[None, c] - 2.0 * (x[r] @ x[c].T)
        np.maximum(d, 0.0, out=d)
        d *= scale
        return np.exp(d, out=d)

    return KernelMatrix(_fill_symmetric(x.shape[0], tile, n_threads), "text", theta)


def jaccard_distance(a: Iterable[str], b: Iterable[str]) -> float:
    """``1 - |a & b| / |a | b|``; two empty sets are at distance 1."""
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 1.0
    return 1.0 - len(a & b) / union


def _membership(sets: Sequence[Iterable[str]]) -> sparse.csr_matrix:
    vocab: dict[str, int] = {}
    rows, cols = [], []
    for i, tokens in enumerate(sets):
        for tok in set(tokens):
            rows.append(i)
            cols.append(vocab.setdefault(tok, len(vocab)))
    data = np.ones(len(rows))
    return sparse.csr_matrix((data, (rows, cols)), shape=(len(sets), max(len(vocab), 1)))


def jaccard_distances(sets: Sequence[Iterable[str]], n_threads: int = 1) -> np.ndarray:
    """Pairwise Jaccard distances via a sparse token-membership product."""
    if len(sets) < 1:
        raise ConfigurationError("need at least one token set")
    a = _membership(sets)
    at = a.T.tocsc()
    sizes = np.asarray(a.sum(axis=1)).ravel()

    def tile(r, c):
        inter = (a[r] @ at[:, c]).toarray()
        union = sizes[r, None] + sizes[None, c] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            d = 1.0 - inter / union
        d[union == 0] = 1.0
        return d

    return _fill_symmetric(len(sets), tile, n_threads)


def jaccard_from_distances(dists: np.ndarray, theta: float, tag: str) -> KernelMatrix:
    if tag not in ("set", "group"):
        raise ConfigurationError(f"Jaccard kernels are 'set' or 'group', got {tag!r}")
    theta = _check_theta(theta)
    s = np.square(dists)
    s *= -0.5 / theta
    np.exp(s, out=s)
    np.fill_diagonal(s, 0.0)
    return KernelMatrix(s, tag, theta)


def jaccard_kernel(sets: Sequence[Iterable[str]], theta: float, tag: str,
                   n_threads: int = 1) -> KernelMatrix:
    """``S[i, j] = exp(-d_J(t_i, t_j)^2 / (2 theta))`` off the diagonal."""
    if tag not in ("set", "group"):
        raise ConfigurationError(f"Jaccard kernels are 'set' or 'group', got {tag!r}")
    theta = _check_theta(theta)
    return jaccard_from_distances(jaccard_distances(sets, n_threads), theta, tag)


def sparsify_topk(kernel: KernelMatrix, k: int) -> KernelMatrix:
    """Keep each row's ``k`` largest off-diagonal entries, then symmetrise by max."""
    n = kernel.n
    if not (1 <= k < n):
        raise ConfigurationError(f"k must satisfy 1 <= k < N={n}, got {k}")
    s = kernel.values.copy()
    np.fill_diagonal(s, -np.inf)
    # stable sort so equal values keep the lower column index
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(s, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    kept = np.where(mask, kernel.values, 0.0)
    out = np.maximum(kept, kept.T)
    np.fill_diagonal(out, 0.0)
    return KernelMatrix(out, kernel.tag, kernel.theta)


def build_kernel_set(text_embeddings, set_tokens, group_tokens,
                     thetas: tuple[float, float, float], n_threads: int = 1) -> KernelSet:
    """Construct all three kernels for one bandwidth triple."""
    th_text, th_set, th_group = thetas
    return KernelSet(
        gaussian_text_kernel(text_embeddings, th_text, n_threads),
        jaccard_kernel(set_tokens, th_set, "set", n_threads),
        jaccard_kernel(group_tokens, th_group, "group", n_threads),
    )
