"""Dense float64 array helpers used throughout the package.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The functions
here add the shape checks and the deterministic conventions (zero-norm cosine,
index tie-break in top-k, PCA sign fixing) that the rest of the code and the
tests rely on.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateInput, EmptyMask, ShapeMismatch

ZERO_NORM = 1e-12


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a float64 array (no copy when already float64)."""
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors.

    Returns 0.0 when either vector has norm below ``ZERO_NORM`` so that
    similarity is total over padded or empty feature rows.
    """
    u = as_tensor(u).ravel()
    v = as_tensor(v).ravel()
    if u.shape != v.shape:
        raise ShapeMismatch(f"cosine_similarity on lengths {u.size} and {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit norm; rows with norm < ``ZERO_NORM`` become zero."""
    x = as_tensor(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms < ZERO_NORM, 1.0, norms)
    out = x / safe
    out[norms[:, 0] < ZERO_NORM] = 0.0
    return out


def cosine_similarity_matrix(x, y=None) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``x`` and ``y``."""
    xn = normalize_rows(x)
    yn = xn if y is None else normalize_rows(y)
    return np.clip(xn @ yn.T, -1.0, 1.0)


def top_k(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores.

    Ordered by descending score; equal scores keep ascending index order.
    ``k`` larger than the input returns every index.
    """
    s = as_tensor(scores).ravel()
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-s, kind="stable")
    return order[: min(k, s.size)].tolist()


def masked_mse(a, b, mask) -> float:
    """Mean over active mask positions of the squared difference norm.

    ``mask`` indexes positions along the leading axes of ``a``; any trailing
    axes of ``a`` beyond ``mask.ndim`` are summed inside the norm. So for
    ``a`` of shape (H, W, C) with an (H, W) mask the result is
    ``sum_{(h,w) active} ||a[h,w]-b[h,w]||^2 / |M|``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    m = as_tensor(mask)
    if a.shape != b.shape:
        raise ShapeMismatch(f"masked_mse operands differ: {a.shape} vs {b.shape}")
    if m.ndim > a.ndim or a.shape[: m.ndim] != m.shape:
        raise ShapeMismatch(f"mask {m.shape} does not index leading axes of {a.shape}")
    active = m != 0
    count = int(active.sum())
    if count == 0:
        raise EmptyMask("mask has no active positions")
    diff = a[active] - b[active]
    return float(np.sum(diff * diff) / count)


def pca(rows, dims: int):
    """Principal component analysis by eigendecomposition of the covariance.

    Parameters
    ----------
    rows : array, shape (n, d)
        Observations in rows.
    dims : int
        Number of components kept, ``dims <= min(n, d)``.

    Returns
    -------
    components : array, shape (dims, d)
        Unit-norm principal axes, largest variance first. Each axis is
        sign-fixed so that its largest-magnitude entry is positive.
    projections : array, shape (n, dims)
        Centered rows projected on the components.
    explained_variance : array, shape (dims,)
        Covariance eigenvalues (denominator ``n - 1``), non-increasing.
    """
    x = as_tensor(rows)
    if x.ndim != 2:
        raise ShapeMismatch(f"pca expects rank-2 input, got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise DegenerateInput("pca needs at least 2 rows")
    if not 1 <= dims <= min(n, d):
        raise ShapeMismatch(f"dims={dims} outside [1, {min(n, d)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    if d <= n:
        cov = centered.T @ centered / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(-evals, kind="stable")
        evals = evals[order]
        comps = evecs[:, order].T
    else:
        # Gram trick: eigenvectors of X X^T map to those of X^T X.
        gram = centered @ centered.T / (n - 1)
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(-evals, kind="stable")
        evals = evals[order]
        comps = np.zeros((n, d))
        for i, j in enumerate(order):
            v = centered.T @ evecs[:, j]
            nv = np.linalg.norm(v)
            if nv > ZERO_NORM and evals[i] > ZERO_NORM:
                comps[i] = v / nv
        comps = _complete_orthonormal(comps)
    evals = np.clip(evals[:dims], 0.0, None)
    comps = comps[:dims].copy()
    for i in range(dims):
        pivot = np.argmax(np.abs(comps[i]))
        if comps[i, pivot] < 0:
            comps[i] = -comps[i]
    return comps, centered @ comps.T, evals


def _complete_orthonormal(comps: np.ndarray) -> np.ndarray:
    # Zero rows (null directions) are replaced by Gram-Schmidt on the
    # standard basis so every returned axis is unit norm.
    d = comps.shape[1]
    basis = [c for c in comps if np.linalg.norm(c) > 0.5]
    out = comps.copy()
    e = 0
    for i in range(out.shape[0]):
        if np.linalg.norm(out[i]) > 0.5:
            continue
        while e < d:
            v = np.zeros(d)
            v[e] = 1.0
            e += 1
            for b in basis:
                v -= np.dot(v, b) * b
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                out[i] = v / nv
                basis.append(out[i])
                break
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """Normwise relative error ``||a-b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
