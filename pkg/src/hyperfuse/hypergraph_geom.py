"""Cross-view hypergraph consistency loss.

Every latent pixel of every view is a node. Each node spawns one hyperedge
made of its ``k`` most cosine-similar nodes (itself included when rows are
distinct), a fixed-weight hypergraph network propagates features over that
structure, and the loss is a masked squared distance between the propagated
features of a reference and a predicted latent stack.

Propagation in one layer, for node ``v`` with incident hyperedges ``E(v)``::

    h_v' = act( (1/|E(v)|) * sum_{e in E(v)} mean_{u in e} h_u  @ W )

which is ``act(P @ X @ W)`` with ``P = Dv^-1 H De^-1 H^T`` for the node-by-edge
incidence matrix ``H``. The hypergraph structure is discrete, so gradients
treat it as constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .diffusion_toy import (
    Denoiser,
    NoiseSchedule,
    add_noise,
    ism_loss_and_grad,
)
from .errors import DegenerateInput, DivergenceDetected, EmptyMask, IndivisibleShape, ShapeMismatch
from .synthdata import ToyEncoder, toy_decode, toy_encode
from .tensor_core import as_tensor, normalize_rows

ACTIVATIONS = ("relu", "identity")
DEFAULT_K = 8
DEFAULT_S_MIN = 0.15
DEFAULT_V_MAX = 0.85
DEFAULT_LAMBDA_ISM = 1.0
DEFAULT_LAMBDA_MVHG = 0.1


@dataclass(frozen=True)
class MultiViewLatents:
    views: np.ndarray
    view_labels: tuple = ()

    def __post_init__(self):
        v = as_tensor(self.views)
        if v.ndim != 4 or v.shape[0] < 1:
            raise ShapeMismatch(f"expected (N, H, W, C) views, got {v.shape}")
        labels = tuple(self.view_labels) or tuple(f"view{i}" for i in range(v.shape[0]))
        if len(labels) != v.shape[0]:
            raise ShapeMismatch("one label per view required")
        object.__setattr__(self, "views", v)
        object.__setattr__(self, "view_labels", labels)

    @property
    def shape(self):
        return self.views.shape


def _views(z) -> np.ndarray:
    if isinstance(z, MultiViewLatents):
        return z.views
    z = as_tensor(z)
    if z.ndim == 3:
        z = z[None]
    if z.ndim != 4:
        raise ShapeMismatch(f"expected (N, H, W, C) latents, got {z.shape}")
    return z


def build_node_features(latents) -> np.ndarray:
    """Concatenate flattened views into an (N*H*W, C) matrix, view-major then scanline."""
    z = _views(latents)
    n, h, w, c = z.shape
    return z.reshape(n * h * w, c)


@dataclass(frozen=True)
class Hypergraph:
    """Hyperedge ``e_i`` is row ``members[i]``, ordered by descending similarity.

    Rows produced by :func:`build_hypergraph` all hold ``min(k, n)`` members;
    hand-built hypergraphs may pad shorter rows with ``-1``.
    """

    n_nodes: int
    members: np.ndarray
    k: int

    @classmethod
    def from_hyperedges(cls, n_nodes: int, edges) -> "Hypergraph":
        edges = [sorted(set(int(v) for v in e)) for e in edges]
        if any(not e for e in edges):
            raise DegenerateInput("hyperedges must be nonempty")
        if any(v < 0 or v >= n_nodes for e in edges for v in e):
            raise ValueError("hyperedge member out of range")
        width = max((len(e) for e in edges), default=0)
        members = np.full((len(edges), width), -1, dtype=np.int64)
        for i, e in enumerate(edges):
            members[i, : len(e)] = e
        members.flags.writeable = False
        return cls(n_nodes, members, width)

    @property
    def hyperedges(self) -> list[frozenset]:
        return [frozenset(v for v in row.tolist() if v >= 0) for row in self.members]

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        n_edges, size = self.members.shape
        cols = np.repeat(np.arange(n_edges), size)
        rows = self.members.ravel()
        keep = rows >= 0
        return sp.csr_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])), shape=(self.n_nodes, n_edges))

    @cached_property
    def node_degree(self) -> np.ndarray:
        """``|E(v)|``: number of hyperedges containing each node."""
        return np.asarray(self.incidence.sum(axis=1)).ravel()

    @cached_property
    def propagation(self) -> sp.csr_matrix:
        inc = self.incidence
        deg = self.node_degree
        # a node contained in no hyperedge (possible only under ties or zero rows)
        # receives an empty sum
        inv_dv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        inv_de = 1.0 / np.asarray(inc.sum(axis=0)).ravel()
        return (sp.diags(inv_dv) @ inc @ sp.diags(inv_de) @ inc.T).tocsr()


def _row_top_k(s: np.ndarray, k: int) -> np.ndarray:
    n = s.size
    if k >= n:
        return np.argsort(-s, kind="stable")
    cand = np.argpartition(-s, k - 1)[:k]
    thr = s[cand].min()
    above = np.flatnonzero(s > thr)
    tied = np.flatnonzero(s == thr)[: k - above.size]
    chosen = np.concatenate([above, tied])
    return chosen[np.lexsort((chosen, -s[chosen]))]


def build_hypergraph(features, k: int = DEFAULT_K, block: int = 1024) -> Hypergraph:
    """Top-``k`` cosine-similarity hyperedge for every node.

    Ties are broken by ascending node index, matching :func:`tensor_core.top_k`.
    Similarities are computed in row blocks of size ``block`` so memory stays
    O(block * n).
    """
    f = as_tensor(features)
    if f.ndim != 2:
        raise ShapeMismatch(f"node features must be rank 2, got {f.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = f.shape[0]
    size = min(k, n)
    unit = normalize_rows(f)
    members = np.empty((n, size), dtype=np.int64)
    for start in range(0, n, block):
        sims = np.clip(unit[start : start + block] @ unit.T, -1.0, 1.0)
        for r, row in enumerate(sims):
            members[start + r] = _row_top_k(row, size)
    members.flags.writeable = False
    return Hypergraph(n, members, k)


@dataclass(frozen=True)
class HgnnParams:
    layers: tuple
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        layers = tuple(as_tensor(w) for w in self.layers)
        for a, b in zip(layers, layers[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeMismatch(f"layer dims do not chain: {a.shape} -> {b.shape}")
        if any(not np.all(np.isfinite(w)) for w in layers):
            raise ValueError("HGNN weights must be finite")
        object.__setattr__(self, "layers", layers)

    @property
    def dims(self) -> list[int]:
        if not self.layers:
            return []
        return [self.layers[0].shape[0]] + [w.shape[1] for w in self.layers]


def make_hgnn_params(
    in_dim: int, n_layers: int = 2, hidden: int | None = None, activation: str = "relu", seed: int = 0
) -> HgnnParams:
    """Seeded fixed weights; every layer is ``hidden`` wide (default ``in_dim``)."""
    hidden = in_dim if hidden is None else hidden
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden] * n_layers
    layers = tuple(rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(dims, dims[1:]))
    return HgnnParams(layers, activation, seed)


def _act(a, activation):
    return np.maximum(a, 0.0) if activation == "relu" else a


def hgnn_layer(h: Hypergraph, x, w, activation: str = "relu") -> np.ndarray:
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 2 or x.shape[0] != h.n_nodes:
        raise ShapeMismatch(f"features {x.shape} do not match {h.n_nodes} nodes")
    if w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"weight {w.shape} does not accept {x.shape[1]} channels")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    return _act(h.propagation @ x @ w, activation)


def _forward_cached(h: Hypergraph, x, p: HgnnParams):
    x = as_tensor(x)
    if p.layers and x.shape[1] != p.layers[0].shape[0]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, first layer expects {p.layers[0].shape[0]}")
    pre = []
    for w in p.layers:
        a = h.propagation @ x @ w
        pre.append(a)
        x = _act(a, p.activation)
    return x, pre


def hgnn_forward(h: Hypergraph, features, p: HgnnParams) -> np.ndarray:
    return _forward_cached(h, features, p)[0]


def _backward(h: Hypergraph, pre, p: HgnnParams, grad_out):
    g = grad_out
    pt = h.propagation.T.tocsr()
    for w, a in zip(reversed(p.layers), reversed(pre)):
        if p.activation == "relu":
            g = g * (a > 0)
        g = pt @ (g @ w.T)
    return g


def hsv_mask(image, s_min: float = DEFAULT_S_MIN, v_max: float = DEFAULT_V_MAX) -> np.ndarray:
    """Foreground-on-white mask: active where saturation > ``s_min`` or value < ``v_max``."""
    img = as_tensor(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected an RGB image, got shape {img.shape}")
    v = img.max(axis=2)
    c = v - img.min(axis=2)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    return ((s > s_min) | (v < v_max)).astype(np.float64)


def downsample_mask(mask, target) -> np.ndarray:
    """Block-max pooling of an image mask onto an (H, W) latent grid."""
    m = as_tensor(mask)
    th, tw = target
    hi, wi = m.shape
    if hi < th or wi < tw or hi % th or wi % tw:
        raise IndivisibleShape(f"mask {hi}x{wi} cannot be pooled onto {th}x{tw}")
    blocks = m.reshape(th, hi // th, tw, wi // tw)
    return (blocks != 0).any(axis=(1, 3)).astype(np.float64)


class MvhgStructure(NamedTuple):
    reference: Hypergraph
    predicted: Hypergraph


def build_structures(z, z_pred, k: int = DEFAULT_K) -> MvhgStructure:
    return MvhgStructure(
        build_hypergraph(build_node_features(z), k),
        build_hypergraph(build_node_features(z_pred), k),
    )


def _node_mask(masks, shape):
    m = as_tensor(masks)
    if m.shape != shape[:3]:
        raise ShapeMismatch(f"masks {m.shape} do not match latents {shape[:3]}")
    return (m != 0).reshape(-1)


def mvhg_loss(z, z_pred, masks, masks_pred, p: HgnnParams, k: int = DEFAULT_K, structure=None):
    """Masked hypergraph-feature distance and its gradient w.r.t. ``z_pred``.

    Parameters
    ----------
    z, z_pred : (N, H, W, C) arrays or :class:`MultiViewLatents`
    masks, masks_pred : (N, H, W) binary arrays
        Node ``(i, h, w)`` is active in a branch iff its view mask is.
    p : HgnnParams
        Shared by both branches.
    structure : MvhgStructure, optional
        Hypergraphs to use instead of building them from ``z`` and ``z_pred``.

    Returns
    -------
    loss : float
        ``sum_v ||m_v F_z[v] - m'_v F_pred[v]||^2 / |M|`` with ``|M|`` the number
        of nodes active in either mask.
    grad : ndarray shaped like ``z_pred``
    """
    zv = _views(z)
    pv = _views(z_pred)
    if zv.shape != pv.shape:
        raise ShapeMismatch(f"branches differ: {zv.shape} vs {pv.shape}")
    m = _node_mask(masks, zv.shape)
    mh = _node_mask(masks_pred, pv.shape)
    count = int(np.count_nonzero(m | mh))
    if count == 0:
        raise EmptyMask("no node is active in either mask")
    if structure is None:
        structure = build_structures(zv, pv, k)
    fz, _ = _forward_cached(structure.reference, build_node_features(zv), p)
    fp, pre = _forward_cached(structure.predicted, build_node_features(pv), p)
    diff = fz * m[:, None] - fp * mh[:, None]
    loss = float(np.sum(diff * diff) / count)
    grad_out = -2.0 * diff * mh[:, None] / count
    grad = _backward(structure.predicted, pre, p, grad_out)
    return loss, grad.reshape(pv.shape)


def total_loss(l_ism: float, l_mvhg: float, lambda_ism: float = DEFAULT_LAMBDA_ISM,
               lambda_mvhg: float = DEFAULT_LAMBDA_MVHG) -> float:
    if lambda_ism < 0 or lambda_mvhg < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_ism * l_ism + lambda_mvhg * l_mvhg


def predict_clean(z_noisy, eps_hat, t: int, sched: NoiseSchedule, mode: str = "literal") -> np.ndarray:
    """Clean-latent estimate from a noisy latent and a noise prediction.

    ``literal`` subtracts the prediction outright; ``scaled`` is the usual
    reconstruction ``(z_noisy - sqrt(1 - a_t) eps_hat) / sqrt(a_t)``.
    """
    if mode == "literal":
        return z_noisy - eps_hat
    if mode == "scaled":
        ab = sched.alpha_bar[sched.check_step(t)]
        return (z_noisy - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    raise ValueError(f"unknown prediction mode {mode!r}")


def image_masks(images, latent_hw, s_min=DEFAULT_S_MIN, v_max=DEFAULT_V_MAX) -> np.ndarray:
    return np.stack([downsample_mask(hsv_mask(img, s_min, v_max), latent_hw) for img in images])


def mvhg_pipeline(
    images,
    cond,
    den: Denoiser,
    sched: NoiseSchedule,
    enc: ToyEncoder,
    p: HgnnParams,
    k: int = DEFAULT_K,
    t: int = 100,
    seed: int = 0,
    *,
    mode: str = "literal",
    pred_mask_source: str = "decoded",
    eps=None,
    s_min: float = DEFAULT_S_MIN,
    v_max: float = DEFAULT_V_MAX,
):
    """Encode, noise, denoise and score one multi-view image batch.

    Returns ``(loss, diagnostics)``. ``pred_mask_source`` is ``decoded``
    (masks from the decoded prediction) or ``input`` (reuse the input masks).
    ``eps`` overrides the seeded noise draw.
    """
    z = np.stack([toy_encode(img, enc) for img in images])
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(z.shape)
    z_noisy = add_noise(z, t, eps, sched)
    eps_hat = den.predict(z_noisy, t, cond)
    z_pred = predict_clean(z_noisy, eps_hat, t, sched, mode)
    hw = z.shape[1:3]
    masks = image_masks(images, hw, s_min, v_max)
    if pred_mask_source == "decoded":
        decoded = [np.clip(toy_decode(zp, enc), 0.0, 1.0) for zp in z_pred]
        masks_pred = image_masks(decoded, hw, s_min, v_max)
    elif pred_mask_source == "input":
        masks_pred = masks
    else:
        raise ValueError(f"unknown mask source {pred_mask_source!r}")
    structure = build_structures(z, z_pred, k)
    loss, _ = mvhg_loss(z, z_pred, masks, masks_pred, p, k, structure)
    z_norm = np.linalg.norm(z)
    diagnostics = {
        "t": int(t),
        "alpha_bar": float(sched.alpha_bar[t]),
        "mode": mode,
        "noise_residual": float(np.linalg.norm(eps_hat - eps) / max(np.linalg.norm(eps), 1e-300)),
        "reconstruction_gap": float(np.linalg.norm(z_pred - z) / max(z_norm, 1e-300)),
        "active_nodes": int(np.count_nonzero((masks != 0) | (masks_pred != 0))),
        "mask_agreement": float(np.mean((masks != 0) == (masks_pred != 0))),
        "n_nodes": structure.reference.n_nodes,
    }
    return loss, diagnostics


class TrajectoryRecord(NamedTuple):
    step: int
    l_ism: float
    l_mvhg: float
    l_total: float


@dataclass
class OptimizeResult:
    trajectory: list
    latents: np.ndarray = field(repr=False)


def optimize_latents(
    init,
    den: Denoiser,
    sched: NoiseSchedule,
    p: HgnnParams,
    k: int = DEFAULT_K,
    steps: int = 200,
    lr: float = 1.0,
    lambda_ism: float = DEFAULT_LAMBDA_ISM,
    lambda_mvhg: float = DEFAULT_LAMBDA_MVHG,
    seed: int = 0,
    *,
    masks=None,
    cond="object",
    delta_t: int = 50,
    t_range: Sequence[int] = (300, 500),
    divergence_factor: float = 10.0,
) -> OptimizeResult:
    """Gradient descent on ``lambda_ism * L_ISM + lambda_mvhg * L_MVHG`` over the latents.

    Each step draws ``t`` uniformly from ``t_range`` and a fresh noise sample.
    The MVHG reference branch is the denoiser's clean-latent estimate at that
    ``t`` (held constant for the step); the predicted branch is the current
    latents. ``masks`` default to all active.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr <= 0:
        raise ValueError("lr must be > 0")
    x = _views(init).copy()
    masks = np.ones(x.shape[:3]) if masks is None else as_tensor(masks)
    rng = np.random.default_rng(seed)
    lo, hi = t_range
    trajectory = []
    for step in range(steps):
        t = int(rng.integers(lo, hi + 1))
        eps = rng.standard_normal(x.shape)
        l_ism, g_ism = ism_loss_and_grad(x, t, delta_t, den, cond, sched, eps)
        x_t = add_noise(x, t, eps, sched)
        target = predict_clean(x_t, den.predict(x_t, t, cond), t, sched, "scaled")
        l_mvhg, g_mvhg = mvhg_loss(target, x, masks, masks, p, k)
        l_total = total_loss(l_ism, l_mvhg, lambda_ism, lambda_mvhg)
        trajectory.append(TrajectoryRecord(step, l_ism, l_mvhg, l_total))
        # absolute floor keeps a zero starting loss from flagging round-off growth
        limit = divergence_factor * max(trajectory[0].l_total, 1e-12)
        if not np.isfinite(l_total) or l_total > limit:
            raise DivergenceDetected(
                f"L_total {l_total:.6g} at step {step} exceeds {divergence_factor}x the initial value",
                trajectory,
            )
        x = x - lr * (lambda_ism * g_ism + lambda_mvhg * g_mvhg)
    return OptimizeResult(trajectory, x)
