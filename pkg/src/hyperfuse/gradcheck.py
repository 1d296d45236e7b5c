"""Finite-difference checks of the analytic gradients."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import diffusion_toy as dt
from . import hypergraph_geom as hg
from .tensor_core import finite_diff_grad, relative_error

FD_STEP = 1e-6


class CaseResult(NamedTuple):
    name: str
    rel_error: float
    passed: bool


def parse_size(text: str) -> tuple[int, int, int, int]:
    parts = tuple(int(p) for p in text.lower().split("x"))
    if len(parts) != 4 or min(parts) < 1:
        raise ValueError(f"size {text!r} is not NxHxWxC")
    return parts


def mvhg_case(size, k: int, activation: str, seed: int, layers: int = 2):
    """Analytic vs central-difference gradient of the MVHG loss, structure frozen."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(size)
    z_pred = z + 0.3 * rng.standard_normal(size)
    masks = (rng.random(size[:3]) < 0.7).astype(float)
    masks_pred = (rng.random(size[:3]) < 0.7).astype(float)
    masks[0, 0, 0] = 1.0
    p = hg.make_hgnn_params(size[3], layers, activation=activation, seed=seed)
    structure = hg.build_structures(z, z_pred, k)
    _, grad = hg.mvhg_loss(z, z_pred, masks, masks_pred, p, k, structure)
    fd = finite_diff_grad(
        lambda x: hg.mvhg_loss(z, x, masks, masks_pred, p, k, structure)[0], z_pred, FD_STEP
    )
    return relative_error(grad, fd)


def sds_case(seed: int, shape=(2, 4, 4, 4)):
    rng = np.random.default_rng(seed)
    sched = dt.make_schedule(1000)
    mu = rng.standard_normal(shape)
    x0 = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    t = int(rng.integers(1, 1001))
    den = dt.GaussianOracle(mu, sched)
    _, grad = dt.sds_residual(x0, t, eps, den, "object", sched)
    fd = finite_diff_grad(lambda x: dt.sds_surrogate(x, x0, t, eps, den, "object", sched), x0, FD_STEP)
    return relative_error(grad, fd)


def ism_case(seed: int, shape=(2, 4, 4, 4), delta_t: int = 50):
    rng = np.random.default_rng(seed)
    sched = dt.make_schedule(1000)
    den = dt.GaussianOracle(rng.standard_normal(shape), sched, uncond_mean=rng.standard_normal(shape))
    x0 = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    t = int(rng.integers(delta_t + 1, 1001))
    _, grad = dt.ism_loss_and_grad(x0, t, delta_t, den, "object", sched, eps)
    fd = finite_diff_grad(lambda x: dt.ism_residual(x, t, delta_t, den, "object", sched, eps), x0, FD_STEP)
    return relative_error(grad, fd)


def run_suite(sizes=("2x4x4x2", "2x8x8x4"), ks=(2, 4, 8), activations=("identity", "relu"),
              seed: int = 0, tolerance: float = 1e-4, layers: int = 2) -> list[CaseResult]:
    results = []
    case_seed = seed
    for size_text in sizes:
        size = parse_size(size_text)
        for k in ks:
            for act in activations:
                err = mvhg_case(size, k, act, case_seed, layers)
                results.append(CaseResult(f"mvhg[{size_text},k={k},{act},seed={case_seed}]", err, err < tolerance))
                case_seed += 1
    for i in range(3):
        err = sds_case(seed + 100 + i)
        results.append(CaseResult(f"sds[seed={seed + 100 + i}]", err, err < tolerance))
        err = ism_case(seed + 200 + i)
        results.append(CaseResult(f"ism[seed={seed + 200 + i}]", err, err < tolerance))
    return results
