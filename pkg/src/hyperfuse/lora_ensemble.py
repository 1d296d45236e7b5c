"""Low-rank adapters, additive fusion and multi-teacher distillation on a toy model.

The toy model has two stages that mirror a text-conditioned noise predictor:

* text encoder: two tanh layers over the token sequence ``[trigger, view]``
  (each token a width-16 embedding), pooled by the mean over tokens;
* unet: three dense layers (relu, relu, linear) mapping
  ``pooled text (16) ++ noisy latent (16)`` to a noise prediction (16).

Every weight matrix is a named layer, so LoRA adapters can target any of them
and the distillation losses can tap every intermediate feature.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .diffusion_toy import add_noise, make_schedule
from .errors import EmptyDataset, ShapeMismatch, UnknownLayer, UnknownTrigger
from .tensor_core import as_tensor, cosine_similarity, pca

EMBED_DIM = 16
LATENT_DIM = 16
VIEW_TAGS = ("front", "up")
TRIGGER_NAMES = (
    "screw", "nut", "bearing", "gasket", "nail", "hex_stud",
    "ceramic_capacitor", "resistor", "red_led", "green_led",
)


@dataclass
class Layer:
    name: str
    weight: np.ndarray
    activation: str


@dataclass
class ToyModel:
    text_encoder_layers: list
    unet_layers: list
    embedding_table: dict

    def __post_init__(self):
        names = [l.name for l in self.layers()]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for stage in (self.text_encoder_layers, self.unet_layers):
            for a, b in zip(stage, stage[1:]):
                if a.weight.shape[1] != b.weight.shape[0]:
                    raise ShapeMismatch(f"{a.name} -> {b.name} dims do not chain")

    def layers(self) -> list:
        return list(self.text_encoder_layers) + list(self.unet_layers)

    def layer(self, name: str) -> Layer:
        for l in self.layers():
            if l.name == name:
                return l
        raise UnknownLayer(name)

    def copy(self) -> "ToyModel":
        return copy.deepcopy(self)

    def weights(self) -> dict:
        return {l.name: l.weight for l in self.layers()}

    def embed(self, trigger: str, view: str) -> np.ndarray:
        for label in (trigger, view):
            if label not in self.embedding_table:
                raise UnknownTrigger(label)
        return np.stack([self.embedding_table[trigger], self.embedding_table[view]])


def make_base_model(seed: int = 0, triggers=TRIGGER_NAMES) -> ToyModel:
    rng = np.random.default_rng(seed)

    def dense(a, b):
        return rng.standard_normal((a, b)) / np.sqrt(a)

    text = [
        Layer("text.0", dense(EMBED_DIM, EMBED_DIM), "tanh"),
        Layer("text.1", dense(EMBED_DIM, EMBED_DIM), "tanh"),
    ]
    width = EMBED_DIM + LATENT_DIM
    unet = [
        Layer("unet.0", dense(width, width), "relu"),
        Layer("unet.1", dense(width, width), "relu"),
        Layer("unet.2", dense(width, LATENT_DIM), "identity"),
    ]
    labels = list(triggers) + list(VIEW_TAGS)
    table = {lab: rng.standard_normal(EMBED_DIM) for lab in labels}
    return ToyModel(text, unet, table)


def _act(x, kind):
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_grad(pre, post, kind):
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    return np.ones_like(pre)


class Forward(NamedTuple):
    tokens: np.ndarray
    text_pre: list
    text_feats: list
    unet_in: np.ndarray
    unet_pre: list
    unet_feats: list

    @property
    def eps_hat(self) -> np.ndarray:
        return self.unet_feats[-1]


def forward(model: ToyModel, triggers, views, x_t) -> Forward:
    """Batched forward pass; ``x_t`` has shape (B, LATENT_DIM)."""
    x_t = as_tensor(x_t)
    tokens = np.stack([model.embed(tr, vw) for tr, vw in zip(triggers, views)])
    text_pre, text_feats = [], []
    h = tokens
    for l in model.text_encoder_layers:
        a = h @ l.weight
        h = _act(a, l.activation)
        text_pre.append(a)
        text_feats.append(h)
    pooled = h.mean(axis=1)
    if x_t.shape != (tokens.shape[0], LATENT_DIM):
        raise ShapeMismatch(f"x_t must be (B, {LATENT_DIM}), got {x_t.shape}")
    unet_in = np.concatenate([pooled, x_t], axis=1)
    unet_pre, unet_feats = [], []
    h = unet_in
    for l in model.unet_layers:
        a = h @ l.weight
        h = _act(a, l.activation)
        unet_pre.append(a)
        unet_feats.append(h)
    return Forward(tokens, text_pre, text_feats, unet_in, unet_pre, unet_feats)


def predict_noise(model: ToyModel, trigger: str, view: str, x_t) -> np.ndarray:
    x_t = np.atleast_2d(as_tensor(x_t))
    return forward(model, [trigger] * len(x_t), [view] * len(x_t), x_t).eps_hat


def backward(model: ToyModel, fw: Forward, text_taps, unet_taps) -> dict:
    """Weight gradients given loss gradients on each tapped feature.

    ``text_taps[l]`` is the gradient w.r.t. the *pooled* output of text layer
    ``l`` (shape (B, 16)) and ``unet_taps[m]`` the gradient w.r.t. unet layer
    ``m``'s output; ``None`` means no direct loss on that feature.
    """
    grads = {}
    g = None
    for m in reversed(range(len(model.unet_layers))):
        l = model.unet_layers[m]
        tap = unet_taps[m]
        if tap is not None:
            g = tap if g is None else g + tap
        if g is None:
            continue
        g_pre = g * _act_grad(fw.unet_pre[m], fw.unet_feats[m], l.activation)
        inp = fw.unet_in if m == 0 else fw.unet_feats[m - 1]
        grads[l.name] = inp.T @ g_pre
        g = g_pre @ l.weight.T
    g_pooled = None if g is None else g[:, :EMBED_DIM]
    n_tok = fw.tokens.shape[1]
    g = None
    for li in reversed(range(len(model.text_encoder_layers))):
        l = model.text_encoder_layers[li]
        pooled_grad = text_taps[li]
        if li == len(model.text_encoder_layers) - 1 and g_pooled is not None:
            pooled_grad = g_pooled if pooled_grad is None else pooled_grad + g_pooled
        if pooled_grad is not None:
            spread = np.repeat(pooled_grad[:, None, :] / n_tok, n_tok, axis=1)
            g = spread if g is None else g + spread
        if g is None:
            continue
        g_pre = g * _act_grad(fw.text_pre[li], fw.text_feats[li], l.activation)
        inp = fw.tokens if li == 0 else fw.text_feats[li - 1]
        grads[l.name] = np.einsum("bti,btj->ij", inp, g_pre)
        g = g_pre @ l.weight.T
    return grads


# --------------------------------------------------------------------------
# LoRA algebra


@dataclass
class LoraAdapter:
    target_layer: str
    b_factor: np.ndarray
    a_factor: np.ndarray
    scale: float

    def __post_init__(self):
        self.b_factor = as_tensor(self.b_factor)
        self.a_factor = as_tensor(self.a_factor)
        if self.b_factor.ndim != 2 or self.a_factor.ndim != 2:
            raise ShapeMismatch("LoRA factors must be rank 2")
        d, r = self.b_factor.shape
        if self.a_factor.shape[0] != r:
            raise ShapeMismatch(f"B is {self.b_factor.shape} but A is {self.a_factor.shape}")
        if r > min(d, self.a_factor.shape[1]):
            raise ShapeMismatch(f"rank {r} exceeds min(d, k)")

    @property
    def rank(self) -> int:
        return self.b_factor.shape[1]

    @property
    def shape(self):
        return self.b_factor.shape[0], self.a_factor.shape[1]


def lora_delta(adapter: LoraAdapter) -> np.ndarray:
    """``(scale / rank) * B @ A``."""
    return (adapter.scale / adapter.rank) * (adapter.b_factor @ adapter.a_factor)


def _sorted_adapters(adapters):
    # fixed summation order so fusion does not depend on list order
    return sorted(
        adapters, key=lambda a: (a.target_layer, a.b_factor.tobytes(), a.a_factor.tobytes(), a.scale)
    )


def merge(base: ToyModel, adapters) -> ToyModel:
    """Return a copy of ``base`` with every adapter's delta added to its layer."""
    out = base.copy()
    for ad in _sorted_adapters(adapters):
        layer = out.layer(ad.target_layer)
        if layer.weight.shape != ad.shape:
            raise ShapeMismatch(f"adapter {ad.shape} does not fit {layer.name} {layer.weight.shape}")
        layer.weight = layer.weight + lora_delta(ad)
    return out


def additive_fuse(base: ToyModel, adapter_sets) -> ToyModel:
    """``W_base + sum_i delta_i`` over every teacher's adapter set."""
    return merge(base, [ad for s in adapter_sets for ad in s])


def make_teachers(base: ToyModel, n: int, rank: int = 4, divergence: float = 1.0, seed: int = 0,
                  strength: float = 0.5):
    """Synthetic experts: one adapter per layer per teacher.

    Factors mix a shared draw with a per-teacher draw,
    ``sqrt(1 - divergence) * shared + sqrt(divergence) * own``, so
    ``divergence = 0`` gives identical deltas and ``divergence = 1`` independent
    ones. ``strength`` sets the delta entry scale to about ``strength / sqrt(d)``.

    Returns a list of ``(teacher_model, adapter_list, trigger)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= divergence <= 1.0:
        raise ValueError("divergence must lie in [0, 1]")
    triggers = [t for t in TRIGGER_NAMES if t in base.embedding_table]
    if n > len(triggers):
        raise ValueError(f"base model only has {len(triggers)} trigger embeddings")
    rng = np.random.default_rng(seed)
    shapes = [(l.name, l.weight.shape) for l in base.layers()]
    shared = {name: (rng.standard_normal((d, rank)), rng.standard_normal((rank, k))) for name, (d, k) in shapes}
    ws, wo = np.sqrt(1.0 - divergence), np.sqrt(divergence)
    out = []
    for i in range(n):
        adapters = []
        for name, (d, k) in shapes:
            sb, sa = shared[name]
            b = ws * sb + wo * rng.standard_normal((d, rank))
            a = ws * sa + wo * rng.standard_normal((rank, k))
            adapters.append(LoraAdapter(name, b * strength / np.sqrt(d * rank), a, float(rank)))
        out.append((merge(base, adapters), adapters, triggers[i]))
    return out


def adapter_vector(adapters, base: ToyModel) -> np.ndarray:
    """Flattened per-layer delta of an adapter set, in the base model's layer order."""
    deltas = {l.name: np.zeros_like(l.weight) for l in base.layers()}
    for ad in _sorted_adapters(adapters):
        deltas[ad.target_layer] = deltas[ad.target_layer] + lora_delta(ad)
    return np.concatenate([deltas[l.name].ravel() for l in base.layers()])


def model_delta_vector(model: ToyModel, base: ToyModel) -> np.ndarray:
    return np.concatenate([(model.layer(l.name).weight - l.weight).ravel() for l in base.layers()])


# --------------------------------------------------------------------------
# distillation


class Record(NamedTuple):
    latent: np.ndarray
    trigger: str
    view_tag: str


@dataclass
class DistillDataset:
    records: list
    trigger: str

    def __post_init__(self):
        if any(r.trigger != self.trigger for r in self.records):
            raise ValueError("every record must carry the dataset's trigger")

    def __len__(self):
        return len(self.records)


def generate_teacher_dataset(teacher: ToyModel, trigger: str, views=VIEW_TAGS, samples_per_view: int = 10,
                             seed: int = 0) -> DistillDataset:
    """Deterministic teacher samples: one denoising step from seeded noise per record."""
    if samples_per_view < 1:
        raise ValueError("samples_per_view must be >= 1")
    if trigger not in teacher.embedding_table:
        raise UnknownTrigger(trigger)
    rng = np.random.default_rng(seed)
    records = []
    for view in views:
        noise = rng.standard_normal((samples_per_view, LATENT_DIM))
        sample = noise - predict_noise(teacher, trigger, view, noise)
        records.extend(Record(s, trigger, view) for s in sample)
    return DistillDataset(records, trigger)


@dataclass
class DistillConfig:
    stage1_iters: int = 400
    stage2_iters: int = 800
    lr: float = 0.05
    batch_size: int = 8
    alpha_l: tuple | None = None
    beta_m: tuple | None = None
    lambda_text: float = 1.0
    lambda_noise: float = 0.1
    gamma_text: float = 1.0
    gamma_unet: float = 1.0
    gamma_noise: float = 0.1
    weight_mode: str = "fixed"
    ema_decay: float = 0.99
    alternation_interval: int = 10
    student_init: str = "base"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    seed: int = 0

    def __post_init__(self):
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ValueError("stage iteration counts must be >= 1")
        weights = [self.lambda_text, self.lambda_noise, self.gamma_text, self.gamma_unet, self.gamma_noise]
        weights += list(self.alpha_l or ()) + list(self.beta_m or ())
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")
        if self.weight_mode not in ("fixed", "inverse-ema"):
            raise ValueError("weight_mode must be 'fixed' or 'inverse-ema'")
        if self.student_init not in ("base", "fused", "teacher"):
            raise ValueError("student_init must be 'base', 'fused' or 'teacher'")
        if self.lr <= 0 or self.batch_size < 1 or self.alternation_interval < 0:
            raise ValueError("invalid optimizer settings")


def initial_student(base: ToyModel, teachers, mode: str = "base") -> ToyModel:
    """Student starting point: the base model, the additive fusion, or the first teacher.

    ``teachers`` is the list returned by :func:`make_teachers`.
    """
    if mode == "base":
        return base.copy()
    if mode == "fused":
        return additive_fuse(base, [ads for _, ads, _ in teachers])
    if mode == "teacher":
        return teachers[0][0].copy()
    raise ValueError(f"unknown student init {mode!r}")


def round_robin(n_teachers: int, iters: int) -> list[int]:
    return [i % n_teachers for i in range(iters)]


class _AdaptiveWeights:
    """Per-term weights; ``inverse-ema`` divides by a running mean of each term."""

    FLOOR = 1e-8

    def __init__(self, mode, decay):
        self.mode = mode
        self.decay = decay
        self.ema = {}

    def __call__(self, name, base_weight, value):
        if self.mode == "fixed":
            return base_weight
        prev = self.ema.get(name)
        self.ema[name] = value if prev is None else self.decay * prev + (1 - self.decay) * value
        return base_weight / max(self.ema[name], self.FLOOR)


def _mse(a, b):
    d = a - b
    return float(np.mean(d * d)), 2.0 * d / d.size


def distill(student: ToyModel, teachers, datasets, cfg: DistillConfig, on_stage_end=None):
    """Two-stage multi-teacher distillation with plain gradient descent.

    ``teachers`` is a list of models aligned with ``datasets``. Stage 1 trains
    only the text encoder on ``lambda_text*L_text + lambda_noise*L_noise``;
    stage 2 trains everything on ``gamma_text*L_text + gamma_unet*L_unet +
    gamma_noise*L_noise``, alternating blocks of ``alternation_interval`` steps
    between the noise term and the alignment terms (0 disables alternation).
    Batches cycle round-robin over teachers. Neither ``student`` nor the
    teachers are modified. ``on_stage_end(stage, model)``, if given, receives
    a copy of the student after each stage.

    Returns ``(student, history)``; each history row is a dict with keys
    ``iteration, stage, teacher, l_text, l_unet, l_noise, objective``.
    """
    if len(teachers) != len(datasets) or not teachers:
        raise ValueError("need one dataset per teacher")
    if any(len(ds) == 0 for ds in datasets):
        raise EmptyDataset("every teacher dataset needs records")
    s = student.copy()
    for t in teachers:
        if [(l.name, l.weight.shape) for l in t.layers()] != [(l.name, l.weight.shape) for l in s.layers()]:
            raise ShapeMismatch("student and teacher architectures differ")
    n_text, n_unet = len(s.text_encoder_layers), len(s.unet_layers)
    alpha = np.asarray(cfg.alpha_l if cfg.alpha_l is not None else [1.0 / n_text] * n_text)
    beta = np.asarray(cfg.beta_m if cfg.beta_m is not None else [1.0 / n_unet] * n_unet)
    if alpha.size != n_text or beta.size != n_unet:
        raise ShapeMismatch("alpha_l / beta_m lengths must match the layer counts")
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    rng = np.random.default_rng(cfg.seed)
    cursors = [0] * len(datasets)
    adapt = _AdaptiveWeights(cfg.weight_mode, cfg.ema_decay)
    text_names = {l.name for l in s.text_encoder_layers}
    history = []

    def batch(ti):
        ds = datasets[ti].records
        idx = [(cursors[ti] + j) % len(ds) for j in range(cfg.batch_size)]
        cursors[ti] = (cursors[ti] + cfg.batch_size) % len(ds)
        return [ds[j] for j in idx]

    schedule = [(1, i, ti) for i, ti in enumerate(round_robin(len(teachers), cfg.stage1_iters))]
    schedule += [(2, i, ti) for i, ti in enumerate(round_robin(len(teachers), cfg.stage2_iters))]
    for it, (stage, local, ti) in enumerate(schedule):
        recs = batch(ti)
        trig = [r.trigger for r in recs]
        views = [r.view_tag for r in recs]
        x0 = np.stack([r.latent for r in recs])
        t = int(rng.integers(1, cfg.T + 1))
        eps = rng.standard_normal(x0.shape)
        x_t = add_noise(x0, t, eps, sched)
        fw_t = forward(teachers[ti], trig, views, x_t)
        fw_s = forward(s, trig, views, x_t)

        l_text, text_g = 0.0, []
        for li in range(n_text):
            v, g = _mse(fw_s.text_feats[li].mean(axis=1), fw_t.text_feats[li].mean(axis=1))
            l_text += alpha[li] * v
            text_g.append(alpha[li] * g)
        l_unet, unet_g = 0.0, []
        for m in range(n_unet):
            v, g = _mse(fw_s.unet_feats[m], fw_t.unet_feats[m])
            l_unet += beta[m] * v
            unet_g.append(beta[m] * g)
        l_noise, noise_g = _mse(fw_s.eps_hat, eps)

        if stage == 1:
            w_text = adapt("s1.text", cfg.lambda_text, l_text)
            w_unet = 0.0
            w_noise = adapt("s1.noise", cfg.lambda_noise, l_noise)
        else:
            w_text = adapt("s2.text", cfg.gamma_text, l_text)
            w_unet = adapt("s2.unet", cfg.gamma_unet, l_unet)
            w_noise = adapt("s2.noise", cfg.gamma_noise, l_noise)
            if cfg.alternation_interval:
                if (local // cfg.alternation_interval) % 2 == 0:
                    w_text = w_unet = 0.0
                else:
                    w_noise = 0.0
        objective = w_text * l_text + w_unet * l_unet + w_noise * l_noise
        history.append({
            "iteration": it, "stage": stage, "teacher": ti,
            "l_text": l_text, "l_unet": l_unet, "l_noise": l_noise, "objective": objective,
        })

        taps_text = [w_text * g for g in text_g]
        taps_unet = [w_unet * g for g in unet_g]
        taps_unet[-1] = taps_unet[-1] + w_noise * noise_g
        grads = backward(s, fw_s, taps_text, taps_unet)
        for l in s.layers():
            if stage == 1 and l.name not in text_names:
                continue
            if l.name in grads:
                l.weight = l.weight - cfg.lr * grads[l.name]
        if on_stage_end is not None and (it + 1 == len(schedule) or schedule[it + 1][0] != stage):
            on_stage_end(stage, s.copy())
    return s, history


# --------------------------------------------------------------------------
# analysis


class Preservation(NamedTuple):
    scores: list
    average: float


def concept_preservation(model: ToyModel, teachers, probes_per_view: int = 8, views=VIEW_TAGS,
                         seed: int = 0) -> Preservation:
    """Mean output cosine between ``model`` and each teacher on that teacher's trigger.

    ``teachers`` is a list of ``(teacher_model, trigger)`` pairs. Probe inputs
    are seeded noise latents, one batch per view.
    """
    if probes_per_view < 1 or not views:
        raise ValueError("probes must be nonempty")
    scores = []
    for ti, (teacher, trigger) in enumerate(teachers):
        rng = np.random.default_rng([seed, ti])
        sims = []
        for view in views:
            x = rng.standard_normal((probes_per_view, LATENT_DIM))
            ours = predict_noise(model, trigger, view, x)
            ref = predict_noise(teacher, trigger, view, x)
            sims.extend(cosine_similarity(a, b) for a, b in zip(ours, ref))
        scores.append(float(np.mean(sims)))
    return Preservation(scores, float(np.mean(scores)))


class PcaSummary(NamedTuple):
    projections: np.ndarray
    explained_variance: np.ndarray
    distances: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca_adapters(vectors, dims: int = 2) -> PcaSummary:
    """Project flattened deltas onto their leading principal axes.

    ``distances`` holds pairwise Euclidean distances in the original space.
    """
    rows = np.stack([as_tensor(v).ravel() for v in vectors])
    comps, proj, var = pca(rows, min(dims, *rows.shape))
    diff = rows[:, None, :] - rows[None, :, :]
    return PcaSummary(proj, var, np.sqrt(np.sum(diff * diff, axis=2)), comps, rows.mean(axis=0))
