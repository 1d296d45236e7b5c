"""Command-line entry point.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 I/O error, 4 divergence.
Reports never contain timestamps; those go to ``<report>.log`` only.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import diffusion_toy as dt
from . import fileformats as ff
from . import gradcheck
from . import hypergraph_geom as hg
from . import lora_ensemble as le
from . import synthdata as sd
from .config import ConfigError, distill_config, load_config
from .errors import DivergenceDetected, HyperfuseError, IndivisibleShape

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _fail(code, message):
    raise CliError(code, message)


def _sidecar(report, command):
    if report is None:
        return
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(str(report) + ".log", "a") as fh:
        fh.write(f"{stamp} {command} wrote {report}\n")


def _hgnn(cfg, channels):
    return hg.make_hgnn_params(channels, cfg["hgnn_layers"], cfg["hgnn_hidden"], cfg["activation"], cfg["seed"])


def _schedule(cfg):
    return dt.make_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"])


def _scene(name):
    if name not in sd.SCENES:
        _fail(EXIT_CONFIG, f"unknown scene {name!r}; choose from {', '.join(sorted(sd.SCENES))}")
    return sd.SCENES[name]


def _render(cfg, scene_name, views=None):
    scene = _scene(scene_name)
    views = list(views or cfg["views"])
    res, patch = cfg["resolution"], cfg["patch"]
    if res % patch:
        _fail(EXIT_CONFIG, f"resolution {res} must be divisible by the encoder patch size {patch}")
    images = sd.render_views(scene, views, res, seed=cfg["seed"])
    enc = sd.make_encoder(patch, sd.LATENT_CHANNELS, cfg["seed"])
    return views, images, enc, sd.encode_views(images, enc)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg):
    if args.resolution is not None:
        cfg["resolution"] = args.resolution
    views = args.views.split(",") if args.views else cfg["views"]
    if any(v not in sd.VIEWS for v in views):
        _fail(EXIT_CONFIG, f"views must be among {sd.VIEWS}")
    views, images, _, latents = _render(cfg, args.scene, views)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i, (view, img, lat) in enumerate(zip(views, images, latents)):
            ff.write_ppm(out / f"view{i}_{view}.ppm", img)
            ff.write_fdt(out / f"view{i}_{view}.fdt", lat)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write to {out}: {exc}")
    print(f"wrote {len(views)} views of {args.scene} to {out}")
    return EXIT_OK


def _load_latents(path, cfg):
    """Latent stack and masks from a gen-data directory or a single FDT file."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.fdt"))
        if not files:
            raise FileNotFoundError(f"no .fdt files in {p}")
        z = np.stack([ff.read_fdt(f) for f in files])
        ppms = [f.with_suffix(".ppm") for f in files]
        if all(q.exists() for q in ppms):
            masks = hg.image_masks([ff.read_ppm(q) for q in ppms], z.shape[1:3], cfg["s_min"], cfg["v_max"])
            return z, masks
        return z, np.ones(z.shape[:3])
    z = ff.read_fdt(p)
    if z.ndim == 3:
        z = z[None]
    if z.ndim != 4:
        _fail(EXIT_CONFIG, f"{p} holds a rank-{z.ndim} tensor; expected (N,H,W,C) or (H,W,C)")
    return z, np.ones(z.shape[:3])


def cmd_mvhg_eval(args, cfg):
    try:
        z, masks = _load_latents(args.latents, cfg)
        z_pred, masks_pred = _load_latents(args.pred, cfg)
    except (OSError, ff.FormatError) as exc:
        _fail(EXIT_IO, str(exc))
    if z.shape != z_pred.shape:
        _fail(EXIT_CONFIG, f"latent shapes differ: {z.shape} vs {z_pred.shape}")
    p = _hgnn(cfg, z.shape[3])
    structure = None
    if cfg["mvhg_structure"] == "frozen":
        ref = hg.build_hypergraph(hg.build_node_features(z), cfg["k"])
        structure = hg.MvhgStructure(ref, ref)
    loss, _ = hg.mvhg_loss(z, z_pred, masks, masks_pred, p, cfg["k"], structure)
    active = int(np.count_nonzero((masks != 0) | (masks_pred != 0)))
    row = [loss, active, cfg["k"], "-".join(map(str, p.dims)), cfg["seed"]]
    _write_report(args.report, ["loss", "active_nodes", "k", "layer_dims", "seed"], [row], cfg)
    print(f"L_MVHG = {loss!r} over {active} active nodes")
    return EXIT_OK


def cmd_mvhg_optimize(args, cfg):
    _, images, _, mu = _render(cfg, args.scene)
    sched = _schedule(cfg)
    den = dt.GaussianOracle(mu, sched)
    masks = hg.image_masks(images, mu.shape[1:3], cfg["s_min"], cfg["v_max"])
    init = sd.perturb(mu, "gaussian", cfg["init_noise"], cfg["seed"] + 1)
    columns = ["step", "l_ism", "l_mvhg", "l_total"]
    try:
        result = hg.optimize_latents(
            init, den, sched, _hgnn(cfg, mu.shape[3]), cfg["k"], args.steps, cfg["lr"],
            cfg["lambda_ism"], cfg["lambda_mvhg"], cfg["seed"], masks=masks, cond=args.scene,
            delta_t=cfg["delta_t"], t_range=(cfg["t_min"], cfg["t_max"]),
            divergence_factor=cfg["divergence_factor"],
        )
    except DivergenceDetected as exc:
        _write_report(args.report, columns, [list(r) for r in exc.trajectory], cfg)
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    traj = result.trajectory
    _write_report(args.report, columns, [list(r) for r in traj], cfg)
    print(f"L_total {traj[0].l_total!r} -> {traj[-1].l_total!r} over {len(traj)} steps")
    return EXIT_OK


def _teachers(cfg, n, divergence):
    if not 1 <= n <= len(le.TRIGGER_NAMES):
        _fail(EXIT_CONFIG, f"--teachers must lie in [1, {len(le.TRIGGER_NAMES)}]")
    if not 0.0 <= divergence <= 1.0:
        _fail(EXIT_CONFIG, "--divergence must lie in [0, 1]")
    base = le.make_base_model(cfg["seed"])
    teachers = le.make_teachers(base, n, cfg["lora_rank"], divergence, cfg["seed"], cfg["lora_strength"])
    return base, teachers


def _save_run(out, base, teachers, model, method, cfg):
    out = Path(out)
    try:
        ff.save_model(out / "teachers" / "base", base)
        entries = []
        for i, (_, adapters, trigger) in enumerate(teachers):
            d = out / "teachers" / f"teacher{i}"
            ff.save_adapters(d, adapters, trigger=trigger, teacher_id=i)
            entries.append({"teacher_id": i, "trigger": trigger, "path": f"teachers/teacher{i}"})
        ff.save_model(out / "model", model)
        (out / "manifest.json").write_text(
            json.dumps({"method": method, "adapters": entries, "config": cfg}, indent=2, sort_keys=True)
        )
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write to {out}: {exc}")


def cmd_distill(args, cfg):
    base, teachers = _teachers(cfg, args.teachers, args.divergence)
    dcfg = distill_config(cfg)
    datasets = [
        le.generate_teacher_dataset(t, trig, cfg["views"], cfg["samples_per_view"], seed=cfg["seed"] * 1000 + i)
        for i, (t, _, trig) in enumerate(teachers)
    ]
    student = le.initial_student(base, teachers, dcfg.student_init)
    student, history = le.distill(student, [t for t, _, _ in teachers], datasets, dcfg)
    _save_run(args.out, base, teachers, student, "distillation", cfg)
    columns = ["iteration", "stage", "teacher", "l_text", "l_unet", "l_noise", "objective"]
    _write_report(args.report, columns, [[h[c] for c in columns] for h in history], cfg)
    print(f"distilled {len(teachers)} teachers into {Path(args.out) / 'model'}")
    return EXIT_OK


def cmd_fuse(args, cfg):
    base, teachers = _teachers(cfg, args.teachers, args.divergence)
    fused = le.additive_fuse(base, [ads for _, ads, _ in teachers])
    _save_run(args.out, base, teachers, fused, "addition", cfg)
    print(f"fused {len(teachers)} adapters into {Path(args.out) / 'model'}")
    return EXIT_OK


def cmd_analyze(args, cfg):
    tdir = Path(args.teachers_dir)
    try:
        base = ff.load_model(tdir / "base")
        teacher_dirs = sorted(
            (d for d in tdir.iterdir() if (d / "adapters.json").exists()),
            key=lambda d: ff.load_adapters(d)[1].get("teacher_id", 0),
        )
        loaded = [ff.load_adapters(d) for d in teacher_dirs]
        model = ff.load_model_or_adapters(args.model, base)
    except (OSError, ff.FormatError, KeyError) as exc:
        _fail(EXIT_IO, f"cannot load models: {exc}")
    if not loaded:
        _fail(EXIT_IO, f"no teacher adapters under {tdir}")
    pairs = [(le.merge(base, ads), meta["trigger"]) for ads, meta in loaded]
    pres = le.concept_preservation(model, pairs, cfg["probes_per_view"], cfg["views"], cfg["seed"])
    rows = [[meta.get("teacher_id", i), s] for i, ((_, meta), s) in enumerate(zip(loaded, pres.scores))]
    rows.append(["average", pres.average])
    _write_report(args.report, ["teacher_id", "score"], rows, cfg)

    vectors = [le.adapter_vector(ads, base) for ads, _ in loaded] + [le.model_delta_vector(model, base)]
    labels = [f"T{meta.get('teacher_id', i)}" for i, (_, meta) in enumerate(loaded)] + ["model"]
    kinds = ["adapter"] * len(loaded) + ["model"]
    svg_path = Path(args.svg) if args.svg else Path(args.report).with_suffix(".svg")
    summary = le.pca_adapters(vectors, 2)
    try:
        svg_path.write_text(ff.scatter_svg(summary.projections, labels, kinds))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    print(f"average preservation {pres.average:.4f}")
    return EXIT_OK


def cmd_grad_check(args, cfg):
    sizes = args.sizes.split(",") if args.sizes else cfg["grad_sizes"]
    try:
        results = gradcheck.run_suite(sizes, cfg["grad_ks"], seed=cfg["seed"], tolerance=cfg["grad_tolerance"],
                                      layers=cfg["hgnn_layers"])
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    rows = [[r.name, r.rel_error, "pass" if r.passed else "FAIL"] for r in results]
    _write_report(args.report, ["case", "max_rel_error", "status"], rows, cfg)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"gradient check failed: {r.name} rel. error {r.rel_error:.3e}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} gradient cases passed")
    return EXIT_CHECK if failed else EXIT_OK


def _write_report(path, columns, rows, cfg):
    if path is None:
        return
    try:
        ff.write_csv(path, columns, rows, cfg)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write report {path}: {exc}")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config overriding the defaults")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "render and encode a synthetic scene")
    p.add_argument("--scene", default="screw")
    p.add_argument("--views", help="comma-separated view tags (front,up)")
    p.add_argument("--resolution", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("mvhg-eval", cmd_mvhg_eval, "MVHG loss between two latent sets")
    p.add_argument("--latents", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--report")

    p = add("mvhg-optimize", cmd_mvhg_optimize, "optimize latents on the unified objective")
    p.add_argument("--scene", default="screw")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--report")

    for name, func, text in (("distill", cmd_distill, "multi-teacher distillation"),
                             ("fuse", cmd_fuse, "additive adapter fusion")):
        p = add(name, func, text)
        p.add_argument("--teachers", type=int, required=True)
        p.add_argument("--divergence", type=float, default=1.0)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        if name == "distill":
            p.add_argument("--report")

    p = add("analyze", cmd_analyze, "concept preservation and PCA of adapters")
    p.add_argument("--model", required=True)
    p.add_argument("--teachers-dir", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--svg")

    p = add("grad-check", cmd_grad_check, "finite-difference gradient suite")
    p.add_argument("--sizes", help="comma-separated NxHxWxC sizes")
    p.add_argument("--report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        if getattr(args, "steps", None) is not None and args.steps < 1:
            _fail(EXIT_CONFIG, "--steps must be >= 1")
        code = args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    except IndivisibleShape as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HyperfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    _sidecar(getattr(args, "report", None), args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
