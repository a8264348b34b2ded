"""Command line for desk-scale progressive GAN training and evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dataio import (
    ImageDataset,
    center_fit,
    load_directory,
    load_image,
    preprocess,
    read_manifest,
    save_image,
)
from .metrics import MetricReport, SWDConfig, msssim_diversity_report, swd_multiscale
from .nets import VIEW_NAMES, parse_view

log = logging.getLogger("deskgan")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    th, tw = args.target
    manifest = src / "manifest.csv"
    if manifest.exists():
        entries = read_manifest(manifest)
    else:
        entries = [(p, 0) for p in sorted(src.iterdir()) if p.suffix.lower() in (".pgm", ".png")]
    rows = []
    for path, view in entries:
        img = load_image(path, view)
        px = preprocess(img, th, tw)
        if args.square:
            px = center_fit(px, args.square, args.square)
        name = path.stem + ".pgm"
        save_image(px, out / name, maxval=img.maxval)
        rows.append((name, VIEW_NAMES[view]))
    with (out / "manifest.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["path", "view"])
        wr.writerows(rows)
    print(f"preprocessed {len(rows)} images into {out}")
    return EXIT_OK


def _load_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("train needs --config with a data source (phantom_count or data_dir)")
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def build_datasets(cfg: RunConfig) -> tuple[ImageDataset, np.ndarray]:
    """Training set plus a held-out evaluation stack in [0, 1]."""
    if cfg.phantom_count is not None:
        pc = cfg.phantom()
        train = ImageDataset.from_phantoms(pc, cfg.phantom_count)
        held = ImageDataset.from_phantoms(pc, cfg.eval_count, start=cfg.phantom_count)
        return train, held.images.astype(np.float64)
    target = (cfg.target_h, cfg.target_w) if cfg.target_h and cfg.target_w else None
    data = load_directory(cfg.data_dir, target=target, square=cfg.square)
    idx = np.random.default_rng([cfg.seed, 2]).permutation(len(data))[: cfg.eval_count]
    return data, data.images[idx].astype(np.float64)


def cmd_train(args) -> int:
    from .trainer import run, select_checkpoint

    cfg = _load_config(args)
    train, held = build_datasets(cfg)
    report = run(cfg.schedule(), train, cfg.out, plan=cfg.plan(), losses=cfg.losses(),
                 resume=args.resume, mbstd=cfg.mbstd, max_steps=args.max_steps)
    print(f"trained to {report.images_seen} images "
          f"({report.critic_updates} critic / {report.gen_updates} generator updates, "
          f"{report.restarts} restarts); {len(report.checkpoints)} checkpoints in {cfg.out}")
    if cfg.select_best:
        best, scores = select_checkpoint(report.checkpoints, held, n_samples=cfg.eval_count,
                                         seed=cfg.seed, swd_cfg=cfg.swd())
        with (Path(cfg.out) / "checkpoint_swd.csv").open("w") as fh:
            fh.write("checkpoint,swd_mean\n")
            for p, s in zip(report.checkpoints, scores):
                fh.write(f"{Path(p).name},{s!r}\n")
        (Path(cfg.out) / "best_checkpoint.txt").write_text(Path(best).name + "\n")
        print(f"best checkpoint by SWD: {Path(best).name}")
    return EXIT_OK


def _open_generator(path):
    from .trainer import load_generator

    p = Path(path)
    if not (p / "manifest.json").exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return load_generator(p)


def cmd_sample(args) -> int:
    from .trainer import generate, image_grid

    gen, fade = _open_generator(args.ckpt)
    view = parse_view(args.view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.count == 0:
        return EXIT_OK
    imgs = generate(gen, fade, args.count, view, args.seed)
    for i, img in enumerate(imgs):
        save_image(img, out / f"sample_{i:04d}_{VIEW_NAMES[view]}.{args.format}")
    if args.grid:
        rows, cols = args.grid
        save_image(image_grid(imgs, rows, cols), out / f"grid_{VIEW_NAMES[view]}.png")
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def slerp(z0: np.ndarray, z1: np.ndarray, t: float) -> np.ndarray:
    if t <= 0.0:
        return z0.copy()
    if t >= 1.0:
        return z1.copy()
    a, b = z0.astype(np.float64), z1.astype(np.float64)
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    omega = np.arccos(np.clip(cos, -1.0, 1.0))
    if np.sin(omega) < 1e-8:
        out = (1 - t) * a + t * b
    else:
        out = (np.sin((1 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)
    return out.astype(z0.dtype)


def walk_latents(waypoints: np.ndarray, n_frames: int) -> np.ndarray:
    """``n_frames`` latents spread evenly along a slerp path through ``waypoints``."""
    if n_frames < 2:
        raise ValueError("a walk needs at least 2 frames")
    legs = len(waypoints) - 1
    frames = []
    for f in range(n_frames):
        num = f * legs
        seg = min(num // (n_frames - 1), legs - 1)
        t = (num - seg * (n_frames - 1)) / (n_frames - 1)
        frames.append(slerp(waypoints[seg], waypoints[seg + 1], t))
    return np.stack(frames)


def cmd_walk(args) -> int:
    from .objectives import LatentSampler
    from .trainer import generate_from_latents

    if args.frames < 2:
        raise UsageError("--frames must be at least 2")
    gen, fade = _open_generator(args.ckpt)
    n_way = max(2, min(args.waypoints, args.frames))
    rng = np.random.default_rng(args.seed)
    way = LatentSampler(gen.plan.latent_dim).sample(rng, n_way)
    zs = walk_latents(way, args.frames)
    view = parse_view(args.view)
    imgs = generate_from_latents(gen, fade, zs, view, batch=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(imgs):
        save_image(img, out / f"frame_{i:05d}.{args.format}")
    print(f"wrote {len(imgs)} frames to {out}")
    return EXIT_OK


def _read_dir(path) -> np.ndarray:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"directory {p} does not exist")
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".pgm", ".png"))
    if not files:
        raise UsageError(f"directory {p} holds no PGM/PNG images")
    imgs = [load_image(f).pixels for f in files]
    if len({im.shape for im in imgs}) != 1:
        raise UsageError(f"images in {p} differ in resolution")
    return np.stack(imgs)


def _eval_sets(args) -> tuple[np.ndarray, np.ndarray]:
    a, b = _read_dir(args.dir_a), _read_dir(args.dir_b)
    if a.shape[1:] != b.shape[1:]:
        raise UsageError(f"resolution mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    return a, b


def _emit(report: MetricReport, out: str | None, name: str) -> None:
    print(report.to_text())
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}.csv").write_text(report.to_csv())
        (d / f"{name}.json").write_text(report.to_text() + "\n")


def cmd_eval_swd(args) -> int:
    a, b = _eval_sets(args)
    cfg = SWDConfig(args.patch, args.patches_per_image, args.projections, min_resolution=args.min_resolution)
    report = swd_multiscale(a, b, cfg, np.random.default_rng(args.seed))
    _emit(report, args.out, "swd")
    return EXIT_OK


def cmd_eval_msssim(args) -> int:
    a, b = _eval_sets(args)
    vals = msssim_diversity_report(a, b, np.random.default_rng(args.seed), n_pairs=args.pairs, scales=args.scales)
    _emit(MetricReport(**vals), args.out, "msssim")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    path = Path(args.run)
    csv_path = path / "diagnostics.csv" if path.is_dir() else path
    if not csv_path.exists():
        raise UsageError(f"no diagnostics CSV at {csv_path}")
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print("no diagnostics rows")
        return EXIT_OK
    cols = [c for c in rows[0] if c != "images_seen"]
    x = np.array([int(r["images_seen"]) for r in rows])
    data = {c: np.array([float(r[c]) for r in rows]) for c in cols}
    print(f"{len(rows)} rows, images_seen {x[0]}..{x[-1]}")
    for c in cols:
        v = data[c]
        print(f"  {c:14s} first {v[0]: .4f}  last {v[-1]: .4f}  min {np.nanmin(v): .4f}  max {np.nanmax(v): .4f}")
    out = Path(args.out) if args.out else csv_path.parent
    out.mkdir(parents=True, exist_ok=True)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [("d_bce", "discriminator BCE"), ("grad_mag", "interpolate gradient norm"),
              ("label_ce_real", "label CE (real)"), ("label_ce_fake", "label CE (generated)")]
    fig, axes = plt.subplots(1, 4, figsize=(16, 3.2))
    for ax, (col, title) in zip(axes, panels):
        ax.plot(x, data[col])
        ax.set_title(title)
        ax.set_xlabel("images shown")
    fig.tight_layout()
    fig.savefig(out / "diagnostics.png", dpi=100)
    plt.close(fig)
    print(f"wrote {out / 'diagnostics.png'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("preprocess", help="resize/pad a directory of mammograms")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--target", type=_resolution, default=(1280, 1024))
    sp.add_argument("--square", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_preprocess, out_required=True)

    sp = sub.add_parser("train", help="progressive training from a config file")
    sp.add_argument("--config")
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    sp.add_argument("--max-steps", type=int, default=None)
    common(sp, seed_default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw samples from a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--count", type=int, default=30)
    sp.add_argument("--view", choices=VIEW_NAMES, default="cc")
    sp.add_argument("--format", choices=("png", "pgm"), default="png")
    sp.add_argument("--grid", type=_resolution, default=None, metavar="ROWSxCOLS")
    common(sp)
    sp.set_defaults(func=cmd_sample, out_required=True)

    sp = sub.add_parser("walk", help="latent-space walk frames")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--frames", type=int, default=60)
    sp.add_argument("--waypoints", type=int, default=4)
    sp.add_argument("--view", choices=VIEW_NAMES, default="cc")
    sp.add_argument("--format", choices=("png", "pgm"), default="png")
    common(sp)
    sp.set_defaults(func=cmd_walk, out_required=True)

    sp = sub.add_parser("eval-swd", help="multi-scale sliced Wasserstein between two image dirs")
    sp.add_argument("dir_a")
    sp.add_argument("dir_b")
    sp.add_argument("--patch", type=int, default=7)
    sp.add_argument("--patches-per-image", type=int, default=128)
    sp.add_argument("--projections", type=int, default=512)
    sp.add_argument("--min-resolution", type=int, default=16)
    common(sp)
    sp.set_defaults(func=cmd_eval_swd)

    sp = sub.add_parser("eval-msssim", help="MS-SSIM cross/within-set similarity of two image dirs")
    sp.add_argument("dir_a")
    sp.add_argument("dir_b")
    sp.add_argument("--pairs", type=int, default=None)
    sp.add_argument("--scales", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_eval_msssim)

    sp = sub.add_parser("diagnose", help="summarise and plot a diagnostics CSV")
    sp.add_argument("--run", required=True, help="run directory or diagnostics CSV")
    common(sp)
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "out_required", False) and not args.out:
        parser.print_usage(sys.stderr)
        print(f"deskgan {args.command}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"deskgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"deskgan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
