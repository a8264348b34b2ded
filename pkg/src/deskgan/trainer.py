"""Progressive WGAN-GP training loop, checkpoints and checkpoint selection."""

from __future__ import annotations

import json
import logging
import math
import shutil
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, adam_step, tnsr
from .dataio import EpochIterator, ImageDataset, save_image
from .metrics import SWDConfig, swd_multiscale
from .nets import FadeState, Generator, StagePlan, init_weights
from .objectives import (
    GradientPenaltyConfig,
    LatentSampler,
    drift_penalty,
    gradient_penalty,
    label_cross_entropy,
    monitored_bce,
    sample_interpolates,
    wgan_losses,
)

log = logging.getLogger(__name__)

DIAG_COLUMNS = ("images_seen", "critic_loss", "d_bce", "grad_mag", "label_ce_real", "label_ce_fake")


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the run can restart from its last checkpoint."""


@dataclass
class StageSchedule:
    images_stable: int
    images_fade: int
    batch_size: int


@dataclass
class TrainSchedule:
    stages: list[StageSchedule]
    learning_rate: float = 0.0015
    n_critic_ramp: list[tuple[int, int]] = field(default_factory=lambda: [(0, 1), (1, 1), (2, 3), (3, 5)])
    total_images_target: int | None = None
    seed: int = 0
    log_interval: int = 1000
    sample_interval: int = 10000
    checkpoint_interval: int = 10000

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSchedule) else StageSchedule(*s) for s in self.stages]
        self.n_critic_ramp = sorted((int(a), int(b)) for a, b in self.n_critic_ramp)
        if not self.n_critic_ramp or self.n_critic_ramp[0][0] != 0:
            raise ValueError("n_critic ramp must start at stage 0")
        prev = 1
        for _, n in self.n_critic_ramp:
            if not 1 <= n <= 5:
                raise ValueError("n_critic must lie in [1, 5]")
            if n < prev:
                raise ValueError("n_critic must be non-decreasing over stages")
            prev = n
        for s in self.stages:
            if s.batch_size <= 0 or s.images_stable < 0 or s.images_fade < 0:
                raise ValueError(f"invalid stage schedule {s}")

    @classmethod
    def desk_default(cls, seed: int = 0) -> "TrainSchedule":
        sizes = [16, 16, 8, 4]
        return cls([StageSchedule(20000, 20000, b) for b in sizes], seed=seed)

    def n_critic(self, stage: int) -> int:
        n = 1
        for idx, val in self.n_critic_ramp:
            if idx <= stage:
                n = val
        return n

    def fade_images(self, stage: int) -> int:
        return 0 if stage == 0 else self.stages[stage].images_fade

    def alpha(self, stage: int, phase: str, phase_images: int) -> float:
        if phase == "stable":
            return 1.0
        span = self.fade_images(stage)
        return 1.0 if span <= 0 else min(1.0, phase_images / span)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_critic_ramp"] = [list(x) for x in self.n_critic_ramp]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        d = dict(d)
        d["stages"] = [StageSchedule(**s) for s in d["stages"]]
        d["n_critic_ramp"] = [tuple(x) for x in d["n_critic_ramp"]]
        return cls(**d)


@dataclass
class LossConfig:
    gp: GradientPenaltyConfig = field(default_factory=GradientPenaltyConfig)
    label_weight: float = 1.0
    drift: float = 0.001
    latent: str = "normal"
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        d["gp"] = GradientPenaltyConfig(**d["gp"])
        return cls(**d)


@dataclass
class DiagnosticsRow:
    images_seen: int
    critic_loss: float
    d_bce: float
    grad_mag: float
    label_ce_real: float
    label_ce_fake: float
    flagged: bool = False

    def csv_line(self) -> str:
        vals = [str(self.images_seen)] + [repr(float(getattr(self, c))) for c in DIAG_COLUMNS[1:]]
        return ",".join(vals)


class _Accumulator:
    KEYS = ("critic_loss", "d_bce", "grad_mag", "label_ce_real", "label_ce_fake")

    def __init__(self, sums=None, counts=None):
        self.sums = dict(sums) if sums else {k: 0.0 for k in self.KEYS}
        self.counts = dict(counts) if counts else {k: 0 for k in self.KEYS}

    def add(self, key: str, value: float):
        self.sums[key] += float(value)
        self.counts[key] += 1

    def row(self, images_seen: int) -> DiagnosticsRow:
        vals = {k: (self.sums[k] / self.counts[k] if self.counts[k] else float("nan")) for k in self.KEYS}
        flagged = not all(math.isfinite(v) for v in vals.values())
        self.sums = {k: 0.0 for k in self.KEYS}
        self.counts = {k: 0 for k in self.KEYS}
        return DiagnosticsRow(images_seen, flagged=flagged, **vals)


@dataclass
class TrainState:
    plan: StagePlan
    gen: Generator
    critic: object
    schedule: TrainSchedule
    losses: LossConfig
    rng: np.random.Generator
    data: EpochIterator
    stage: int = 0
    phase: str = "stable"
    phase_images: int = 0
    images_seen: int = 0
    critic_updates: int = 0
    gen_updates: int = 0
    restarts: int = 0
    done: bool = False
    rows: list[DiagnosticsRow] = field(default_factory=list)
    acc: _Accumulator = field(default_factory=_Accumulator)

    @property
    def fade(self) -> FadeState:
        return FadeState(self.stage, self.schedule.alpha(self.stage, self.phase, self.phase_images))

    @property
    def batch_size(self) -> int:
        return self.schedule.stages[self.stage].batch_size

    @property
    def resolution(self) -> tuple[int, int]:
        return self.plan.resolution(self.stage)


def new_state(plan: StagePlan, schedule: TrainSchedule, n_items: int, losses: LossConfig | None = None,
              mbstd: bool = True) -> TrainState:
    if len(schedule.stages) != len(plan):
        raise ValueError("schedule and stage plan disagree on the number of stages")
    gen, critic = init_weights(plan, schedule.seed, mbstd=mbstd)
    return TrainState(plan, gen, critic, schedule, losses or LossConfig(),
                      rng=np.random.default_rng([schedule.seed, 1]),
                      data=EpochIterator(n_items, schedule.seed))


@contextmanager
def _frozen(net):
    params = net.store.tensors()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def to_model_range(x: np.ndarray) -> np.ndarray:
    return (x * np.float32(2.0) - np.float32(1.0)).astype(np.float32)


def to_image_range(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)


Fetch = Callable[[int, tuple[int, int]], tuple[np.ndarray, np.ndarray]]
Hook = Callable[[str, np.ndarray], None]


def dataset_fetch(state: TrainState, dataset: ImageDataset) -> Fetch:
    def fetch(n, resolution):
        return dataset.batch(state.data.take(n), resolution)

    return fetch


def _critic_update(state: TrainState, fetch: Fetch, on_discriminate: Hook | None):
    G, D, cfg = state.gen, state.critic, state.losses
    fade = state.fade
    bs = state.batch_size
    x01, lab_real = fetch(bs, state.resolution)
    x_real = to_model_range(x01)
    sampler = LatentSampler(state.plan.latent_dim, cfg.latent)
    z = sampler.sample(state.rng, bs)
    lab_fake = state.rng.integers(0, 2, bs)
    with ad.no_grad():
        x_fake = G(z, lab_fake, fade).data
    if on_discriminate:
        on_discriminate("real", x_real)
        on_discriminate("fake", x_fake)
    f_real, logit_real = D(ad.Tensor(x_real), fade)
    f_fake, _ = D(ad.Tensor(x_fake), fade)
    w_loss, _ = wgan_losses(f_real, f_fake)
    x_hat = sample_interpolates(x_real, x_fake, state.rng)
    pen, norms = gradient_penalty(lambda x: D(x, fade)[0], x_hat, cfg.gp)
    ce_real = label_cross_entropy(logit_real, lab_real)
    loss = ad.add(w_loss, pen)
    if cfg.drift:
        loss = ad.add(loss, drift_penalty(f_real, cfg.drift))
    if cfg.label_weight:
        loss = ad.add(loss, ad.scale(ce_real, cfg.label_weight))
    names = D.store.names()
    grads = ad.grad(loss, D.store.tensors())
    adam_step(D.store, dict(zip(names, grads)), state.schedule.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state.critic_updates += 1
    state.images_seen += bs
    state.phase_images += bs
    acc = state.acc
    acc.add("critic_loss", loss.item())
    acc.add("d_bce", monitored_bce(f_real, f_fake))
    acc.add("grad_mag", float(np.mean(norms.data)))
    acc.add("label_ce_real", ce_real.item())


def _generator_update(state: TrainState):
    G, D, cfg = state.gen, state.critic, state.losses
    fade = state.fade
    bs = state.batch_size
    z = LatentSampler(state.plan.latent_dim, cfg.latent).sample(state.rng, bs)
    lab = state.rng.integers(0, 2, bs)
    with _frozen(D):
        x_fake = G(z, lab, fade)
        f_fake, logits = D(x_fake, fade)
        g_loss = ad.neg(ad.mean(f_fake))
        ce_fake = label_cross_entropy(logits, lab)
        loss = ad.add(g_loss, ad.scale(ce_fake, cfg.label_weight)) if cfg.label_weight else g_loss
        grads = ad.grad(loss, G.store.tensors())
    adam_step(G.store, dict(zip(G.store.names(), grads)), state.schedule.learning_rate,
              cfg.beta1, cfg.beta2, cfg.adam_eps)
    state.gen_updates += 1
    state.acc.add("label_ce_fake", ce_fake.item())


def train_step(state: TrainState, fetch: Fetch, on_discriminate: Hook | None = None) -> DiagnosticsRow | None:
    """``n_critic`` critic updates on fresh real batches, then one generator update.

    Returns a diagnostics row when a logging boundary was crossed.
    Real and generated images are always scored in separate batches.
    """
    before = state.images_seen
    try:
        for _ in range(state.schedule.n_critic(state.stage)):
            _critic_update(state, fetch, on_discriminate)
        _generator_update(state)
    except NonFiniteError as exc:
        raise TrainingDiverged(str(exc)) from exc
    interval = state.schedule.log_interval
    if interval and state.images_seen // interval > before // interval:
        row = state.acc.row(state.images_seen)
        state.rows.append(row)
        return row
    return None


def advance_phase(state: TrainState) -> None:
    """Move to the next phase once the current one has shown its image budget."""
    sched = state.schedule
    if sched.total_images_target is not None and state.images_seen >= sched.total_images_target:
        state.done = True
    while not state.done:
        st = sched.stages[state.stage]
        budget = st.images_stable if state.phase == "stable" else sched.fade_images(state.stage)
        if state.phase_images < budget:
            return
        if state.phase == "fade":
            state.phase, state.phase_images = "stable", 0
        elif state.stage + 1 < len(state.plan):
            state.stage += 1
            state.phase, state.phase_images = "fade", 0
        else:
            state.done = True


# ---------------------------------------------------------------------------
# checkpoints


def _save_store(directory: Path, prefix: str, store) -> None:
    d = directory / prefix
    d.mkdir(parents=True, exist_ok=True)
    for key, arr in store.state_arrays().items():
        kind, name = key.split("/", 1)
        tnsr.save(d / f"{kind}.{name}.tnsr", arr)


def _load_store(directory: Path, prefix: str, store) -> None:
    d = directory / prefix
    arrays = {}
    for name in store.names():
        for kind in ("param", "adam_m", "adam_v"):
            arrays[f"{kind}/{name}"] = tnsr.load(d / f"{kind}.{name}.tnsr")
    store.load_state_arrays(arrays, store.step)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(st: dict) -> np.random.Generator:
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def save_checkpoint(state: TrainState, out_dir) -> Path:
    """Write ``ckpt_<images_seen>/`` with a JSON manifest and TNSR1 tensors."""
    path = Path(out_dir) / f"ckpt_{state.images_seen}"
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    _save_store(tmp, "gen", state.gen.store)
    _save_store(tmp, "critic", state.critic.store)
    manifest = {
        "format": 1,
        "plan": state.plan.to_dict(),
        "fade": {"stage_index": state.fade.stage_index, "alpha": state.fade.alpha},
        "schedule": state.schedule.to_dict(),
        "losses": state.losses.to_dict(),
        "mbstd": state.critic.mbstd,
        "gen_scales": state.gen.scales,
        "critic_scales": state.critic.scales,
        "stage": state.stage,
        "phase": state.phase,
        "phase_images": state.phase_images,
        "images_seen": state.images_seen,
        "critic_updates": state.critic_updates,
        "gen_updates": state.gen_updates,
        "gen_adam_step": state.gen.store.step,
        "critic_adam_step": state.critic.store.step,
        "restarts": state.restarts,
        "done": state.done,
        "rng": _rng_state(state.rng),
        "data": state.data.state(),
        "acc": {"sums": state.acc.sums, "counts": state.acc.counts},
        "rows": [asdict(r) for r in state.rows],
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    m = json.loads((path / "manifest.json").read_text())
    plan = StagePlan.from_dict(m["plan"])
    schedule = TrainSchedule.from_dict(m["schedule"])
    gen, critic = init_weights(plan, 0, mbstd=m["mbstd"])
    gen.scales.update(m["gen_scales"])
    critic.scales.update(m["critic_scales"])
    gen.store.step = int(m["gen_adam_step"])
    critic.store.step = int(m["critic_adam_step"])
    _load_store(path, "gen", gen.store)
    _load_store(path, "critic", critic.store)
    state = TrainState(
        plan, gen, critic, schedule, LossConfig.from_dict(m["losses"]),
        rng=_rng_from_state(m["rng"]), data=EpochIterator.from_state(m["data"]),
        stage=m["stage"], phase=m["phase"], phase_images=m["phase_images"], images_seen=m["images_seen"],
        critic_updates=m["critic_updates"], gen_updates=m["gen_updates"], restarts=m["restarts"],
        done=m["done"], rows=[DiagnosticsRow(**r) for r in m["rows"]],
        acc=_Accumulator(m["acc"]["sums"], m["acc"]["counts"]),
    )
    fade = m["fade"]
    if (fade["stage_index"], fade["alpha"]) != (state.fade.stage_index, state.fade.alpha):
        raise ValueError(f"{path}: fade state inconsistent with schedule position")
    return state


def load_generator(path) -> tuple[Generator, FadeState]:
    """Generator and the fade state it was saved at."""
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    plan = StagePlan.from_dict(m["plan"])
    gen, _ = init_weights(plan, 0, mbstd=m["mbstd"])
    gen.scales.update(m["gen_scales"])
    _load_store(path, "gen", gen.store)
    return gen, FadeState(**m["fade"])


def list_checkpoints(out_dir) -> list[Path]:
    found = [p for p in Path(out_dir).glob("ckpt_*") if p.is_dir() and not p.name.endswith(".tmp")]
    return sorted(found, key=lambda p: int(p.name.split("_")[1]))


def write_diagnostics_csv(rows: Sequence[DiagnosticsRow], path) -> None:
    lines = [",".join(DIAG_COLUMNS)] + [r.csv_line() for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# sampling


def generate(gen: Generator, fade: FadeState, count: int, labels, seed: int, latent: str = "normal",
             batch: int = 32) -> np.ndarray:
    """``count`` images in [0, 1] as ``(count, H, W)`` float64."""
    sampler = LatentSampler(gen.plan.latent_dim, latent)
    z = sampler.sample(np.random.default_rng(seed), count)
    return generate_from_latents(gen, fade, z, labels, batch)


def generate_from_latents(gen: Generator, fade: FadeState, z: np.ndarray, labels, batch: int = 32) -> np.ndarray:
    count = len(z)
    labels = np.broadcast_to(np.asarray(labels), (count,)) if np.ndim(labels) == 0 else np.asarray(labels)
    h, w = gen.plan.resolution(fade.stage_index)
    out = np.zeros((count, h, w))
    with ad.no_grad():
        for i in range(0, count, batch):
            x = gen(z[i:i + batch].astype(gen.dtype), labels[i:i + batch], fade).data
            out[i:i + batch] = to_image_range(x[:, 0])
    return out


def image_grid(images: np.ndarray, rows: int, cols: int, pad: int = 1) -> np.ndarray:
    n, h, w = images.shape
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad))
    for k in range(min(n, rows * cols)):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = images[k]
    return grid


def write_sample_grids(gen: Generator, fade: FadeState, out_dir, tag: str, seed: int,
                       rows: int = 6, cols: int = 5) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for view, name in ((0, "cc"), (1, "mlo")):
        imgs = generate(gen, fade, rows * cols, view, seed)
        p = out / f"grid_{tag}_{name}.png"
        save_image(image_grid(imgs, rows, cols), p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# run


@dataclass
class RunReport:
    out_dir: Path
    checkpoints: list[Path]
    images_seen: int
    critic_updates: int
    gen_updates: int
    restarts: int
    rows: list[DiagnosticsRow]


def _crossed(before: int, after: int, interval: int) -> bool:
    return bool(interval) and after // interval > before // interval


def run(schedule: TrainSchedule, dataset: ImageDataset, out_dir, plan: StagePlan | None = None,
        losses: LossConfig | None = None, resume: str | Path | None = None, mbstd: bool = True,
        max_steps: int | None = None, max_restarts: int = 5, write_samples: bool = True,
        on_discriminate: Hook | None = None) -> RunReport:
    """Train through every fade/stable phase of ``schedule``.

    The dataset is held at full resolution and halved to each stage's
    resolution.  ``resume`` continues bit-exactly from a checkpoint.
    ``max_steps`` stops after that many train steps (a final checkpoint is
    still written).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume)
    else:
        plan = plan or StagePlan.desk_default()
        state = new_state(plan, schedule, len(dataset), losses, mbstd)
    top = state.plan.resolution(len(state.plan) - 1)
    if dataset.resolution != top:
        raise ValueError(f"dataset resolution {dataset.resolution} does not match final stage {top}")
    if len(dataset) != state.data.n_items:
        raise ValueError("dataset size differs from the checkpoint's data stream")

    checkpoints = [save_checkpoint(state, out)] if resume is None else [Path(resume)]
    last_good = checkpoints[-1]
    steps = 0
    advance_phase(state)
    while not state.done and (max_steps is None or steps < max_steps):
        before = state.images_seen
        try:
            train_step(state, dataset_fetch(state, dataset), on_discriminate)
        except TrainingDiverged as exc:
            if state.restarts >= max_restarts:
                raise
            log.warning("%s; rolling back to %s", exc, last_good.name)
            restarts = state.restarts + 1
            state = load_checkpoint(last_good)
            state.restarts = restarts
            state.rng = np.random.default_rng([state.schedule.seed, 1, restarts])
            continue
        steps += 1
        advance_phase(state)
        after = state.images_seen
        if write_samples and _crossed(before, after, state.schedule.sample_interval):
            write_sample_grids(state.gen, state.fade, out / "samples", f"{after:08d}", state.schedule.seed)
        if _crossed(before, after, state.schedule.checkpoint_interval) and not state.done:
            last_good = save_checkpoint(state, out)
            checkpoints.append(last_good)
    if checkpoints[-1].name != f"ckpt_{state.images_seen}":
        checkpoints.append(save_checkpoint(state, out))
    write_diagnostics_csv(state.rows, out / "diagnostics.csv")
    if write_samples:
        write_sample_grids(state.gen, state.fade, out / "samples", "final", state.schedule.seed)
    return RunReport(out, checkpoints, state.images_seen, state.critic_updates, state.gen_updates,
                     state.restarts, state.rows)


# ---------------------------------------------------------------------------
# checkpoint selection


def _upsample_to(images: np.ndarray, h: int, w: int) -> np.ndarray:
    while images.shape[1] < h:
        images = images.repeat(2, axis=1).repeat(2, axis=2)
    if images.shape[1:] != (h, w):
        raise ValueError("checkpoint resolution does not divide the evaluation resolution")
    return images


def checkpoint_swd(path, eval_images: np.ndarray, n_samples: int = 256, seed: int = 0,
                   swd_cfg: SWDConfig | None = None) -> float:
    gen, fade = load_generator(path)
    labels = np.arange(n_samples) % 2
    fake = generate(gen, fade, n_samples, labels, seed)
    ev = np.asarray(eval_images, dtype=np.float64)
    ev = ev[:, 0] if ev.ndim == 4 else ev
    fake = _upsample_to(fake, *ev.shape[1:])
    return swd_multiscale(ev, fake, swd_cfg, np.random.default_rng(seed)).swd_mean


def select_checkpoint(checkpoints: Sequence, eval_images: np.ndarray, n_samples: int = 256, seed: int = 0,
                      swd_cfg: SWDConfig | None = None) -> tuple[Path, list[float]]:
    """Checkpoint with the lowest mean multi-scale SWD (ties go to the later one)."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    scores = [checkpoint_swd(p, eval_images, n_samples, seed, swd_cfg) for p in checkpoints]
    best = 0
    for i, s in enumerate(scores):
        if s <= scores[best]:
            best = i
    return Path(checkpoints[best]), scores
