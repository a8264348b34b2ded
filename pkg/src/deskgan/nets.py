"""Progressive generator and critic.

Both networks are built for the whole stage plan up front; the active
depth is chosen per call through a :class:`FadeState`.  Every layer keeps
unit-normal raw weights and multiplies them by ``sqrt(2 / fan_in)`` at run
time (equalized learning rate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

CC, MLO = 0, 1
VIEW_NAMES = ("cc", "mlo")
N_LABELS = 2


def parse_view(view) -> int:
    if isinstance(view, str):
        key = view.strip().lower()
        if key in VIEW_NAMES:
            return VIEW_NAMES.index(key)
        raise ValueError(f"unknown view {view!r}; expected one of {VIEW_NAMES}")
    v = int(view)
    if v not in (CC, MLO):
        raise ValueError(f"invalid view label {view!r}")
    return v


def as_labels(labels, n: int) -> np.ndarray:
    if np.isscalar(labels) or isinstance(labels, str):
        labels = [labels] * n
    out = np.array([parse_view(v) for v in labels], dtype=np.int64)
    if out.shape != (n,):
        raise ValueError(f"expected {n} labels, got {out.shape[0]}")
    return out


@dataclass(frozen=True)
class Stage:
    height: int
    width: int
    channels: int


@dataclass
class StagePlan:
    stages: list[Stage]
    latent_dim: int = 128

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(*s) for s in self.stages]
        if not self.stages:
            raise ValueError("stage plan is empty")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        for s in self.stages:
            if s.channels <= 0 or s.height <= 0 or s.width <= 0:
                raise ValueError(f"degenerate stage {s}")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if (cur.height, cur.width) != (2 * prev.height, 2 * prev.width):
                raise ValueError(f"stage {cur} does not double {prev}")
            if cur.channels > prev.channels:
                raise ValueError("channels must be non-increasing with resolution")

    @classmethod
    def desk_default(cls) -> "StagePlan":
        return cls([Stage(8, 8, 128), Stage(16, 16, 128), Stage(32, 32, 64), Stage(64, 64, 32)], latent_dim=128)

    @classmethod
    def build(cls, base_hw: tuple[int, int], channels: list[int], latent_dim: int) -> "StagePlan":
        h, w = base_hw
        return cls([Stage(h << i, w << i, c) for i, c in enumerate(channels)], latent_dim)

    def __len__(self):
        return len(self.stages)

    def resolution(self, stage_index: int) -> tuple[int, int]:
        s = self.stages[stage_index]
        return s.height, s.width

    def to_dict(self) -> dict:
        return {"latent_dim": self.latent_dim,
                "stages": [[s.height, s.width, s.channels] for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls([Stage(*s) for s in d["stages"]], int(d["latent_dim"]))


@dataclass
class FadeState:
    stage_index: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        if self.stage_index < 0:
            raise ValueError("stage_index must be non-negative")
        self.alpha = min(1.0, max(0.0, float(self.alpha)))


def grow(plan: StagePlan, fade: FadeState) -> FadeState:
    """Advance to the next stage with alpha reset to 0.

    All stage parameters exist from initialisation, so nothing is touched.
    """
    if fade.stage_index + 1 >= len(plan):
        raise ValueError("already at the final stage")
    return FadeState(fade.stage_index + 1, 0.0)


def he_scale(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


class _Network:
    def __init__(self, plan: StagePlan, dtype=np.float32):
        self.plan = plan
        self.dtype = np.dtype(dtype)
        self.store = ParameterStore()
        self.scales: dict[str, float] = {}

    def _add(self, rng, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        self.store.add(name + ".w", rng.standard_normal(shape).astype(self.dtype))
        self.store.add(name + ".b", np.zeros(shape[0] if len(shape) == 4 else shape[1], self.dtype))
        self.scales[name] = he_scale(fan_in)

    def _w(self, name: str) -> Tensor:
        return ad.scale(self.store[name + ".w"], self.scales[name])

    def conv(self, name: str, x: Tensor) -> Tensor:
        return ad.conv2d(x, self._w(name), self.store[name + ".b"])

    def dense(self, name: str, x: Tensor) -> Tensor:
        y = ad.matmul(x, self._w(name))
        b = self.store[name + ".b"]
        return ad.add(y, ad.expand(ad.reshape(b, (1, b.shape[0])), y.shape))

    def _check_fade(self, fade: FadeState):
        if fade.stage_index >= len(self.plan):
            raise ValueError(f"stage {fade.stage_index} outside plan of {len(self.plan)} stages")

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.store.params.items()}


def _blend(old: Tensor, new: Tensor, alpha: float) -> Tensor:
    if alpha <= 0.0:
        return old
    if alpha >= 1.0:
        return new
    return ad.add(ad.scale(old, 1.0 - alpha), ad.scale(new, alpha))


class Generator(_Network):
    def __init__(self, plan: StagePlan, rng, dtype=np.float32):
        super().__init__(plan, dtype)
        st = plan.stages
        c0 = st[0].channels
        zin = plan.latent_dim + N_LABELS
        self._add(rng, "base.dense", (zin, c0 * st[0].height * st[0].width), zin)
        self._add(rng, "base.conv", (c0, c0, 3, 3), c0 * 9)
        for i in range(1, len(st)):
            cp, c = st[i - 1].channels, st[i].channels
            self._add(rng, f"s{i}.conv1", (c, cp, 3, 3), cp * 9)
            self._add(rng, f"s{i}.conv2", (c, c, 3, 3), c * 9)
        for i, s in enumerate(st):
            self._add(rng, f"togray{i}", (1, s.channels, 1, 1), s.channels)

    def _act(self, x: Tensor) -> Tensor:
        return ad.pixelnorm(ad.leaky_relu(x, 0.2))

    def _block(self, i: int, h: Tensor) -> Tensor:
        h = ad.up2(h)
        h = self._act(self.conv(f"s{i}.conv1", h))
        return self._act(self.conv(f"s{i}.conv2", h))

    def forward(self, z, labels, fade: FadeState) -> Tensor:
        self._check_fade(fade)
        z = ad.Tensor(z) if not isinstance(z, Tensor) else z
        if z.ndim != 2 or z.shape[1] != self.plan.latent_dim:
            raise ValueError(f"latent must be [N, {self.plan.latent_dim}], got {z.shape}")
        n = z.shape[0]
        lab = as_labels(labels, n)
        onehot = Tensor(np.eye(N_LABELS, dtype=z.dtype)[lab])
        s0 = self.plan.stages[0]
        h = ad.concat([ad.pixelnorm(z), onehot], axis=1)
        h = self.dense("base.dense", h)
        h = self._act(ad.reshape(h, (n, s0.channels, s0.height, s0.width)))
        h = self._act(self.conv("base.conv", h))
        k = fade.stage_index
        for i in range(1, k):
            h = self._block(i, h)
        if k == 0:
            return self.conv("togray0", h)
        old = ad.up2(self.conv(f"togray{k - 1}", h)) if fade.alpha < 1.0 else None
        new = self.conv(f"togray{k}", self._block(k, h)) if fade.alpha > 0.0 else None
        return _blend(old, new, fade.alpha)

    __call__ = forward


class Critic(_Network):
    def __init__(self, plan: StagePlan, rng, dtype=np.float32, mbstd: bool = True):
        super().__init__(plan, dtype)
        self.mbstd = mbstd
        st = plan.stages
        for i, s in enumerate(st):
            self._add(rng, f"fromgray{i}", (s.channels, 1, 1, 1), 1)
        for i in range(1, len(st)):
            cp, c = st[i - 1].channels, st[i].channels
            self._add(rng, f"s{i}.conv1", (c, c, 3, 3), c * 9)
            self._add(rng, f"s{i}.conv2", (cp, c, 3, 3), c * 9)
        c0 = st[0].channels
        cin = c0 + 1 if mbstd else c0
        self._add(rng, "base.conv", (c0, cin, 3, 3), cin * 9)
        flat = c0 * st[0].height * st[0].width
        self._add(rng, "base.dense", (flat, c0), flat)
        self._add(rng, "score", (c0, 1), c0)
        self._add(rng, "label", (c0, N_LABELS), c0)

    def _act(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(x, 0.2)

    def _block(self, i: int, h: Tensor) -> Tensor:
        h = self._act(self.conv(f"s{i}.conv1", h))
        h = self._act(self.conv(f"s{i}.conv2", h))
        return ad.down2(h)

    def forward(self, image, fade: FadeState) -> tuple[Tensor, Tensor]:
        """Return ``(score[N], label_logits[N, 2])``."""
        self._check_fade(fade)
        image = ad.Tensor(image) if not isinstance(image, Tensor) else image
        k = fade.stage_index
        want = self.plan.resolution(k)
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != want:
            raise ValueError(f"critic at stage {k} expects [N,1,{want[0]},{want[1]}], got {image.shape}")
        n = image.shape[0]
        if k == 0:
            h = self._act(self.conv("fromgray0", image))
        else:
            old = self._act(self.conv(f"fromgray{k - 1}", ad.down2(image))) if fade.alpha < 1.0 else None
            new = self._block(k, self._act(self.conv(f"fromgray{k}", image))) if fade.alpha > 0.0 else None
            h = _blend(old, new, fade.alpha)
        for i in range(k - 1, 0, -1):
            h = self._block(i, h)
        if self.mbstd:
            h = ad.minibatch_stddev(h)
        h = self._act(self.conv("base.conv", h))
        h = self._act(self.dense("base.dense", ad.reshape(h, (n, -1))))
        score = ad.reshape(self.dense("score", h), (n,))
        logits = self.dense("label", h)
        return score, logits

    __call__ = forward


def init_weights(plan: StagePlan, seed: int, dtype=np.float32, mbstd: bool = True) -> tuple[Generator, Critic]:
    """Unit-normal raw weights, zero biases; generator drawn first, then critic."""
    rng = np.random.default_rng(seed)
    return Generator(plan, rng, dtype), Critic(plan, rng, dtype, mbstd)
