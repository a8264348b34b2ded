"""Grayscale image IO, aspect-preserving preprocessing, phantoms and dataset iteration."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy import ndimage

from .autodiff import tnsr
from .nets import CC, MLO, VIEW_NAMES, parse_view


class ImageFormatError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray
    view: int = CC
    source: str = ""
    maxval: int = 255

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be a single-channel 2-D image")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        self.view = parse_view(self.view)


# ---------------------------------------------------------------------------
# PGM / PNG

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _read_pgm(buf: bytes) -> tuple[np.ndarray, int]:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if not m:
            raise ImageFormatError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ImageFormatError(f"unsupported PNM magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError("malformed PGM header") from None
    if not 0 < maxval < 65536 or width <= 0 or height <= 0:
        raise ImageFormatError("invalid PGM dimensions or maxval")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(buf) - pos < need:
        raise ImageFormatError("truncated PGM raster")
    raw = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    if raw.max(initial=0) > maxval:
        raise ImageFormatError("pixel exceeds maxval")
    return raw.astype(np.float64) / maxval, maxval


def _write_pgm(pixels: np.ndarray, maxval: int) -> bytes:
    h, w = pixels.shape
    q = np.rint(np.clip(pixels, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + q.astype(dtype).tobytes()


def load_image(path, view=CC) -> LabeledImage:
    """Read an 8/16-bit binary PGM or grayscale PNG, mapping values to [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        pixels, maxval = _read_pgm(path.read_bytes())
        return LabeledImage(pixels, view, str(path), maxval)
    if suffix == ".png":
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.load()
                mode = im.mode
                arr = np.asarray(im)
        except OSError as exc:
            raise ImageFormatError(f"cannot read {path}: {exc}") from None
        if mode == "L":
            return LabeledImage(arr.astype(np.float64) / 255.0, view, str(path), 255)
        if mode in ("I;16", "I;16B", "I"):
            return LabeledImage(arr.astype(np.float64) / 65535.0, view, str(path), 65535)
        raise ImageFormatError(f"{path}: PNG mode {mode} is not single-channel grayscale")
    raise ImageFormatError(f"unsupported image format {suffix!r}")


def save_image(image, path, maxval: int | None = None) -> None:
    """Write a PGM (8 or 16 bit, from ``maxval``) or an 8-bit grayscale PNG."""
    if isinstance(image, LabeledImage):
        pixels = image.pixels
        maxval = maxval or image.maxval
    else:
        pixels = np.asarray(image, dtype=np.float64)
        maxval = maxval or 255
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        path.write_bytes(_write_pgm(pixels, maxval))
    elif suffix == ".png":
        from PIL import Image

        q = np.rint(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
        Image.fromarray(q, mode="L").save(path)
    else:
        raise ImageFormatError(f"unsupported image format {suffix!r}")


# ---------------------------------------------------------------------------
# preprocessing


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages the input interval [i*r, (i+1)*r), r = n_in / n_out."""
    r = n_in / n_out
    edges = np.arange(n_out + 1) * r
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / r


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize(pixels: np.ndarray, out_h: int, out_w: int, area: bool) -> np.ndarray:
    if area:
        return _area_matrix(pixels.shape[0], out_h) @ pixels @ _area_matrix(pixels.shape[1], out_w).T
    return pixels[_nearest_index(pixels.shape[0], out_h)][:, _nearest_index(pixels.shape[1], out_w)]


def preprocess_shape(h: int, w: int, target_h: int, target_w: int) -> tuple[float, int, int]:
    """Scale factor and resized extents before padding."""
    if h <= 0 or w <= 0:
        raise ValueError("zero-sized image")
    sh, sw = h / target_h, w / target_w
    s = max(sh, sw)
    if sh >= sw:
        return s, target_h, min(target_w, max(1, int(round(w / s))))
    return s, min(target_h, max(1, int(round(h / s)))), target_w


def preprocess(image, target_h: int, target_w: int) -> np.ndarray:
    """Resize by the largest factor that fits, then zero-pad the trailing side.

    Shrinking uses exact area averaging; enlarging uses nearest replication.
    """
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.float64)
    if pixels.ndim != 2 or pixels.size == 0:
        raise ValueError("zero-sized or non-2-D input")
    h, w = pixels.shape
    s, nh, nw = preprocess_shape(h, w, target_h, target_w)
    if (nh, nw) == (h, w):
        body = pixels.astype(np.float64, copy=True)
    else:
        body = resize(pixels, nh, nw, area=s > 1)
    out = np.zeros((target_h, target_w), dtype=np.float64)
    out[:nh, :nw] = body
    return out


def center_fit(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-crop or zero-pad each axis independently to the requested extents."""
    out = np.zeros((out_h, out_w), dtype=np.float64)
    h, w = pixels.shape
    sy, dy = max(0, (h - out_h) // 2), max(0, (out_h - h) // 2)
    sx, dx = max(0, (w - out_w) // 2), max(0, (out_w - w) // 2)
    ch, cw = min(h, out_h), min(w, out_w)
    out[dy:dy + ch, dx:dx + cw] = pixels[sy:sy + ch, sx:sx + cw]
    return out


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomConfig:
    height: int = 64
    width: int = 64
    seed: int = 0
    texture_strength: float = 0.25
    p_calcification: float = 0.2
    p_marker: float = 0.1
    pectoral_intensity: float = 0.35
    p_mlo: float = 0.5

    def __post_init__(self):
        for name in ("p_calcification", "p_marker", "p_mlo"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.height < 8 or self.width < 8:
            raise ValueError("phantom resolution too small")


def render_phantom(cfg: PhantomConfig, index: int, view: int) -> np.ndarray:
    """Deterministic phantom ``index`` rendered in the given view.

    Both views of one index share anatomy and texture; MLO adds a brighter
    pectoral wedge in the top-left corner.  The chest wall is the left edge.
    """
    view = parse_view(view)
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a = w * rng.uniform(0.6, 0.9)
    b = h * rng.uniform(0.36, 0.47)
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h
    r2 = (xx / a) ** 2 + ((yy - cy) / b) ** 2
    breast = r2 <= 1.0

    tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(1.0, h / 20), mode="wrap")
    tex /= tex.std() + 1e-12
    density = rng.uniform(0.35, 0.55)
    # tissue thins towards the skin line
    falloff = 0.55 + 0.45 * np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    img = (density + cfg.texture_strength * 0.5 * tex) * falloff

    region = breast
    wedge_x = w * rng.uniform(0.3, 0.45)
    wedge_y = h * rng.uniform(0.55, 0.8)
    if view == MLO:
        wedge = (xx / wedge_x + yy / wedge_y) <= 1.0
        img = np.where(wedge, np.maximum(img, density) + cfg.pectoral_intensity, img)
        region = breast | wedge

    if rng.uniform() < cfg.p_calcification:
        cx0, cy0 = rng.uniform(0.2, 0.6) * a, cy + rng.uniform(-0.4, 0.4) * b
        for _ in range(rng.integers(3, 9)):
            px = int(np.clip(cx0 + rng.normal(0, 1.5), 0, w - 1))
            py = int(np.clip(cy0 + rng.normal(0, 1.5), 0, h - 1))
            img[py, px] = rng.uniform(0.95, 1.0)
    if rng.uniform() < cfg.p_marker:
        rad = max(2.0, h / 16)
        mx, my = rng.uniform(0.3, 0.6) * a, cy + rng.uniform(-0.3, 0.3) * b
        ring = np.abs(np.hypot(xx - mx, yy - my) - rad) < 0.6
        img = np.where(ring, 0.97, img)

    img = np.clip(img, 0.02, 1.0)
    return np.where(region, img, 0.0)


def phantom_view(cfg: PhantomConfig, index: int) -> int:
    rng = np.random.default_rng([cfg.seed, index, 1])
    return MLO if rng.uniform() < cfg.p_mlo else CC


def phantom_dataset(cfg: PhantomConfig, count: int, start: int = 0) -> Iterator[LabeledImage]:
    for i in range(start, start + count):
        view = phantom_view(cfg, i)
        yield LabeledImage(render_phantom(cfg, i, view), view, f"phantom:{cfg.seed}:{i}")


# ---------------------------------------------------------------------------
# datasets


def down2_np(x: np.ndarray) -> np.ndarray:
    dt = x.dtype.type
    return (x[..., 0::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 0::2] + x[..., 1::2, 1::2]) * dt(0.25)


class ImageDataset:
    """In-memory stack of equally sized grayscale images with view labels."""

    def __init__(self, images: np.ndarray, labels, sources=None):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 3:
            raise ValueError("images must be (N, H, W)")
        if len(images) == 0:
            raise ValueError("empty dataset")
        self.images = images
        self.labels = np.array([parse_view(v) for v in labels], dtype=np.int64)
        if self.labels.shape != (len(images),):
            raise ValueError("one label per image required")
        self.sources = list(sources) if sources is not None else [str(i) for i in range(len(images))]
        self._levels: dict[tuple[int, int], np.ndarray] = {(images.shape[1], images.shape[2]): images}

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def at_resolution(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._levels:
            cur = self.images
            while cur.shape[1] > h:
                if cur.shape[1] % 2 or cur.shape[2] % 2:
                    raise ValueError(f"cannot reach {h}x{w} from {self.resolution} by halving")
                cur = down2_np(cur)
            if cur.shape[1:] != key:
                raise ValueError(f"cannot reach {h}x{w} from {self.resolution} by halving")
            self._levels[key] = cur
        return self._levels[key]

    def batch(self, indices, resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        imgs = self.at_resolution(*resolution)[indices]
        return imgs[:, None, :, :], self.labels[indices]

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(self.images[indices], self.labels[indices], [self.sources[i] for i in indices])

    @classmethod
    def from_items(cls, items, exclude: Callable[[LabeledImage], bool] | None = None) -> "ImageDataset":
        kept = [it for it in items if not (exclude and exclude(it))]
        if not kept:
            raise ValueError("empty dataset")
        return cls(np.stack([it.pixels for it in kept]), [it.view for it in kept], [it.source for it in kept])

    @classmethod
    def from_phantoms(cls, cfg: PhantomConfig, count: int, start: int = 0, exclude=None) -> "ImageDataset":
        return cls.from_items(phantom_dataset(cfg, count, start), exclude)

    def save_cache(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tnsr.save(d / "images.tnsr", self.images)
        tnsr.save(d / "labels.tnsr", self.labels.astype(np.float32))

    @classmethod
    def load_cache(cls, directory) -> "ImageDataset":
        d = Path(directory)
        return cls(tnsr.load(d / "images.tnsr"), tnsr.load(d / "labels.tnsr").astype(np.int64))


def read_manifest(path) -> list[tuple[Path, int]]:
    """``path,view`` rows (header optional); paths are relative to the manifest."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            if rec[0].strip().lower() == "path":
                continue
            if len(rec) < 2:
                raise ValueError(f"{path}: expected 'path,view' rows")
            rows.append((path.parent / rec[0].strip(), parse_view(rec[1])))
    return rows


def load_directory(root, target: tuple[int, int] | None = None, square: int | None = None,
                   exclude: Callable[[LabeledImage], bool] | None = None) -> ImageDataset:
    """Load images listed in ``root/manifest.csv`` (or every PGM/PNG in ``root``, labelled CC).

    ``target`` applies :func:`preprocess`; ``square`` then center-fits to a
    square of that side.
    """
    root = Path(root)
    manifest = root / "manifest.csv"
    if manifest.exists():
        entries = read_manifest(manifest)
    else:
        entries = [(p, CC) for p in sorted(root.iterdir()) if p.suffix.lower() in (".pgm", ".png")]
    items = []
    for p, view in entries:
        it = load_image(p, view)
        if target is not None:
            it = LabeledImage(preprocess(it, *target), it.view, it.source, it.maxval)
        if square is not None:
            it = LabeledImage(center_fit(it.pixels, square, square), it.view, it.source, it.maxval)
        items.append(it)
    if not items:
        raise ValueError(f"no images found in {root}")
    return ImageDataset.from_items(items, exclude)


@dataclass
class EpochIterator:
    """Deterministic shuffled index stream; each epoch is a fresh seeded permutation."""

    n_items: int
    seed: int = 0
    epoch: int = 0
    pos: int = 0
    _perm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_items <= 0:
            raise ValueError("empty dataset")

    def permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n_items)

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._perm is None:
                self._perm = self.permutation(self.epoch)
            chunk = self._perm[self.pos:self.pos + k]
            out.append(chunk)
            k -= len(chunk)
            self.pos += len(chunk)
            if self.pos >= self.n_items:
                self.epoch += 1
                self.pos = 0
                self._perm = None
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def state(self) -> dict:
        return {"n_items": self.n_items, "seed": self.seed, "epoch": self.epoch, "pos": self.pos}

    @classmethod
    def from_state(cls, st: dict) -> "EpochIterator":
        return cls(int(st["n_items"]), int(st["seed"]), int(st["epoch"]), int(st["pos"]))


def dataset_iter(dataset: ImageDataset, batch_size: int, resolution: tuple[int, int], seed: int = 0
                 ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless ``(images[N,1,H,W], labels[N])`` batches at ``resolution``."""
    it = EpochIterator(len(dataset), seed)
    while True:
        yield dataset.batch(it.take(batch_size), resolution)


__all__ = [
    "CC", "MLO", "VIEW_NAMES", "ImageFormatError", "LabeledImage", "load_image", "save_image",
    "preprocess", "preprocess_shape", "center_fit", "PhantomConfig", "render_phantom", "phantom_dataset",
    "ImageDataset", "EpochIterator", "dataset_iter", "load_directory", "read_manifest",
]
