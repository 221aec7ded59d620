"""Light-field sample loading, synthetic scenes and saliency map output.

Directory layout::

    root/aif/<id>.png          all-in-focus RGB image
    root/fs/<id>/NN.png        focal slices, NN = slice index
    root/gt/<id>.png           8-bit mask, > 127 is foreground
    root/<split>.txt           optional id list (one per line, # comments)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor
from .autodiff.ops import _interp_matrix
from .network import ModelConfig

IMAGE_SUFFIXES = (".png", ".pgm")


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


@dataclass
class Sample:
    id: str
    aif: np.ndarray  # 3 x H x W in [0, 1]
    focal_stack: np.ndarray  # T x 3 x H x W
    gt: np.ndarray  # H x W, values in {0, 1}
    slice_count_original: int

    def __post_init__(self):
        h, w = self.gt.shape
        if self.aif.shape[1:] != (h, w) or self.focal_stack.shape[2:] != (h, w):
            raise DatasetError(f"sample {self.id!r}: extents differ between aif, focal stack and gt")

    def tensors(self, dtype=np.float64) -> tuple[Tensor, Tensor, Tensor]:
        return (
            Tensor(self.aif, dtype=dtype),
            Tensor(self.focal_stack, dtype=dtype),
            Tensor(self.gt[None], dtype=dtype),
        )


@dataclass
class DatasetManifest:
    root: Path
    ids: list[str]
    split: str = "test"

    def __post_init__(self):
        self.root = Path(self.root)
        dupes = sorted({i for i in self.ids if self.ids.count(i) > 1})
        if dupes:
            raise DatasetError(f"duplicate sample ids in manifest: {dupes}")

    @classmethod
    def discover(cls, root, split: str = "test") -> "DatasetManifest":
        """Read ``root/<split>.txt`` if present, else every AiF image, sorted by id."""
        root = Path(root)
        listing = root / f"{split}.txt"
        if listing.exists():
            ids = [ln.split("#", 1)[0].strip() for ln in listing.read_text().splitlines()]
            return cls(root, [i for i in ids if i], split)
        aif_dir = root / "aif"
        if not aif_dir.is_dir():
            raise MissingFileError(f"no manifest {listing} and no image directory {aif_dir}")
        ids = sorted({p.stem for p in aif_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES})
        return cls(root, ids, split)


def _find_image(base: Path) -> Path:
    for suffix in IMAGE_SUFFIXES:
        p = base.with_name(base.name + suffix)
        if p.exists():
            return p
    raise MissingFileError(f"missing file: {base.with_name(base.name + IMAGE_SUFFIXES[0])}")


def _read(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a ``C x H x W`` float array to ``size x size``."""
    if img.shape[1:] == (size, size):
        return img
    ah = _interp_matrix(img.shape[1], size)
    aw = _interp_matrix(img.shape[2], size)
    return np.einsum("ih,chw,jw->cij", ah, img, aw)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == (size, size):
        return mask
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return mask[np.ix_(rows, cols)]


def pad_stack(slices: np.ndarray, T: int) -> np.ndarray:
    """Append all-zero slices until there are ``T``; more than ``T`` is an error."""
    n = slices.shape[0]
    if n > T:
        raise DatasetError(f"focal stack has {n} slices, more than T={T}")
    if n == T:
        return slices
    return np.concatenate([slices, np.zeros((T - n,) + slices.shape[1:], dtype=slices.dtype)])


def load_sample(manifest: DatasetManifest, sample_id: str, cfg: ModelConfig) -> Sample:
    if sample_id not in manifest.ids:
        raise DatasetError(f"sample {sample_id!r} is not in the manifest")
    root = manifest.root
    aif_path = _find_image(root / "aif" / sample_id)
    gt_path = _find_image(root / "gt" / sample_id)
    fs_dir = root / "fs" / sample_id
    if not fs_dir.is_dir():
        raise MissingFileError(f"missing file: {fs_dir}")
    slice_paths = [p for p in fs_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
    try:
        slice_paths.sort(key=lambda p: int(p.stem))
    except ValueError as exc:
        raise DatasetError(f"focal slice names in {fs_dir} must be integers: {exc}") from exc
    if not slice_paths:
        raise MissingFileError(f"missing file: no focal slices in {fs_dir}")

    aif = _read(aif_path, "RGB")
    gt = _read(gt_path, "L")
    slices = [_read(p, "RGB") for p in slice_paths]
    extents = {aif.shape[:2], gt.shape} | {s.shape[:2] for s in slices}
    if len(extents) != 1:
        raise DatasetError(f"sample {sample_id!r}: image extents differ: {sorted(extents)}")

    size = cfg.input_size
    aif = resize_image(aif.transpose(2, 0, 1) / 255.0, size)
    stack = np.stack([resize_image(s.transpose(2, 0, 1) / 255.0, size) for s in slices])
    mask = (resize_mask(gt, size) > 127).astype(np.float64)
    return Sample(sample_id, aif, pad_stack(stack, cfg.T), mask, len(slices))


def load_dataset(root, split: str, cfg: ModelConfig) -> list[Sample]:
    manifest = DatasetManifest.discover(root, split)
    return [load_sample(manifest, i, cfg) for i in manifest.ids]


# -- synthetic scenes -----------------------------------------------------------


def _shape_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.25, 0.75, 2) * size
    ry, rx = rng.uniform(0.12, 0.32, 2) * size
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _texture(rng, size: int, color: np.ndarray, smooth: float, amp: float) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal((size, size)), smooth, mode="wrap")
    noise /= np.abs(noise).max() + 1e-12
    return np.clip(color[:, None, None] + amp * noise[None], 0.0, 1.0)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    return np.stack([gaussian_filter(ch, sigma, mode="nearest") for ch in img])


def synthetic_scene(rng: np.random.Generator, sample_id: str, cfg: ModelConfig, band: float = 0.12) -> Sample:
    """One random scene: textured background plus 1-2 objects at random depths.

    Slice ``k`` focuses at depth ``k / (T - 1)``; a layer is sharp when its depth
    lies within ``band`` of the focus depth and Gaussian-blurred otherwise.
    """
    size = cfg.input_size
    while True:
        n_obj = int(rng.integers(1, 3))
        masks = [_shape_mask(rng, size) for _ in range(n_obj)]
        gt = np.logical_or.reduce(masks)
        if 0.02 <= gt.mean() <= 0.6:
            break
    bg_color = rng.uniform(0.2, 0.8, 3)
    layers = [_texture(rng, size, bg_color, size / 10, 0.25)]
    depths = [1.0]
    for _ in range(n_obj):
        color = rng.uniform(0.0, 1.0, 3)
        while np.abs(color - bg_color).max() < 0.35:
            color = rng.uniform(0.0, 1.0, 3)
        layers.append(_texture(rng, size, color, 1.0, 0.15))
        depths.append(float(rng.uniform(0.0, 0.7)))
    # nearer objects are painted last
    order = [0] + sorted(range(1, n_obj + 1), key=lambda i: -depths[i])
    label = np.zeros((size, size), dtype=int)
    for i in order[1:]:
        label[masks[i - 1]] = i

    def composite(images):
        out = np.empty_like(images[0])
        for i, im in enumerate(images):
            out[:, label == i] = im[:, label == i]
        return out

    aif = composite(layers)
    stack = []
    for k in range(cfg.T):
        focus = k / (cfg.T - 1) if cfg.T > 1 else 0.5
        blurred = [_blur(im, 3.0 * max(0.0, abs(d - focus) - band)) for im, d in zip(layers, depths)]
        stack.append(composite(blurred))
    return Sample(sample_id, aif, np.stack(stack), gt.astype(np.float64), cfg.T)


def generate_synthetic(seed: int, count: int, cfg: ModelConfig) -> list[Sample]:
    rng = np.random.default_rng(seed)
    width = max(3, len(str(count - 1)))
    return [synthetic_scene(rng, f"syn{i:0{width}d}", cfg) for i in range(count)]


# -- saliency map files -------------------------------------------------------------


def quantize(p: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255, rounding halves up."""
    p = np.asarray(p, dtype=np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("saliency values must lie in [0, 1]")
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def write_saliency_map(p, path) -> None:
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    arr = arr.reshape(arr.shape[-2:])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(arr), mode="L").save(path)


def read_saliency_map(path) -> np.ndarray:
    return _read(Path(path), "L").astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    return (_read(Path(path), "L") > 127).astype(np.float64)


def write_dataset(samples: Sequence[Sample], root, split: Optional[str] = None, n_slices: Optional[Iterable[int]] = None) -> None:
    """Write samples in the directory layout above (real slices only)."""
    root = Path(root)
    counts = list(n_slices) if n_slices is not None else [s.slice_count_original for s in samples]
    for s, n in zip(samples, counts):
        for sub in ("aif", "gt", f"fs/{s.id}"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantize(s.aif).transpose(1, 2, 0), mode="RGB").save(root / "aif" / f"{s.id}.png")
        Image.fromarray((s.gt * 255).astype(np.uint8), mode="L").save(root / "gt" / f"{s.id}.png")
        for k in range(n):
            img = quantize(s.focal_stack[k]).transpose(1, 2, 0)
            Image.fromarray(img, mode="RGB").save(root / "fs" / s.id / f"{k:02d}.png")
    if split is not None:
        (root / f"{split}.txt").write_text("".join(f"{s.id}\n" for s in samples))


def list_images(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(f"missing directory: {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

