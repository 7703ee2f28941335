"""Paired-image datasets: folder ingestion, synthetic pairs, augmentation.

Folder layouts supported for a split named ``train``/``test``:
  <root>/train/HE/*.png + <root>/train/IHC/*.png   (stem-matched)
  <root>/trainA/*.png   + <root>/trainB/*.png      (A/B convention)

Images decode to float tensors in [0, 1]; training code maps to [-1, 1]
with :func:`to_gan_range`. The synthetic generator renders tissue-like
blob layouts twice — once in a pink/purple palette, once with brown
"expression" overlays on the identical layout — so pairs are pixel-aligned
by construction and every dataset is a pure function of its spec.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .exceptions import DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# palette luma is kept far from the 0.68 threshold so structure masks are
# exactly recoverable from either rendering
_HE_BACKGROUND = (0.92, 0.78, 0.88)
_HE_NUCLEUS = (0.48, 0.33, 0.62)
_HE_NUCLEUS_EXPR = (0.36, 0.22, 0.52)
_IHC_BACKGROUND = (0.84, 0.83, 0.87)
_IHC_NUCLEUS = (0.52, 0.55, 0.66)
_IHC_NUCLEUS_EXPR = (0.42, 0.26, 0.13)
STRUCTURE_LUMA_THRESHOLD = 0.68


@dataclass
class PairedSample:
    """One aligned source/target image pair; tensors are (3, H, W) in [0, 1]."""

    he: torch.Tensor
    ihc: torch.Tensor
    key: str


def to_gan_range(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] -> [-1, 1]."""
    return x * 2.0 - 1.0


def from_gan_range(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1], clamped."""
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def load_image(path) -> torch.Tensor:
    """Decode an 8-bit image file to a (3, H, W) float tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path) -> None:
    """Write a (3, H, W) float tensor in [0, 1] as an 8-bit PNG/JPEG."""
    arr = (tensor.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round()
    Image.fromarray(arr.astype(np.uint8)).save(path)


def _stems(folder: Path) -> dict:
    return {
        p.stem: p
        for p in sorted(folder.iterdir())
        if p.suffix.lower() in IMAGE_EXTENSIONS
    }


class PairedImageFolder:
    """Lazy sequence of :class:`PairedSample` matched by filename stem."""

    def __init__(self, he_dir: Path, ihc_dir: Path, resize: Optional[int] = None):
        he_map, ihc_map = _stems(he_dir), _stems(ihc_dir)
        self.keys = sorted(set(he_map) & set(ihc_map))
        self.unmatched = sorted(set(he_map) ^ set(ihc_map))
        if self.unmatched:
            logger.warning(
                "skipping %d unmatched files under %s / %s: %s",
                len(self.unmatched), he_dir, ihc_dir, ", ".join(self.unmatched[:8]),
            )
        if not self.keys:
            raise DataError(f"no matched pairs between {he_dir} and {ihc_dir}")
        self._he = {k: he_map[k] for k in self.keys}
        self._ihc = {k: ihc_map[k] for k in self.keys}
        self.resize = resize

    def __len__(self) -> int:
        return len(self.keys)

    def _load(self, path) -> torch.Tensor:
        img = load_image(path)
        if self.resize is not None and img.shape[-2:] != (self.resize, self.resize):
            img = torch.nn.functional.interpolate(
                img[None], size=(self.resize, self.resize), mode="bilinear", align_corners=False
            )[0]
        return img

    def __getitem__(self, i: int) -> PairedSample:
        key = self.keys[i]
        return PairedSample(he=self._load(self._he[key]), ihc=self._load(self._ihc[key]), key=key)


def load_paired_dataset(root, split: str, resize: Optional[int] = None) -> PairedImageFolder:
    """Open a paired dataset split, auto-detecting the folder convention."""
    root = Path(root)
    candidates = [
        (root / split / "HE", root / split / "IHC"),
        (root / f"{split}A", root / f"{split}B"),
    ]
    for he_dir, ihc_dir in candidates:
        if he_dir.is_dir() and ihc_dir.is_dir():
            folder = PairedImageFolder(he_dir, ihc_dir, resize=resize)
            logger.info("loaded %d pairs from %s (+%d unmatched skipped)",
                        len(folder), root, len(folder.unmatched))
            return folder
    tried = ", ".join(f"{a}+{b}" for a, b in candidates)
    raise DataError(f"no paired layout found under {root} for split {split!r} (tried {tried})")


@dataclass
class SyntheticStainSpec:
    """Deterministic recipe for a synthetic paired dataset.

    The same spec always produces bit-identical images; per-sample streams
    are seeded with (seed, index).
    """

    seed: int = 7
    n_samples: int = 200
    image_size: int = 64
    blob_count_range: Tuple[int, int] = (6, 14)
    blob_radius_range: Tuple[float, float] = (0.05, 0.14)
    texture_amplitude: float = 0.04
    expression_rate: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticStainSpec":
        d = dict(d)
        for key in ("blob_count_range", "blob_radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _texture_field(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.standard_normal((max(size // 8, 2),) * 2)
    field = ndimage.zoom(coarse, size / coarse.shape[0], order=1)[:size, :size]
    limit = max(np.abs(field).max(), 1e-8)
    return field / limit  # in [-1, 1]


def synthesize_pair(
    spec: SyntheticStainSpec, index: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one (he, ihc, structure_mask) triple.

    Returns two (H, W, 3) uint8 images sharing an identical blob layout and
    the boolean nucleus mask. Expressing nuclei are visibly distinct in both
    renderings, so the source image fully determines the target.
    """
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    texture = _texture_field(rng, size) * spec.texture_amplitude
    he = np.empty((size, size, 3))
    ihc = np.empty((size, size, 3))
    for c in range(3):
        he[..., c] = _HE_BACKGROUND[c] * (1.0 + texture)
        ihc[..., c] = _IHC_BACKGROUND[c] * (1.0 + 0.5 * texture)

    n_blobs = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
    mask = np.zeros((size, size), dtype=bool)
    r_lo, r_hi = spec.blob_radius_range
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        rx = rng.uniform(r_lo, r_hi) * size
        ry = rng.uniform(r_lo, r_hi) * size
        theta = rng.uniform(0, np.pi)
        expressing = rng.random() < spec.expression_rate
        shade = rng.uniform(-0.03, 0.03)
        dx, dy = xx - cx, yy - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        blob = u * u + v * v <= 1.0
        mask |= blob
        he_color = _HE_NUCLEUS_EXPR if expressing else _HE_NUCLEUS
        ihc_color = _IHC_NUCLEUS_EXPR if expressing else _IHC_NUCLEUS
        for c in range(3):
            he[..., c][blob] = he_color[c] + shade
            ihc[..., c][blob] = ihc_color[c] + shade

    to_u8 = lambda img: (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    return to_u8(he), to_u8(ihc), mask


def structure_mask_from_image(img_u8: np.ndarray) -> np.ndarray:
    """Recover the nucleus mask of a synthetic rendering by luma threshold."""
    luma = img_u8.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return luma / 255.0 < STRUCTURE_LUMA_THRESHOLD


def generate_synthetic_dataset(spec: SyntheticStainSpec, out_dir, split: str = "train") -> Path:
    """Write the dataset to ``out_dir/<split>/{HE,IHC}`` plus a manifest."""
    out_dir = Path(out_dir)
    he_dir = out_dir / split / "HE"
    ihc_dir = out_dir / split / "IHC"
    try:
        he_dir.mkdir(parents=True, exist_ok=True)
        ihc_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directories under {out_dir}: {exc}") from exc
    width = max(4, len(str(spec.n_samples - 1)))
    for i in range(spec.n_samples):
        he, ihc, _ = synthesize_pair(spec, i)
        name = f"sample_{i:0{width}d}.png"
        Image.fromarray(he).save(he_dir / name)
        Image.fromarray(ihc).save(ihc_dir / name)
    manifest = {"format_version": 1, "split": split, "spec": spec.to_dict()}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info("wrote %d synthetic pairs to %s", spec.n_samples, out_dir)
    return out_dir


def random_crop_pair(
    sample: PairedSample, size: int, generator: torch.Generator
) -> PairedSample:
    """Apply one crop window to both images; identity when size == dims."""
    _, h, w = sample.he.shape
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image dims {h}x{w}")
    top = int(torch.randint(0, h - size + 1, (1,), generator=generator))
    left = int(torch.randint(0, w - size + 1, (1,), generator=generator))
    return PairedSample(
        he=sample.he[:, top : top + size, left : left + size],
        ihc=sample.ihc[:, top : top + size, left : left + size],
        key=sample.key,
    )


def random_hflip_pair(
    sample: PairedSample, generator: torch.Generator, p: float = 0.5
) -> PairedSample:
    """Flip both images horizontally with probability p (same decision)."""
    if float(torch.rand((), generator=generator)) < p:
        return PairedSample(
            he=sample.he.flip(-1), ihc=sample.ihc.flip(-1), key=sample.key
        )
    return sample
