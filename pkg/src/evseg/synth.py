"""Synthetic blob segmentation corpus and the Gaussian-noise test protocol."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imageio

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

FG_FRACTION = (0.05, 0.6)


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # one-hot (C, H, W)
    id: str
    blur_width: float = 0.0

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.mask, axis=0)


@dataclass
class NoiseSpec:
    mean: float = 0.0
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.1 <= self.sigma <= 0.4:
            raise ValueError(f"noise sigma {self.sigma} outside the protocol range [0.1, 0.4]")


def onehot(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    return np.moveaxis(np.eye(num_classes)[labels], -1, 0)


def _blob_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    while True:
        fieldv = np.zeros((h, w))
        for _ in range(rng.integers(1, 4)):
            cr, cc = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            s = rng.uniform(0.08, 0.2) * scale
            fieldv += np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * s * s))
        mask = fieldv > 0.5
        if FG_FRACTION[0] <= mask.mean() <= FG_FRACTION[1]:
            return mask


def gen_blob_sample(seed: int, h: int = 64, w: int = 64, blur_width: float = 1.0,
                    sample_id: str | None = None) -> SegSample:
    """1-3 thresholded Gaussian bumps as foreground; a two-level intensity
    image blurred by ``blur_width`` (Gaussian sigma, pixels) makes the edge
    ambiguous. Gray content is replicated to 3 channels."""
    if h < 16 or w < 16:
        raise ValueError("images must be at least 16x16")
    rng = np.random.default_rng(seed)
    mask = _blob_mask(rng, h, w)
    bg = rng.uniform(0.15, 0.45)
    fg = bg + rng.uniform(0.25, 0.45)
    gray = np.where(mask, fg, bg)
    if blur_width > 0:
        gray = gaussian_filter(gray, blur_width, mode="nearest")
    image = np.repeat(gray[None], 3, axis=0)
    return SegSample(image, onehot(mask.astype(np.int64)), sample_id or f"blob-{seed}", float(blur_width))


def add_noise(sample: SegSample, spec: NoiseSpec) -> SegSample:
    """clamp(image + N(mean, sigma^2), 0, 1); the mask is untouched."""
    rng = np.random.default_rng(spec.seed)
    noisy = np.clip(sample.image + rng.normal(spec.mean, spec.sigma, size=sample.image.shape), 0.0, 1.0)
    return replace(sample, image=noisy)


def sample_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, _SPLIT_CODE[split], index])
    return int(ss.generate_state(1)[0])


def split_sizes(n_train: int) -> dict[str, int]:
    return {"train": n_train, "val": max(4, n_train // 4), "test": max(4, n_train // 4)}


def make_corpus(n_train: int, seed: int = 0, size: int = 64,
                blur_range: tuple[float, float] = (0.5, 2.0)) -> dict[str, list[SegSample]]:
    """Disjoint train/val/test splits; every sample is keyed by (seed, split, index)."""
    corpus = {}
    for split, n in split_sizes(n_train).items():
        samples = []
        for i in range(n):
            s = sample_seed(seed, split, i)
            blur = float(np.random.default_rng(s ^ 0x5EED).uniform(*blur_range))
            samples.append(gen_blob_sample(s, size, size, blur, f"{split}-{i:04d}"))
        corpus[split] = samples
    return corpus


def noisy_copies(samples: list[SegSample], sigma: float, seed: int = 0,
                 per_image_range: tuple[float, float] | None = None) -> list[SegSample]:
    """Apply the noise protocol per image. With ``per_image_range`` each
    image draws its own sigma from that interval instead of using ``sigma``."""
    out = []
    for i, s in enumerate(samples):
        sig = sigma
        if per_image_range is not None:
            sig = float(np.random.default_rng([seed, i, 1]).uniform(*per_image_range))
        out.append(add_noise(s, NoiseSpec(0.0, sig, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))))
    return out


# ---------------------------------------------------------------- persistence


def save_corpus(root, corpus: dict[str, list[SegSample]], image_format: str = "f32") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "index.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "split", "blur_width", "image", "mask"])
        for split, samples in corpus.items():
            for s in samples:
                if image_format == "f32":
                    img_name = f"{s.id}.f32"
                    imageio.write_f32(root / img_name, s.image)
                else:
                    img_name = imageio.write_image_pgms(root / s.id, s.image)[0].name
                mask_name = f"{s.id}_mask.pgm"
                imageio.write_pgm(root / mask_name, s.labels.astype(np.uint8), maxval=255)
                wr.writerow([s.id, split, repr(s.blur_width), img_name, mask_name])
    return root


def load_corpus(root, num_classes: int = 2) -> dict[str, list[SegSample]]:
    root = Path(root)
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"{index} not found")
    corpus: dict[str, list[SegSample]] = {}
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            image = imageio.read_image(root / row["image"])
            labels = imageio.read_pgm(root / row["mask"])
            sample = SegSample(image, onehot(labels, num_classes), row["id"], float(row["blur_width"]))
            corpus.setdefault(row["split"], []).append(sample)
    return corpus


def load_real_dataset(name: str, root) -> dict[str, list[SegSample]]:
    """Loader slot for the public polyp / skin-lesion datasets.

    Not provided: convert such data to the ``index.csv`` layout read by
    :func:`load_corpus` instead.
    """
    raise NotImplementedError(f"no bundled loader for {name!r}; convert it to the index.csv corpus layout")
