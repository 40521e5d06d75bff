"""Datasets: the procedural ``shapes-10`` task and a labeled-image-directory loader."""
from __future__ import annotations

from pathlib import Path

import numpy as np

SHAPES = (
    "hbar", "vbar", "diag", "antidiag", "ring",
    "square", "plus", "cross", "disk", "frame",
)


def _draw(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = rng.uniform(size * 0.2, size * 0.38)
    cy, cx = rng.uniform(r, size - r, size=2)
    w = rng.uniform(0.8, 1.6)
    dy, dx = yy - cy, xx - cx
    inside_box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    name = SHAPES[kind]
    if name == "hbar":
        m = (np.abs(dy) <= w) & (np.abs(dx) <= r)
    elif name == "vbar":
        m = (np.abs(dx) <= w) & (np.abs(dy) <= r)
    elif name == "diag":
        m = (np.abs(dy - dx) <= w) & inside_box
    elif name == "antidiag":
        m = (np.abs(dy + dx) <= w) & inside_box
    elif name == "ring":
        d = np.hypot(dy, dx)
        m = np.abs(d - r) <= w * 0.8
    elif name == "square":
        m = (np.abs(dy) <= r * 0.7) & (np.abs(dx) <= r * 0.7)
    elif name == "plus":
        m = ((np.abs(dy) <= w) | (np.abs(dx) <= w)) & inside_box
    elif name == "cross":
        m = ((np.abs(dy - dx) <= w) | (np.abs(dy + dx) <= w)) & inside_box
    elif name == "disk":
        m = np.hypot(dy, dx) <= r * 0.8
    else:
        m = inside_box & ~((np.abs(dy) <= r - 1.6) & (np.abs(dx) <= r - 1.6))
    return m.astype(np.float64)


def make_shapes10(n: int, seed: int = 0, size: int = 16, noise: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Generate ``n`` grayscale images [n, 1, size, size] and labels in [0, 10).

    Each image holds one randomly placed, scaled and brightened glyph plus
    Gaussian pixel noise. Classes are balanced in round-robin order, then
    shuffled.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPES)
    rng.shuffle(labels)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i, y in enumerate(labels):
        img = _draw(int(y), size, rng) * rng.uniform(0.6, 1.0)
        img += rng.normal(0.0, noise, size=(size, size))
        images[i, 0] = img
    return images, labels.astype(np.int64)


def train_test_split(n_train: int, n_test: int, seed: int = 0, size: int = 16, noise: float = 0.25):
    """Disjoint train/test draws from independent streams."""
    xtr, ytr = make_shapes10(n_train, seed=seed * 2 + 1, size=size, noise=noise)
    xte, yte = make_shapes10(n_test, seed=seed * 2 + 2, size=size, noise=noise)
    return (xtr, ytr), (xte, yte)


def save_npz(path, images: np.ndarray, labels: np.ndarray) -> None:
    np.savez_compressed(path, images=images, labels=labels)


def load_npz(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as f:
        return f["images"].astype(np.float32), f["labels"].astype(np.int64)


def save_image_dir(root, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``root/<class>/<index>.png`` as 8-bit grayscale."""
    from PIL import Image

    root = Path(root)
    for i, (img, y) in enumerate(zip(images, labels)):
        d = root / SHAPES[int(y)]
        d.mkdir(parents=True, exist_ok=True)
        px = np.clip((img[0] + 0.5) / 2.0 * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(px, mode="L").save(d / f"{i:06d}.png")


def load_image_dir(root, size: int | None = None) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load ``root/<class>/*`` raster images as grayscale in [0, 1].

    Class ids follow sorted subdirectory names.
    """
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class subdirectories under {root}")
    images, labels = [], []
    for cid, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"):
                continue
            img = Image.open(f).convert("L")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size))
            images.append(np.asarray(img, dtype=np.float32)[None] / 255.0)
            labels.append(cid)
    return np.stack(images), np.asarray(labels, dtype=np.int64), classes


def load_dataset(path=None, n_train: int = 2048, n_test: int = 512, seed: int = 0, noise: float = 0.25, size: int = 16):
    """Train/test pairs from shapes-10 (``path`` None), an ``.npz`` file, or an image directory.

    Files are shuffled with ``seed`` and the last ``n_test`` samples form the test split.
    """
    if path is None:
        return train_test_split(n_train, n_test, seed=seed, size=size, noise=noise)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.is_dir():
        images, labels, _ = load_image_dir(path, size)
    else:
        images, labels = load_npz(path)
    if len(images) < 2:
        raise ValueError(f"dataset {path} needs at least 2 samples")
    order = np.random.default_rng(seed).permutation(len(images))
    n_test = min(n_test, len(images) - 1)
    test, train = order[len(order) - n_test :], order[: len(order) - n_test][:n_train]
    return (images[train], labels[train]), (images[test], labels[test])
