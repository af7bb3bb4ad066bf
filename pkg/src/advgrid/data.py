"""Deterministic synthetic image datasets for desk-scale experiments.

Each class is a distinct spatial template (bars, blocks, diagonals) plus
seeded pixel noise, so intensity and location attacks both have something
class-relevant to destroy.
"""

from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    pass


def _marker_cells(height, width, n_classes, per_class=3):
    """Distinct bright marker cells per class, drawn once from the interior.

    Markers concentrate part of the class evidence in a few pixels so that
    sparse (l1-bounded) attacks have class-relevant targets. Marker cells
    sit on odd columns; the even-column neighbor to the right is reserved
    for a class-independent bright beacon (see generate_dataset), so a
    one-pixel warp can write or erase a marker.
    """
    rng = np.random.default_rng(0x5EED)
    candidates = [
        (r, c)
        for r in range(1, height - 1)
        for c in range(1, width - 2, 2)
    ]
    needed = n_classes * per_class
    if needed > len(candidates):
        raise ConfigurationError("image too small for this many classes")
    picks = rng.choice(len(candidates), size=needed, replace=False)
    cells = [candidates[i] for i in picks]
    return [cells[c * per_class : (c + 1) * per_class] for c in range(n_classes)]


def _template_bank(height, width):
    h2, w2 = height // 2, width // 2
    bank = []

    t = np.zeros((height, width))
    t[h2 - 1 : h2 + 1, :] = 1.0  # horizontal bar
    bank.append(t)

    t = np.zeros((height, width))
    t[:, w2 - 1 : w2 + 1] = 1.0  # vertical bar
    bank.append(t)

    t = np.zeros((height, width))
    t[:h2, :w2] = 1.0  # top-left block
    bank.append(t)

    t = np.zeros((height, width))
    for i in range(height):  # diagonal band
        j = int(round(i * (width - 1) / (height - 1)))
        t[i, max(0, j - 1) : min(width, j + 2)] = 1.0
    bank.append(t)

    t = np.zeros((height, width))
    t[h2 - 2 : h2 + 2, w2 - 2 : w2 + 2] = 1.0  # center blob
    bank.append(t)

    t = np.zeros((height, width))
    t[0, :] = t[-1, :] = t[:, 0] = t[:, -1] = 1.0  # border frame
    bank.append(t)

    return bank


@dataclass
class Dataset:
    """Images in [0,1] with integer labels; a pure function of its seed."""

    inputs: np.ndarray  # (n, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int
    split: str
    seed: int

    def __len__(self):
        return len(self.labels)


def generate_dataset(seed, n_classes, height, width, n_per_class, split="train",
                     noise=0.14, contrast=0.7):
    """Build a seeded dataset with `n_per_class` samples per class."""
    if height < 4 or width < 4:
        raise ConfigurationError("images must be at least 4x4")
    bank = _template_bank(height, width)
    if not 2 <= n_classes <= len(bank):
        raise ConfigurationError(
            f"n_classes must be in [2, {len(bank)}], got {n_classes}"
        )
    markers = _marker_cells(height, width, n_classes)
    rng = np.random.default_rng(seed)
    images = []
    labels = []
    beacons = [(r, col + 1) for cells in markers for r, col in cells]
    for c in range(n_classes):
        base = 0.15 + contrast * bank[c]
        for r, col in beacons:
            base[r, col] = 1.0
        for r, col in markers[c]:
            base[r, col] = 1.0
        for _ in range(n_per_class):
            img = base + rng.uniform(-noise, noise, size=(height, width))
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    if images:
        inputs = np.stack(images)
    else:
        inputs = np.zeros((0, height, width))
    return Dataset(inputs, np.asarray(labels, dtype=np.intp), split, seed)


def export_csv(dataset, path):
    """One row per sample: label, then row-major pixels."""
    with open(path, "w") as fh:
        for img, label in zip(dataset.inputs, dataset.labels):
            pixels = ",".join(repr(float(v)) for v in img.ravel())
            fh.write(f"{int(label)},{pixels}\n")
