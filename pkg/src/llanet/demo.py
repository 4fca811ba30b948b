"""Synthetic demo dataset: seven visually distinct texture classes.

Real face data cannot ship with the package, so smoke tests and the README
walkthrough use procedurally generated images instead: each class gets its
own spatial frequency signature plus a constant-intensity channel, with
per-image phase jitter and pixel noise so the task is learnable but not
degenerate. Everything is deterministic in the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import (DatasetManifest, Image, LABEL_NAMES, SampleRecord,
                   write_image, write_manifest)


def class_image(label: int, size: int, rng: np.random.Generator, channels: int = 3) -> Image:
    """One synthetic sample: sinusoid gratings whose frequency encodes the class."""
    if not 0 <= label < len(LABEL_NAMES):
        raise ValueError(f"label out of range: {label}")
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = label + 1
    phase = rng.uniform(0, 2 * np.pi, size=2)
    planes = [
        0.5 + 0.45 * np.sin(2 * np.pi * freq * xx + phase[0]),
        0.5 + 0.45 * np.cos(2 * np.pi * freq * yy + phase[1]),
        np.full((size, size), label / (len(LABEL_NAMES) - 1)),
    ]
    img = np.stack(planes[:channels])
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return Image((np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8))


def write_demo_dataset(root, images_per_class: int = 10, size: int = 32,
                       seed: int = 7, channels: int = 3) -> Path:
    """Write images plus a manifest under ``root``; returns the manifest path.

    Each class is laid out as one sequence of consecutive frames, so the
    rebalancing commands have runs to work on.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ext = "pgm" if channels == 1 else "ppm"
    records = []
    for label, name in enumerate(LABEL_NAMES):
        for i in range(images_per_class):
            rel = f"images/{name}_{i:03d}.{ext}"
            write_image(root / rel, class_image(label, size, rng, channels))
            records.append(SampleRecord(sequence_id=f"seq_{name}", frame_index=i,
                                        image_path=rel, label=label))
    manifest_path = root / "train.csv"
    write_manifest(manifest_path, DatasetManifest(records))
    return manifest_path
