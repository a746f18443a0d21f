"""Procedural low-light underwater scenes with fish-like blobs and YOLO boxes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import Annotation, Record, write_annotations, write_manifest, write_ppm


def underwater_scene(rng: np.random.Generator, size: int = 64, n_fish: int | None = None,
                     brightness: float = 0.35, debris: int = 0,
                     noise: float = 0.03) -> tuple[np.ndarray, list[Annotation]]:
    """One dim, blue-green cast image with 1-3 elliptical fish and their boxes.

    ``debris`` adds that many unlabeled rock-like blobs, similar in size and
    darkness to the fish but closer to the water colour.
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    depth = yy / (h - 1)
    # water: red strongly absorbed, green/blue dominate, darker with depth
    cast = np.array([0.08, 0.45, 0.55]) * brightness / 0.35
    img = cast[None, None, :] * (1.0 - 0.5 * depth[..., None])
    img = img + noise * rng.standard_normal((h, w, 3))
    if n_fish is None:
        n_fish = int(rng.integers(1, 4))
    anns = []
    for _ in range(n_fish):
        rx = rng.uniform(0.08, 0.18) * w
        ry = rx * rng.uniform(0.4, 0.7)
        cx = rng.uniform(rx, w - rx)
        cy = rng.uniform(ry, h - ry)
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        fish = np.array([0.35, 0.30, 0.20]) * brightness / 0.35 * rng.uniform(0.7, 1.1)
        # attenuated body colour, slightly hazy toward the water colour
        img[inside] = 0.6 * fish + 0.4 * img[inside]
        anns.append(Annotation(0, cx / w, cy / h, 2 * rx / w, 2 * ry / h).clipped())
    for _ in range(debris):
        r = rng.uniform(0.06, 0.14) * w
        cx, cy = rng.uniform(r, w - r, 2)
        inside = ((xx - cx) / r) ** 2 + ((yy - cy) / (0.8 * r)) ** 2 <= 1.0
        rock = np.array([0.22, 0.30, 0.28]) * brightness / 0.35 * rng.uniform(0.7, 1.1)
        img[inside] = 0.6 * rock + 0.4 * img[inside]
    return np.clip(img, 0.0, 1.0).astype(np.float32), anns


def make_fixture(n_images: int, seed: int = 0, size: int = 64, brightness: float = 0.35,
                 debris: int = 0, noise: float = 0.03) -> list[tuple[np.ndarray, list[Annotation]]]:
    rng = np.random.default_rng(seed)
    return [underwater_scene(rng, size, brightness=brightness, debris=debris, noise=noise)
            for _ in range(n_images)]


def write_fixture(root, samples, split: str = "train", video: str = "video0") -> Path:
    """Write PPM images, label files and a manifest under ``root``; return the manifest path."""
    root = Path(root)
    (root / video).mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    records = []
    for i, (img, anns) in enumerate(samples):
        img_rel = f"{video}/frame{i:05d}.ppm"
        ann_rel = f"labels/frame{i:05d}.txt"
        write_ppm(img, root / img_rel)
        write_annotations(anns, root / ann_rel)
        records.append(Record(img_rel, ann_rel, i, split))
    manifest = root / "manifest.tsv"
    write_manifest(records, manifest)
    return manifest
