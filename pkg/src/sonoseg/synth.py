"""Synthetic toy dataset: organ-like ellipses on speckle-noise backgrounds.

Organs keep a roughly constant spatial layout (mimicking anatomy under a
fixed scan pattern) with per-image jitter. In 'distinct' appearance mode each
class has its own intensity band; in 'ambiguous' mode all organs share the
same appearance and size range, so class identity is carried by spatial
position only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DEFAULT_PALETTE, encode_mask, save_raster

# (class_id, center as fraction of image size, radii as fraction of size)
LAYOUT = (
    (1, (0.27, 0.27), (0.17, 0.13)),  # liver, upper left, largest
    (2, (0.75, 0.25), (0.12, 0.09)),  # kidney, upper right
    (3, (0.25, 0.75), (0.10, 0.07)),  # gallbladder, lower left
    (4, (0.73, 0.73), (0.08, 0.06)),  # vessels, lower right
    (5, (0.52, 0.52), (0.11, 0.08)),  # spleen, center
)

INTENSITY = {1: 0.40, 2: 0.60, 3: 0.75, 4: 0.25, 5: 0.90}


def gen_sample(rng: np.random.Generator, size: int = 64,
               appearance: str = "distinct"):
    """One (image, mask) pair; image float32 in [0, 1], mask int class ids.

    'directional' generates the relational pair task instead of the organ
    layout: two identical ellipses at a random location, where the left one
    is class 1 and the right one class 2, so class identity is carried
    purely by horizontal relation (not appearance or absolute position)."""
    if appearance not in ("distinct", "ambiguous", "directional"):
        raise ValueError(f"unknown appearance mode {appearance!r}")
    if appearance == "directional":
        return _gen_directional_pair(rng, size)
    speckle = rng.rayleigh(scale=0.08, size=(size, size)).astype(np.float32)
    image = np.clip(speckle, 0.0, 1.0)
    mask = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for cid, (cx, cy), (ra, rb) in LAYOUT:
        jx = cx * size + rng.uniform(-2.0, 2.0)
        jy = cy * size + rng.uniform(-2.0, 2.0)
        if appearance == "ambiguous":
            a = 0.11 * size * rng.uniform(0.9, 1.1)
            b = 0.08 * size * rng.uniform(0.9, 1.1)
            level = 0.55
        else:
            a = ra * size * rng.uniform(0.9, 1.1)
            b = rb * size * rng.uniform(0.9, 1.1)
            level = INTENSITY[cid]
        theta = rng.uniform(-0.4, 0.4)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - jx) * ct + (yy - jy) * st
        v = -(xx - jx) * st + (yy - jy) * ct
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        tex = level + rng.normal(0.0, 0.03, size=(size, size))
        image[inside] = np.clip(tex, 0.0, 1.0)[inside].astype(np.float32)
        mask[inside] = cid
    return image, mask


def _gen_directional_pair(rng: np.random.Generator, size: int):
    image = np.clip(rng.rayleigh(scale=0.08, size=(size, size)),
                    0.0, 1.0).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = rng.uniform(25, size - 25)
    cy = rng.uniform(14, size - 14)
    sep = 18.0 * size / 64.0
    for cid, x0 in ((1, cx - sep), (2, cx + sep)):
        a = 6.0 * rng.uniform(0.9, 1.1)
        b = 4.5 * rng.uniform(0.9, 1.1)
        inside = ((xx - x0) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
        tex = 0.55 + rng.normal(0.0, 0.03, size=(size, size))
        image[inside] = np.clip(tex, 0.0, 1.0)[inside].astype(np.float32)
        mask[inside] = cid
    return image, mask


def generate_dataset(outdir, n_images: int, size: int = 64, seed: int = 0,
                     appearance: str = "distinct") -> list[str]:
    """Write paired images/NNN.png and masks/NNN.png; returns the stems."""
    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n_images):
        image, mask = gen_sample(rng, size=size, appearance=appearance)
        stem = f"{i:03d}"
        save_raster(out / "images" / f"{stem}.png",
                    np.rint(image * 255).astype(np.uint8))
        save_raster(out / "masks" / f"{stem}.png", encode_mask(mask, DEFAULT_PALETTE))
        stems.append(stem)
    (out / "palette.txt").write_text(DEFAULT_PALETTE.to_text())
    return stems


def load_dataset(dirpath):
    """Load paired (image, mask) arrays from a generated dataset directory."""
    from .data import load_image, load_mask
    d = Path(dirpath)
    images, masks, stems = [], [], []
    for ipath in sorted((d / "images").glob("*.png")):
        mpath = d / "masks" / ipath.name
        if not mpath.exists():
            continue
        images.append(load_image(ipath))
        masks.append(load_mask(mpath))
        stems.append(ipath.stem)
    return images, masks, stems
