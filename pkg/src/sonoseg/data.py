"""Color-coded mask I/O, class statistics, overlay rendering, and the
smoothed multi-class Dice evaluator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

DICE_EPS = 1e-6


@dataclass(frozen=True)
class PaletteEntry:
    class_id: int
    name: str
    color: tuple[int, int, int]


class ClassPalette:
    """Ordered class list with display colors; ids contiguous from 0."""

    def __init__(self, entries: list[PaletteEntry]):
        ids = [e.class_id for e in entries]
        if ids != list(range(len(entries))):
            raise ValueError(f"class ids must be contiguous from 0, got {ids}")
        colors = [e.color for e in entries]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    @property
    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.int64)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def to_text(self) -> str:
        return "".join(f"{e.class_id} {e.name} {e.color[0]} {e.color[1]} {e.color[2]}\n"
                       for e in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "ClassPalette":
        entries = []
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cid, name, r, g, b = line.split()
            entries.append(PaletteEntry(int(cid), name, (int(r), int(g), int(b))))
        return cls(entries)


DEFAULT_PALETTE = ClassPalette([
    PaletteEntry(0, "background", (0, 0, 0)),
    PaletteEntry(1, "liver", (238, 130, 238)),      # violet
    PaletteEntry(2, "kidney", (255, 255, 0)),       # yellow
    PaletteEntry(3, "gallbladder", (0, 128, 0)),    # green
    PaletteEntry(4, "vessels", (255, 0, 0)),        # red
    PaletteEntry(5, "spleen", (255, 192, 203)),     # pink
])

ORGAN_CLASSES = (1, 2, 3, 4, 5)


class MaskDecodeError(ValueError):
    pass


def decode_mask(image: np.ndarray, palette: ClassPalette = DEFAULT_PALETTE,
                tol: int = 30) -> np.ndarray:
    """Nearest-palette-color assignment under L-inf distance; pixels beyond
    tol of every color are an error. Equidistant pixels take the lower id."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if img.ndim != 3 or img.shape[2] < 3:
        raise MaskDecodeError(f"expected RGB raster, got shape {img.shape}")
    rgb = img[:, :, :3].astype(np.int64)
    colors = palette.colors  # (k, 3)
    dists = np.abs(rgb[:, :, None, :] - colors[None, None]).max(axis=-1)
    labels = dists.argmin(axis=-1)  # argmin takes the lower id on ties
    mind = dists.min(axis=-1)
    bad = mind > tol
    if bad.any():
        ys, xs = np.nonzero(bad)
        c = tuple(rgb[ys[0], xs[0]])
        raise MaskDecodeError(
            f"{int(bad.sum())} pixel(s) beyond tol {tol} of any palette color, "
            f"e.g. RGB {c}")
    return labels.astype(np.int64)


def encode_mask(mask: np.ndarray, palette: ClassPalette = DEFAULT_PALETTE) -> np.ndarray:
    """Class-id map -> RGB raster using the palette colors."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.min() < 0 or mask.max() >= len(palette):
        raise ValueError(f"class id out of range for palette of {len(palette)}")
    return palette.colors[mask].astype(np.uint8)


def dice_pair(x: np.ndarray, y: np.ndarray, class_id: int,
              eps: float = DICE_EPS) -> float:
    """Smoothed Dice for one class: 2|X & Y| / (|X| + |Y| + eps)."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"mask dims differ: {x.shape} vs {y.shape}")
    xm = x == class_id
    ym = y == class_id
    inter = int(np.count_nonzero(xm & ym))
    return 2.0 * inter / (int(xm.sum()) + int(ym.sum()) + eps)


@dataclass
class DiceReport:
    per_class: dict[int, float]
    mean: float
    eps: float
    counts: dict[int, tuple[int, int, int]]  # |X|, |Y|, |X & Y| per class

    def to_kv_text(self, palette: ClassPalette = DEFAULT_PALETTE) -> str:
        lines = []
        for cid, d in self.per_class.items():
            lines.append(f"dice.{palette.names[cid]} = {d:.9f}\n")
        lines.append(f"dice.mean = {self.mean:.9f}\n")
        lines.append(f"eps = {self.eps:g}\n")
        return "".join(lines)

    def to_csv_row(self) -> str:
        vals = [f"{self.per_class[c]:.9f}" for c in sorted(self.per_class)]
        return ",".join(vals + [f"{self.mean:.9f}"])


def mean_dice(x: np.ndarray, y: np.ndarray,
              palette: ClassPalette = DEFAULT_PALETTE,
              eps: float = DICE_EPS,
              absent_class_policy: str = "zero") -> DiceReport:
    """Per-organ Dice averaged over the 5 organ classes (background excluded).

    absent_class_policy: 'zero' keeps the literal smoothed form where classes
    absent from both masks contribute 0; 'skip' averages only over classes
    present in either mask."""
    if absent_class_policy not in ("zero", "skip"):
        raise ValueError(f"unknown absent_class_policy {absent_class_policy!r}")
    per_class = {}
    counts = {}
    included = []
    for cid in range(1, len(palette)):
        xm = np.asarray(x) == cid
        ym = np.asarray(y) == cid
        nx, ny = int(xm.sum()), int(ym.sum())
        ni = int(np.count_nonzero(xm & ym))
        d = 2.0 * ni / (nx + ny + eps)
        per_class[cid] = d
        counts[cid] = (nx, ny, ni)
        if absent_class_policy == "zero" or nx + ny > 0:
            included.append(d)
    mean = sum(included) / len(included) if included else 0.0
    return DiceReport(per_class=per_class, mean=mean, eps=eps, counts=counts)


def class_histogram(dataset_dir, palette: ClassPalette = DEFAULT_PALETTE,
                    tol: int = 30) -> tuple[dict[str, int], int]:
    """Connected-component instance counts per class (8-connectivity) over all
    mask rasters in a directory. Returns (counts, skipped_file_count)."""
    counts = {e.name: 0 for e in palette.entries if e.class_id != 0}
    skipped = 0
    structure = np.ones((3, 3), dtype=np.int64)
    d = Path(dataset_dir)
    for path in sorted(d.glob("*.png")):
        try:
            mask = decode_mask(np.asarray(Image.open(path).convert("RGB")),
                               palette, tol)
        except (OSError, MaskDecodeError):
            skipped += 1
            continue
        for e in palette.entries:
            if e.class_id == 0:
                continue
            _, num = ndimage.label(mask == e.class_id, structure=structure)
            counts[e.name] += int(num)
    return counts, skipped


def render_overlay(image: np.ndarray, mask: np.ndarray,
                   palette: ClassPalette = DEFAULT_PALETTE,
                   alpha: float = 0.4) -> np.ndarray:
    """Alpha-blend class colors over a grayscale image; background untouched."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    mask = np.asarray(mask, dtype=np.int64)
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {img.shape[:2]} vs mask {mask.shape} dims differ")
    colors = palette.colors.astype(np.float64)
    out = img.copy()
    fg = mask != 0
    out[fg] = (1.0 - alpha) * img[fg] + alpha * colors[mask[fg]]
    return np.rint(out).clip(0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Grayscale image in [0, 1] float32."""
    return (np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0)


def load_mask(path, palette: ClassPalette = DEFAULT_PALETTE,
              tol: int = 30) -> np.ndarray:
    return decode_mask(np.asarray(Image.open(path).convert("RGB")), palette, tol)


def save_raster(path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)
