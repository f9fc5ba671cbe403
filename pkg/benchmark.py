"""
Synthetic two-domain street-scene benchmark.

Scenes are 64x64 by default: a sky band above two ground bands (road and
sidewalk) with vehicles and poles on top. Every region is snapped to a grid
of 8x8 blocks (scaled down with the image), one block per output cell of the
segmentation network. Two class pairs carry the shift:

* bus / train look identical and differ only by the band they stand on
  (bus on road, train on sidewalk);
* road / sidewalk swap their vertical order between context rules, so a
  model that learned "lower band = road" on the source is biased on the
  target.

Each domain picks a palette and a context rule. A palette may drift: every
image draws a strength s in [0, 1] and blends its colours toward the drift
colour by ``s * strength``, so a target domain spans everything from nearly
source-like to heavily shifted scenes.

Images are written as binary PPM (P6), labels as binary PGM (P5), plus a
manifest and a dataset.json.
"""
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from config import DomainSpec
from dataset import DATASET_META_NAME, MANIFEST_NAME
from mixing import IGNORE
from numerics import RngState
from utils import ConfigurationError, DatasetError, ensure_directory_exists, get_logger, save_json, \
    validate_file_extension

logger = get_logger(__name__)

CLASS_NAMES = ["sky", "road", "sidewalk", "bus", "train", "pole"]
SKY, ROAD, SIDEWALK, BUS, TRAIN, POLE = range(len(CLASS_NAMES))
SHAPE_CLASSES = {"bus": BUS, "train": TRAIN, "pole": POLE}

# Identical shapes separated only by the band above them.
CONTEXT_PAIR = (BUS, TRAIN)
# Distinct appearance, vertical prior flips across context rules.
LAYOUT_PAIR = (ROAD, SIDEWALK)

SPLITS = ("train", "eval", "oracle")
IMAGE_EXTENSIONS = [".ppm", ".png", ".bmp", ".jpg", ".jpeg"]
LABEL_EXTENSIONS = [".pgm", ".png", ".bmp"]

# Scenes are laid out on GRID_ROWS block rows; a 64-pixel side gives 8x8 blocks.
GRID_ROWS = 8

# RGB colours per class; bus and train always share the vehicle colour.
# drift: (colour, strength) the per-image blend moves toward.
PALETTES: List[Dict] = [
    {"sky": (0.55, 0.75, 0.95), "road": (0.42, 0.42, 0.44), "sidewalk": (0.66, 0.58, 0.50),
     "vehicle": (0.80, 0.22, 0.20), "pole": (0.92, 0.85, 0.25), "drift": ((0.0, 0.0, 0.0), 0.0)},
    {"sky": (0.57, 0.76, 0.93), "road": (0.40, 0.41, 0.45), "sidewalk": (0.64, 0.58, 0.52),
     "vehicle": (0.78, 0.24, 0.24), "pole": (0.90, 0.84, 0.28), "drift": ((0.12, 0.16, 0.40), 0.6)},
    {"sky": (0.60, 0.74, 0.90), "road": (0.44, 0.42, 0.42), "sidewalk": (0.68, 0.60, 0.50),
     "vehicle": (0.82, 0.26, 0.18), "pole": (0.92, 0.82, 0.30), "drift": ((0.55, 0.30, 0.15), 0.5)},
    {"sky": (0.52, 0.72, 0.95), "road": (0.40, 0.40, 0.42), "sidewalk": (0.64, 0.56, 0.48),
     "vehicle": (0.80, 0.20, 0.22), "pole": (0.94, 0.86, 0.22), "drift": ((0.80, 0.80, 0.82), 0.6)},
]

# flip: road above sidewalk; sky: range of the sky band as a fraction of the block rows
CONTEXT_RULES: List[Dict] = [
    {"flip": False, "sky": (0.25, 0.40)},
    {"flip": True, "sky": (0.22, 0.34)},
    {"flip": False, "sky": (0.22, 0.34)},
    {"flip": True, "sky": (0.25, 0.40)},
]

TEXTURE_NOISE = 0.04


def _palette_array(palette_id: int, strength: float = 0.0) -> np.ndarray:
    """Class colours (K, 3), blended toward the palette's drift colour by ``strength``."""
    palette = PALETTES[palette_id % len(PALETTES)]
    colours = np.array([palette["sky"], palette["road"], palette["sidewalk"],
                        palette["vehicle"], palette["vehicle"], palette["pole"]], dtype=np.float64)
    toward, scale = palette["drift"]
    blend = strength * scale
    return (1.0 - blend) * colours + blend * np.asarray(toward, dtype=np.float64)


def occurrence_plan(shape_frequencies: Dict[str, float], count: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Decide which images contain each object class.

    Exactly round(freq * count) images get the class, so the per-class image
    histogram matches the configured table up to rounding.
    """
    plan = {}
    for name in sorted(SHAPE_CLASSES):
        freq = float(shape_frequencies.get(name, 0.0))
        chosen = np.zeros(count, dtype=bool)
        chosen[rng.permutation(count)[:int(round(freq * count))]] = True
        plan[name] = chosen
    return plan


def _place_vehicle(grid: np.ndarray, cls: int, band: Tuple[int, int], rng: np.random.Generator) -> None:
    """One block row tall on the band's bottom row, 2-4 blocks wide."""
    _, bottom_band = band
    cols = grid.shape[1]
    lo = min(2, cols)
    vw = int(rng.integers(lo, max(lo, min(4, cols // 2)) + 1))
    left = int(rng.integers(0, cols - vw + 1))
    grid[bottom_band - 1, left:left + vw] = cls


def _layout(rule: Dict, objects: Dict[str, bool], rng: np.random.Generator, cols: int) -> np.ndarray:
    sky_lo, sky_hi = rule["sky"]
    sky = min(max(int(round(GRID_ROWS * rng.uniform(sky_lo, sky_hi))), 1), GRID_ROWS - 4)
    ground = GRID_ROWS - sky
    mid = sky + ground // 2 + int(rng.integers(0, ground % 2 + 1))
    upper, lower = (ROAD, SIDEWALK) if rule["flip"] else (SIDEWALK, ROAD)

    grid = np.empty((GRID_ROWS, cols), dtype=np.uint8)
    grid[:sky] = SKY
    grid[sky:mid] = upper
    grid[mid:] = lower
    bands = {upper: (sky, mid), lower: (mid, GRID_ROWS)}

    # Poles first: vehicles cover at most one of their rows, so both stay visible.
    if objects.get("pole"):
        for _ in range(int(rng.integers(1, 3))):
            x = int(rng.integers(0, cols))
            top = int(rng.integers(0, sky))
            bottom = int(rng.integers(sky + 2, GRID_ROWS + 1))
            grid[top:bottom, x] = POLE
    if objects.get("bus"):
        _place_vehicle(grid, BUS, bands[ROAD], rng)
    if objects.get("train"):
        _place_vehicle(grid, TRAIN, bands[SIDEWALK], rng)
    return grid


def render_scene(
    domain: DomainSpec,
    objects: Dict[str, bool],
    rng: np.random.Generator,
    image_size: Tuple[int, int] = (64, 64),
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw one scene.

    Args:
        domain: Domain providing palette and context rule
        objects: Which of bus / train / pole to draw
        rng: Random generator
        image_size: (H, W)

    Returns:
        (image, label): uint8 arrays of shape (H, W, 3) and (H, W)
    """
    height, width = image_size
    if height < 16 or width < 16:
        raise ConfigurationError(f"Scenes need at least 16x16 pixels, got {image_size}")
    block = height // GRID_ROWS
    cols = width // block
    rule = CONTEXT_RULES[domain.context_rule_id % len(CONTEXT_RULES)]
    grid = _layout(rule, objects, rng, cols)
    label = np.repeat(np.repeat(grid, block, axis=0), block, axis=1)
    label = np.pad(label, ((0, height - label.shape[0]), (0, width - label.shape[1])), mode="edge")

    strength = float(rng.uniform(0.0, 1.0))
    image = _palette_array(domain.palette_id, strength)[label]
    shade = np.linspace(0.0, 0.08, height)[:, None]
    image[label == SKY] += np.broadcast_to(shade, label.shape)[label == SKY][:, None]
    stripes = 0.03 * np.sin(np.arange(width) * (0.9 if rule["flip"] else 0.6))
    road = label == ROAD
    image[road] += np.broadcast_to(stripes[None, :], label.shape)[road][:, None]
    image += rng.normal(0.0, TEXTURE_NOISE, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return image, label


def _write_image(array: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(array).save(path, format="PPM")
    except OSError as e:
        raise DatasetError(f"Could not write {path}: {e}") from e


def _split_counts(domain: DomainSpec) -> Dict[str, int]:
    return {"train": domain.sample_count, "eval": domain.eval_count, "oracle": domain.oracle_count}


def _has_labels(domain: DomainSpec, split: str) -> bool:
    return not (domain.role == "target" and split == "train")


def _ingest_files(domain: DomainSpec, image_size: Tuple[int, int]) -> List[Tuple[Image.Image, Image.Image]]:
    root = Path(domain.ingest_dir)
    image_dir, label_dir = root / "images", root / "labels"
    if not image_dir.is_dir():
        raise DatasetError(f"Ingestion directory has no images/ folder: {root}")
    files = sorted(p for p in image_dir.iterdir() if validate_file_extension(str(p), IMAGE_EXTENSIONS))
    needed = sum(_split_counts(domain).values())
    if len(files) < needed:
        raise DatasetError(f"{image_dir}: need {needed} images, found {len(files)}")
    pairs = []
    for path in files[:needed]:
        try:
            image = Image.open(path).convert("RGB")
        except OSError as e:
            raise DatasetError(f"Could not read {path}: {e}") from e
        if image.size != (image_size[1], image_size[0]):
            raise DatasetError(f"{path}: size {image.size[::-1]} does not match {image_size}")
        label = None
        candidates = [label_dir / f"{path.stem}{ext}" for ext in LABEL_EXTENSIONS]
        existing = [c for c in candidates if c.exists()]
        if existing:
            label = Image.open(existing[0]).convert("L")
        pairs.append((image, label))
    return pairs


def generate_benchmark(
    domains: Sequence[DomainSpec],
    out_dir: str,
    rng: RngState,
    image_size: Tuple[int, int] = (64, 64),
) -> str:
    """
    Render (or ingest) every domain and write the dataset to ``out_dir``.

    Manifest lines read ``<split> <domain-id> <image-path> <label-path|->``
    with paths relative to ``out_dir``. Target training images carry no
    label file.

    Args:
        domains: Domain specs
        out_dir: Output directory
        rng: Seeded streams; each (domain, split) uses its own stream
        image_size: (H, W) of every scene

    Returns:
        Path of the manifest file
    """
    root = Path(out_dir)
    ensure_directory_exists(str(root))
    lines: List[str] = []
    for domain in domains:
        unknown = set(domain.shape_frequencies) - set(SHAPE_CLASSES)
        if unknown:
            raise ConfigurationError(f"Domain '{domain.name}': unknown shape classes {sorted(unknown)}")
        ingested = _ingest_files(domain, image_size) if domain.ingest_dir else None
        offset = 0
        for split, count in _split_counts(domain).items():
            if count == 0:
                continue
            split_dir = root / domain.name / split
            ensure_directory_exists(str(split_dir))
            gen = rng.stream(f"benchmark/{domain.name}/{split}")
            plan = occurrence_plan(domain.shape_frequencies, count, gen)
            for i in range(count):
                if ingested is not None:
                    pil_image, pil_label = ingested[offset + i]
                    image = np.asarray(pil_image, dtype=np.uint8)
                    if pil_label is None and _has_labels(domain, split):
                        raise DatasetError(f"{domain.ingest_dir}: image {offset + i} has no label file")
                    label = None if pil_label is None else np.asarray(pil_label, dtype=np.uint8)
                else:
                    objects = {name: bool(chosen[i]) for name, chosen in plan.items()}
                    image, label = render_scene(domain, objects, gen, image_size)
                image_rel = f"{domain.name}/{split}/img_{i:05d}.ppm"
                _write_image(image, root / image_rel)
                label_rel = "-"
                if _has_labels(domain, split):
                    label_rel = f"{domain.name}/{split}/lbl_{i:05d}.pgm"
                    _write_image(label, root / label_rel)
                lines.append(f"{split} {domain.name} {image_rel} {label_rel}")
            offset += count
        logger.info(f"🖼️ Wrote domain '{domain.name}' ({domain.role})")

    manifest = root / MANIFEST_NAME
    try:
        with open(manifest, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise DatasetError(f"Could not write {manifest}: {e}") from e
    save_json(
        {
            "class_names": CLASS_NAMES,
            "ignore_index": IGNORE,
            "image_size": list(image_size),
            "domains": [{"name": d.name, "role": d.role} for d in domains],
        },
        str(root / DATASET_META_NAME),
    )
    logger.info(f"✅ Benchmark written to {root} ({len(lines)} samples)")
    return str(manifest)
