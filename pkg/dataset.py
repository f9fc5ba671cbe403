"""
Dataset loading: reads the manifest written by the benchmark generator,
decodes PPM images / PGM label maps with Pillow and exposes the training
pools and evaluation sets, plus the cyclic batch sampler used by every
training stage.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from utils import ArgumentError, DatasetError, get_logger, load_json

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.txt"
DATASET_META_NAME = "dataset.json"


@dataclass
class DomainData:
    """
    Images (and labels, when known) of one domain split.

    Attributes:
        name: Domain id
        role: 'source' or 'target'
        images: (N, H, W, 3) float64 in [0, 1]
        labels: (N, H, W) int64 with 255 = IGNORE, or None
    """
    name: str
    role: str
    images: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labelled(self) -> bool:
        return self.labels is not None


class CyclicIndex:
    """Endless index stream over ``size`` items, reshuffled every epoch."""

    def __init__(self, size: int, rng: np.random.Generator):
        if size < 1:
            raise ArgumentError("Cannot sample from an empty pool")
        self.size = size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> int:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(self.size)
            self._pos = 0
        index = int(self._order[self._pos])
        self._pos += 1
        return index


class StageSampler:
    """
    Draws source and target batches for one training stage.

    With several source domains, each batch element first picks a source
    uniformly, then takes that source's next image. Target images are pooled.
    """

    def __init__(self, sources: List[DomainData], target_images: np.ndarray, rng: np.random.Generator):
        self.sources = sources
        self.target_images = target_images
        self.rng = rng
        self._source_index = [CyclicIndex(len(s), rng) for s in sources]
        self._target_index = CyclicIndex(len(target_images), rng)

    def next_source(self, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for _ in range(batch_size):
            d = int(self.rng.integers(len(self.sources))) if len(self.sources) > 1 else 0
            i = self._source_index[d].next()
            images.append(self.sources[d].images[i])
            labels.append(self.sources[d].labels[i])
        return np.stack(images), np.stack(labels)

    def next_target(self, batch_size: int) -> np.ndarray:
        return np.stack([self.target_images[self._target_index.next()] for _ in range(batch_size)])


@dataclass
class TrainingData:
    """
    Everything a DDB run trains and evaluates on.

    Attributes:
        sources: Labelled source training splits
        targets: Unlabelled target training splits (pooled for training)
        eval_sets: Labelled held-out split per domain name
        oracle: Labelled target training images, pooled (may be None)
        class_names: Class names, index = class id
    """
    sources: List[DomainData]
    targets: List[DomainData]
    eval_sets: Dict[str, DomainData] = field(default_factory=dict)
    oracle: Optional[DomainData] = None
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.sources or not self.targets:
            raise ArgumentError("Training data needs at least one source and one target domain")
        for source in self.sources:
            if not source.labelled:
                raise ArgumentError(f"Source domain '{source.name}' has no labels")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def target_images(self) -> np.ndarray:
        return np.concatenate([t.images for t in self.targets])

    def target_eval_sets(self) -> Dict[str, DomainData]:
        names = {t.name for t in self.targets}
        return {name: data for name, data in self.eval_sets.items() if name in names}

    def stage_sampler(self, rng: np.random.Generator) -> StageSampler:
        return StageSampler(self.sources, self.target_images, rng)


class DatasetReader:
    """Decodes the image / label files listed in a manifest."""

    def __init__(self, data_dir: str):
        self.data_dir = Path(data_dir)

    def read_image(self, rel_path: str) -> np.ndarray:
        path = self.data_dir / rel_path
        try:
            with Image.open(path) as img:
                array = np.asarray(img.convert("RGB"), dtype=np.float64)
        except OSError as e:
            raise DatasetError(f"Could not read image {path}: {e}") from e
        return array / 255.0

    def read_label(self, rel_path: str) -> np.ndarray:
        path = self.data_dir / rel_path
        try:
            with Image.open(path) as img:
                mode = img.mode
                array = np.asarray(img, dtype=np.int64)
        except OSError as e:
            raise DatasetError(f"Could not read label map {path}: {e}") from e
        if mode != "L":
            raise DatasetError(f"Label map {path} is not 8-bit greyscale (mode {mode})")
        return array

    def read_manifest(self) -> List[Tuple[str, str, str, Optional[str]]]:
        path = self.data_dir / MANIFEST_NAME
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = f.read().splitlines()
        except OSError as e:
            raise DatasetError(f"Could not read manifest {path}: {e}") from e
        rows = []
        for number, line in enumerate(raw, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DatasetError(f"{path}:{number}: expected 4 fields, got {len(parts)}")
            split, domain, image, label = parts
            rows.append((split, domain, image, None if label == "-" else label))
        return rows


def load_dataset(data_dir: str) -> TrainingData:
    """
    Load a generated (or ingested) dataset.

    Args:
        data_dir: Directory containing manifest.txt and dataset.json

    Returns:
        TrainingData with source/target training splits, eval sets and the
        optional oracle pool
    """
    reader = DatasetReader(data_dir)
    meta = load_json(str(Path(data_dir) / DATASET_META_NAME))
    roles = {d["name"]: d["role"] for d in meta["domains"]}

    grouped: Dict[Tuple[str, str], List[Tuple[str, Optional[str]]]] = {}
    for split, domain, image, label in reader.read_manifest():
        if domain not in roles:
            raise DatasetError(f"Manifest names unknown domain '{domain}'")
        grouped.setdefault((split, domain), []).append((image, label))

    def build(split: str, domain: str) -> Optional[DomainData]:
        rows = grouped.get((split, domain))
        if not rows:
            return None
        images = np.stack([reader.read_image(image) for image, _ in rows])
        labels = None
        if all(label is not None for _, label in rows):
            labels = np.stack([reader.read_label(label) for _, label in rows])
        return DomainData(name=domain, role=roles[domain], images=images, labels=labels)

    sources, targets, oracle_parts = [], [], []
    eval_sets: Dict[str, DomainData] = {}
    for name, role in roles.items():
        train = build("train", name)
        if train is None:
            raise DatasetError(f"Domain '{name}' has no training images")
        (sources if role == "source" else targets).append(train)
        held_out = build("eval", name)
        if held_out is not None:
            eval_sets[name] = held_out
        extra = build("oracle", name)
        if extra is not None:
            oracle_parts.append(extra)

    oracle = None
    if oracle_parts:
        oracle = DomainData(
            name="+".join(p.name for p in oracle_parts),
            role="target",
            images=np.concatenate([p.images for p in oracle_parts]),
            labels=np.concatenate([p.labels for p in oracle_parts]),
        )
    logger.info(
        f"📦 Loaded {sum(len(s) for s in sources)} source / {sum(len(t) for t in targets)} target "
        f"training images from {data_dir}"
    )
    return TrainingData(
        sources=sources,
        targets=targets,
        eval_sets=eval_sets,
        oracle=oracle,
        class_names=list(meta["class_names"]),
    )


def in_memory_data(
    sources: List[Tuple[np.ndarray, np.ndarray]],
    targets: List[np.ndarray],
    class_names: List[str],
    eval_sets: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
) -> TrainingData:
    """Wrap plain arrays as TrainingData (domains are named source0.., target0..)."""
    eval_sets = eval_sets or {}
    return TrainingData(
        sources=[DomainData(f"source{i}", "source", np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64))
                 for i, (x, y) in enumerate(sources)],
        targets=[DomainData(f"target{i}", "target", np.asarray(x, dtype=np.float64))
                 for i, x in enumerate(targets)],
        eval_sets={name: DomainData(name, "target", np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64))
                   for name, (x, y) in eval_sets.items()},
        class_names=list(class_names),
    )
