"""
Cross-path knowledge distillation.

Both path teachers are summarised by per-class feature centroids on the
target set. At each target pixel, every teacher's softmax is weighted by a
softmax over negative distances from the pixel feature to that teacher's
centroids; the weighted average gives the ensembled pseudo-label the student
learns from (on augmented target images), alongside source CE.
"""
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from bridging import EmaTeacher
from mixing import labels_to_onehot
from model import SegModel, OptimizerState, forward, make_optimizer, optimizer_step
from numerics import (
    RngState, Tensor, softmax, weighted_cross_entropy, kl_divergence, backward,
    no_grad, nearest_resize,
)
from utils import ArgumentError, ConfigurationError, StepLogger, get_logger

logger = get_logger(__name__)

Teacher = Union[EmaTeacher, SegModel]


@dataclass
class AugmentConfig:
    """Colour jitter strengths, jitter probability and Gaussian blur sigma range."""
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    jitter_prob: float = 0.8
    blur_sigma: Tuple[float, float] = (0.15, 1.15)
    blur_prob: float = 0.5
    truncate: float = 4.0

    def __post_init__(self):
        self.blur_sigma = tuple(float(s) for s in self.blur_sigma)
        if len(self.blur_sigma) != 2 or not 0.0 <= self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ConfigurationError(f"blur_sigma must be an increasing pair >= 0, got {self.blur_sigma}")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} jitter must lie in [0, 1)")


@dataclass
class DistillConfig:
    """Distillation switches: hard/soft targets, adaptive/uniform ensemble, distance norm."""
    mode: str = "hard"
    ensemble: str = "adaptive"
    temperature: float = 1.0
    distance: str = "l2"
    steps: int = 2000
    batch_size: int = 4
    reduction: str = "mean"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.mode not in ("hard", "soft"):
            raise ConfigurationError(f"Unknown distillation mode '{self.mode}'")
        if self.ensemble not in ("adaptive", "uniform"):
            raise ConfigurationError(f"Unknown ensemble '{self.ensemble}'")
        if self.distance not in ("l2", "l1"):
            raise ConfigurationError(f"Unknown distance '{self.distance}'")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["augment"]["blur_sigma"] = list(self.augment.blur_sigma)
        return data


@dataclass
class PrototypeSet:
    """
    Per-class feature centroids of one teacher on the target set.

    Attributes:
        centroids: (K, D) class means; rows of empty classes are zero
        counts: (K,) number of contributing feature pixels
    """
    centroids: np.ndarray
    counts: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0


def _model_of(teacher: Teacher) -> SegModel:
    return teacher.model if isinstance(teacher, EmaTeacher) else teacher


def compute_centroids(teacher: Teacher, target_set: np.ndarray, batch_size: int = 16) -> PrototypeSet:
    """
    Mean feature vector of every pseudo-labelled class over the target set.

    Pseudo-labels (teacher argmax at full resolution) are nearest-neighbour
    downsampled to the feature grid before accumulation.

    Args:
        teacher: Path teacher
        target_set: (N, H, W, C) target images
        batch_size: Images per forward pass

    Returns:
        PrototypeSet
    """
    target_set = np.asarray(target_set, dtype=np.float64)
    if target_set.ndim != 4 or len(target_set) == 0:
        raise ArgumentError(f"Target set must be a non-empty (N, H, W, C) array, got {target_set.shape}")
    model = _model_of(teacher)
    k, d = model.num_classes, model.feature_dim
    sums = np.zeros((k, d), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for start in range(0, len(target_set), batch_size):
        with no_grad():
            features, logits = forward(model, target_set[start:start + batch_size])
        labels = np.argmax(logits.data, axis=-1)
        grid = nearest_resize(labels, features.shape[1], features.shape[2], axes=(1, 2))
        onehot = labels_to_onehot(grid.reshape(-1), k)
        sums += onehot.T @ features.data.reshape(-1, d)
        counts += onehot.sum(axis=0).astype(np.int64)
    centroids = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return PrototypeSet(centroids=centroids, counts=counts)


def softmax_over_distances(distances: np.ndarray, empty: np.ndarray) -> np.ndarray:
    """Softmax of -distance over the last axis, skipping classes flagged empty."""
    if np.all(empty):
        raise ConfigurationError("Every class prototype is empty; cannot build ensemble weights")
    scores = np.where(empty, -np.inf, -distances)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.where(empty, 0.0, np.exp(scores))
    return e / e.sum(axis=-1, keepdims=True)


def feature_distances(features: np.ndarray, centroids: np.ndarray, distance: str = "l2") -> np.ndarray:
    """Distance from every feature vector (..., D) to every centroid (K, D) -> (..., K)."""
    diff = features[..., None, :] - centroids
    if distance == "l2":
        return np.sqrt(np.sum(diff * diff, axis=-1))
    if distance == "l1":
        return np.sum(np.abs(diff), axis=-1)
    raise ArgumentError(f"Unknown distance '{distance}'")


def adaptive_weights(features, prototypes: PrototypeSet, distance: str = "l2") -> np.ndarray:
    """
    Per-pixel, per-class ensemble weights from feature-to-centroid distances.

    Args:
        features: (..., H', W', D) teacher features
        prototypes: That teacher's centroids
        distance: 'l2' or 'l1'

    Returns:
        (..., H', W', K) weights; each pixel's row sums to 1 over non-empty classes
    """
    features = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if features.shape[-1] != prototypes.centroids.shape[1]:
        raise ArgumentError(
            f"Feature dim {features.shape[-1]} does not match centroids {prototypes.centroids.shape}"
        )
    return softmax_over_distances(feature_distances(features, prototypes.centroids, distance), prototypes.empty)


def _align_weights(w: Optional[np.ndarray], like: np.ndarray) -> np.ndarray:
    if w is None:
        return np.ones_like(like)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != like.ndim or w.shape[-1] != like.shape[-1] or w.shape[:-3] != like.shape[:-3]:
        raise ArgumentError(f"Ensemble weights {w.shape} do not match logits {like.shape}")
    if w.shape[-3:-1] != like.shape[-3:-1]:
        w = nearest_resize(w, like.shape[-3], like.shape[-2], axes=(w.ndim - 3, w.ndim - 2))
    return w


def ensemble_probs(
    logits_c,
    w_c: Optional[np.ndarray],
    logits_f,
    w_f: Optional[np.ndarray],
    ensemble: str = "adaptive",
    temperature: float = 1.0,
) -> np.ndarray:
    """(w_C * softmax(logits_C) + w_F * softmax(logits_F)) / 2; uniform ensemble uses w = 1."""
    lc = logits_c.data if isinstance(logits_c, Tensor) else np.asarray(logits_c, dtype=np.float64)
    lf = logits_f.data if isinstance(logits_f, Tensor) else np.asarray(logits_f, dtype=np.float64)
    if lc.shape != lf.shape:
        raise ArgumentError(f"Teacher logits disagree: {lc.shape} vs {lf.shape}")
    if ensemble == "uniform":
        w_c = w_f = None
    elif ensemble != "adaptive":
        raise ArgumentError(f"Unknown ensemble '{ensemble}'")
    with no_grad():
        pc = softmax(lc / temperature, axis=-1).data
        pf = softmax(lf / temperature, axis=-1).data
    return (_align_weights(w_c, lc) * pc + _align_weights(w_f, lf) * pf) / 2.0


def ensemble_pseudo_label(logits_c, w_c, logits_f, w_f, ensemble: str = "adaptive") -> np.ndarray:
    """Argmax of the weighted two-teacher ensemble (lowest class wins ties)."""
    return np.argmax(ensemble_probs(logits_c, w_c, logits_f, w_f, ensemble), axis=-1)


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Normalised 1-D Gaussian taps with radius round(truncate * sigma)."""
    if sigma <= 0:
        return np.ones(1)
    radius = max(int(truncate * sigma + 0.5), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes with periodic padding."""
    if sigma <= 0:
        return np.array(image, dtype=np.float64)
    out = ndimage.gaussian_filter1d(
        np.asarray(image, dtype=np.float64), sigma, axis=0, mode="wrap", truncate=truncate
    )
    return ndimage.gaussian_filter1d(out, sigma, axis=1, mode="wrap", truncate=truncate)


def _grayscale(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114])


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Scale brightness, contrast and saturation by the given factors (1 = unchanged)."""
    out = np.asarray(image, dtype=np.float64)
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        mean = _grayscale(out).mean()
        out = np.clip(mean + (out - mean) * contrast, 0.0, 1.0)
    if saturation != 1.0:
        gray = _grayscale(out)[..., None]
        out = np.clip(gray + (out - gray) * saturation, 0.0, 1.0)
    return out


def augment_target(x_t: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Photometric augmentation of target images: colour jitter then Gaussian blur.

    No geometric change, so pseudo-labels stay aligned. Accepts one (H, W, C)
    image or a (B, H, W, C) batch; output is clamped to [0, 1].
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim == 4:
        return np.stack([augment_target(img, cfg, rng) for img in x_t])

    def factor(strength: float) -> float:
        return float(rng.uniform(1.0 - strength, 1.0 + strength)) if strength > 0 else 1.0

    out = x_t
    jitter = rng.random() < cfg.jitter_prob
    b, c, s = factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation)
    if jitter:
        out = color_jitter(out, b, c, s)
    blur = rng.random() < cfg.blur_prob
    lo, hi = cfg.blur_sigma
    sigma = float(rng.uniform(lo, hi)) if hi > lo else lo
    if blur and sigma > 0:
        out = gaussian_blur(out, sigma, cfg.truncate)
    return np.clip(out, 0.0, 1.0)


def student_loss_terms(
    student: SegModel,
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t_aug: np.ndarray,
    target: Optional[np.ndarray],
    cfg: DistillConfig,
) -> Tuple[Tensor, Tensor]:
    """
    Source CE and distillation term of the student objective.

    Args:
        student: Student model
        x_s, y_s: Source images and labels
        x_t_aug: Augmented target images
        target: Hard mode: ensembled label maps. Soft mode: ensembled
            probability fields (teacher side of the KL)
        cfg: Distillation settings

    Returns:
        (loss_src, loss_distill)
    """
    if target is None:
        raise ArgumentError(f"{cfg.mode} distillation needs ensembled targets")
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t_aug = np.asarray(x_t_aug, dtype=np.float64)
    y_s = np.asarray(y_s)
    target = np.asarray(target)
    k = student.num_classes

    _, logits_src = forward(student, x_s)
    loss_src = weighted_cross_entropy(softmax(logits_src), labels_to_onehot(y_s, k), None, cfg.reduction)
    _, logits_t = forward(student, x_t_aug)
    if cfg.mode == "hard":
        if target.shape != logits_t.shape[:-1]:
            raise ArgumentError(f"Hard targets {target.shape} do not match logits {logits_t.shape}")
        loss_distill = weighted_cross_entropy(softmax(logits_t), labels_to_onehot(target, k), None, cfg.reduction)
    else:
        if target.shape != logits_t.shape:
            raise ArgumentError(f"Soft targets {target.shape} do not match logits {logits_t.shape}")
        t = cfg.temperature
        student_probs = softmax(logits_t * (1.0 / t), axis=-1)
        loss_distill = kl_divergence(student_probs, target, cfg.reduction) * (t * t)
    return loss_src, loss_distill


def student_loss(student, x_s, y_s, x_t_aug, target, cfg: DistillConfig) -> Tensor:
    """L_S = L_src + L_distill."""
    loss_src, loss_distill = student_loss_terms(student, x_s, y_s, x_t_aug, target, cfg)
    return loss_src + loss_distill


def distill_targets(
    teacher_c: Teacher,
    teacher_f: Teacher,
    prototypes: Tuple[PrototypeSet, PrototypeSet],
    x_t: np.ndarray,
    cfg: DistillConfig,
) -> np.ndarray:
    """Ensembled targets on clean target images: label maps (hard) or probabilities (soft)."""
    with no_grad():
        feat_c, logits_c = forward(_model_of(teacher_c), x_t)
        feat_f, logits_f = forward(_model_of(teacher_f), x_t)
    if cfg.ensemble == "adaptive":
        w_c = adaptive_weights(feat_c, prototypes[0], cfg.distance)
        w_f = adaptive_weights(feat_f, prototypes[1], cfg.distance)
    else:
        w_c = w_f = None
    if cfg.mode == "hard":
        return ensemble_pseudo_label(logits_c, w_c, logits_f, w_f, cfg.ensemble)
    probs = ensemble_probs(logits_c, w_c, logits_f, w_f, cfg.ensemble, cfg.temperature)
    return probs / probs.sum(axis=-1, keepdims=True)


CKD_LOG_COLUMNS = ["step", "loss_src", "loss_distill", "lr"]


def ckd_stage(
    student: SegModel,
    teacher_c: Teacher,
    teacher_f: Teacher,
    data,
    cfg: DistillConfig,
    rng: RngState,
    prototypes: Optional[Tuple[PrototypeSet, PrototypeSet]] = None,
    optimizer: Optional[OptimizerState] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
) -> SegModel:
    """
    Distil both path teachers into the student.

    Centroids are computed once before the loop (unless given). Each step
    draws (x_s, y_s, x_t), ensembles the teachers on clean x_t, augments x_t
    and minimises source CE + distillation loss.

    Args:
        student: Student model, updated in place
        teacher_c: Region-path teacher
        teacher_f: Class-path teacher
        data: TrainingData
        cfg: Distillation settings
        rng: Stage random state (streams 'batches' and 'augment')
        prototypes: Precomputed (region, class) centroids
        optimizer: Optimizer state; fresh by default
        log_path: CSV file for per-step scalars
        progress: Show a progress bar

    Returns:
        The trained student
    """
    if _model_of(teacher_c).arch != student.arch or _model_of(teacher_f).arch != student.arch:
        raise ArgumentError("Teacher and student architectures differ")
    if prototypes is None:
        prototypes = (
            compute_centroids(teacher_c, data.target_images),
            compute_centroids(teacher_f, data.target_images),
        )
    optimizer = optimizer or make_optimizer(total_steps=cfg.steps)
    sampler = data.stage_sampler(rng.stream("batches"))
    aug_rng = rng.stream("augment")
    step_log = StepLogger(log_path, CKD_LOG_COLUMNS)
    start = time.time()

    for step in tqdm(range(1, cfg.steps + 1), desc="CKD", disable=not progress):
        x_s, y_s = sampler.next_source(cfg.batch_size)
        x_t = sampler.next_target(cfg.batch_size)
        target = distill_targets(teacher_c, teacher_f, prototypes, x_t, cfg)
        x_t_aug = augment_target(x_t, cfg.augment, aug_rng)

        student.zero_grad()
        loss_src, loss_distill = student_loss_terms(student, x_s, y_s, x_t_aug, target, cfg)
        backward(loss_src + loss_distill)
        optimizer_step(student, optimizer)

        step_log.log(
            step=step,
            loss_src=loss_src.item(),
            loss_distill=loss_distill.item(),
            lr=optimizer.lr_for("classifier.weight", optimizer.step),
        )
    step_log.close()
    logger.debug(f"CKD finished {cfg.steps} steps in {time.time() - start:.2f} seconds")
    return student
