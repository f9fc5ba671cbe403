"""
One self-training path of dual-path domain bridging.

An EMA teacher pseudo-labels target images, source pixels are pasted onto
them (region or class masks), target-provenance pixels are down-weighted by
the teacher's confident-pixel ratio, and the student minimises source CE plus
weighted bridging CE. The teacher follows the student by EMA after each step.
"""
import time
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from mixing import (
    MixedSample, InterpolationParams, labels_to_onehot, sample_region_mask,
    select_half_classes, class_mask, present_classes, apply_local_mix, apply_interpolation_mix,
)
from model import SegModel, OptimizerState, forward, clone_model, make_optimizer, optimizer_step
from numerics import RngState, Tensor, softmax, weighted_cross_entropy, backward, no_grad
from utils import ArgumentError, ConfigurationError, StepLogger, get_logger

logger = get_logger(__name__)

BRIDGE_KINDS = ("region", "class", "interpolation", "none")


@dataclass
class PathConfig:
    """
    Settings of one bridging path.

    ``kind='none'`` trains plain pseudo-label self-training without pasting,
    ``kind='interpolation'`` uses the global interpolation mix.
    """
    kind: str = "region"
    area_ratio: float = 0.3
    tau: float = 0.968
    alpha: float = 0.99
    steps: int = 2000
    batch_size: int = 4
    beta_a: float = 2.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in BRIDGE_KINDS:
            raise ConfigurationError(f"Unknown path kind '{self.kind}', expected one of {BRIDGE_KINDS}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0.0 < self.area_ratio < 1.0:
            raise ConfigurationError(f"area_ratio must lie in (0, 1), got {self.area_ratio}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.reduction not in ("sum", "mean"):
            raise ConfigurationError(f"Unknown reduction '{self.reduction}'")

    def to_dict(self) -> Dict:
        return asdict(self)


class EmaTeacher:
    """
    Gradient-free copy of a student that tracks it by exponential moving average.

    Attributes:
        model: The teacher network; its parameters never require grad
        alpha: Momentum of the moving average
    """

    def __init__(self, model: SegModel, alpha: float = 0.99):
        if not 0.0 <= alpha <= 1.0:
            raise ArgumentError(f"EMA momentum must lie in [0, 1], got {alpha}")
        self.model = model.requires_grad_(False)
        self.alpha = float(alpha)

    @classmethod
    def from_student(cls, student: SegModel, alpha: float = 0.99) -> "EmaTeacher":
        return cls(clone_model(student, requires_grad=False), alpha)


def ema_update(teacher: EmaTeacher, student_params: Union[SegModel, Dict[str, object]]) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, element-wise."""
    if isinstance(student_params, SegModel):
        if student_params.arch != teacher.model.arch:
            raise ArgumentError("EMA update between different architectures")
        student_params = student_params.params
    if list(student_params) != list(teacher.model.params):
        raise ArgumentError("EMA update: parameter names differ")
    alpha = teacher.alpha
    for name, p in teacher.model.params.items():
        q = student_params[name]
        q = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
        if q.shape != p.shape:
            raise ArgumentError(f"EMA update: {name} has shape {q.shape}, expected {p.shape}")
        p.data = alpha * p.data + (1.0 - alpha) * q


@dataclass
class PseudoLabelPack:
    """
    Teacher output on target images.

    Attributes:
        labels: Argmax labels, (H, W) or (B, H, W)
        confidence: Max softmax probability per pixel, same shape
        m_t: Fraction of pixels with confidence > tau; float or (B,) array
        tau: Confidence threshold
    """
    labels: np.ndarray
    confidence: np.ndarray
    m_t: Union[float, np.ndarray]
    tau: float


def confident_ratio(confidence: np.ndarray, tau: float) -> Union[float, np.ndarray]:
    """Count of pixels with confidence > tau divided by H*W (per image)."""
    confidence = np.asarray(confidence)
    h, w = confidence.shape[-2:]
    counts = np.count_nonzero(confidence > tau, axis=(-2, -1))
    ratio = counts / float(h * w)
    return float(ratio) if confidence.ndim == 2 else ratio


def pseudo_labels_from_logits(logits: np.ndarray, tau: float) -> PseudoLabelPack:
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    with no_grad():
        probs = softmax(logits, axis=-1).data
    return PseudoLabelPack(
        labels=np.argmax(probs, axis=-1),
        confidence=probs.max(axis=-1),
        m_t=confident_ratio(probs.max(axis=-1), tau),
        tau=float(tau),
    )


def make_pseudo_labels(teacher: Union[EmaTeacher, SegModel], x_t: np.ndarray, tau: float) -> PseudoLabelPack:
    """
    Pseudo-label target images with the teacher (no graph is recorded).

    Args:
        teacher: EMA teacher or plain model
        x_t: (H, W, C) or (B, H, W, C) target images
        tau: Confidence threshold for m_t

    Returns:
        PseudoLabelPack
    """
    model = teacher.model if isinstance(teacher, EmaTeacher) else teacher
    with no_grad():
        _, logits = forward(model, x_t)
    return pseudo_labels_from_logits(logits.data, tau)


def build_weight_map(mask: np.ndarray, m_t: float) -> np.ndarray:
    """Per-pixel weight: 1 on source-provenance pixels, m_t elsewhere."""
    if not 0.0 <= m_t <= 1.0:
        raise ArgumentError(f"m_t must lie in [0, 1], got {m_t}")
    mask = np.asarray(mask)
    return np.where(mask == 1, 1.0, float(m_t))


def _stack_mixed(mixed: Union[MixedSample, Sequence[MixedSample]], num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    samples = [mixed] if isinstance(mixed, MixedSample) else list(mixed)
    images = np.stack([np.asarray(m.image, dtype=np.float64) for m in samples])
    targets = np.stack([
        np.asarray(m.label, dtype=np.float64) if m.kind == "interpolation"
        else labels_to_onehot(m.label, num_classes)
        for m in samples
    ])
    return images, targets


def path_loss_terms(
    model: SegModel,
    x_s: np.ndarray,
    y_s: np.ndarray,
    mixed: Union[MixedSample, Sequence[MixedSample]],
    w: np.ndarray,
    reduction: str = "sum",
) -> Tuple[Tensor, Tensor]:
    """
    Source CE and weighted bridging CE of one path.

    Args:
        model: Student being trained
        x_s: Source images, (H, W, C) or (B, H, W, C)
        y_s: Source label maps, (H, W) or (B, H, W)
        mixed: One MixedSample or a batch of them
        w: Weight map(s), (H, W) or (B, H, W)
        reduction: 'sum' (the formula as written) or 'mean' per pixel

    Returns:
        (loss_src, loss_brg) scalar tensors
    """
    x_s = np.asarray(x_s, dtype=np.float64)
    y_s = np.asarray(y_s)
    w = np.asarray(w, dtype=np.float64)
    if x_s.ndim == 3:
        x_s, y_s = x_s[None], y_s[None]
    if w.ndim == 2:
        w = w[None]
    k = model.num_classes
    images, targets = _stack_mixed(mixed, k)
    if y_s.shape != x_s.shape[:3] or w.shape != images.shape[:3] or targets.shape[:3] != images.shape[:3]:
        raise ArgumentError(
            f"Path loss shapes disagree: x_s {x_s.shape}, y_s {y_s.shape}, "
            f"mixed {images.shape}, w {w.shape}"
        )

    _, logits_src = forward(model, x_s)
    loss_src = weighted_cross_entropy(softmax(logits_src), labels_to_onehot(y_s, k), None, reduction)
    _, logits_mix = forward(model, images)
    loss_brg = weighted_cross_entropy(softmax(logits_mix), targets, w, reduction)
    return loss_src, loss_brg


def path_loss(
    model: SegModel,
    x_s: np.ndarray,
    y_s: np.ndarray,
    mixed: Union[MixedSample, Sequence[MixedSample]],
    w: np.ndarray,
    reduction: str = "sum",
) -> Tensor:
    """L = L_src + L_brg for one path."""
    loss_src, loss_brg = path_loss_terms(model, x_s, y_s, mixed, w, reduction)
    return loss_src + loss_brg


def build_bridging_batch(
    cfg: PathConfig,
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray,
    pack: PseudoLabelPack,
    num_classes: int,
    rng: np.random.Generator,
) -> Tuple[List[MixedSample], np.ndarray]:
    """Mix every (source, target) pair of the batch and build its weight map."""
    batch, height, width = y_s.shape
    m_t = np.atleast_1d(pack.m_t)
    samples: List[MixedSample] = []
    weights = np.empty((batch, height, width), dtype=np.float64)
    for b in range(batch):
        if cfg.kind == "interpolation":
            sample = apply_interpolation_mix(
                x_s[b], labels_to_onehot(y_s[b], num_classes),
                x_t[b], labels_to_onehot(pack.labels[b], num_classes),
                InterpolationParams(a=cfg.beta_a), rng,
            )
            weights[b] = sample.lam + (1.0 - sample.lam) * m_t[b]
            samples.append(sample)
            continue
        if cfg.kind == "region":
            mask = sample_region_mask(height, width, cfg.area_ratio, rng)
        elif cfg.kind == "class" and present_classes(y_s[b]).size:
            mask = class_mask(y_s[b], select_half_classes(y_s[b], rng))
        else:
            mask = np.zeros((height, width), dtype=np.uint8)
        sample = apply_local_mix(x_s[b], y_s[b], x_t[b], pack.labels[b], mask, kind=cfg.kind)
        weights[b] = build_weight_map(sample.mask, m_t[b])
        samples.append(sample)
    return samples, weights


DPDB_LOG_COLUMNS = ["step", "loss_src", "loss_brg", "m_t_mean", "lr"]


def dpdb_stage(
    student: SegModel,
    teacher: EmaTeacher,
    data,
    cfg: PathConfig,
    rng: RngState,
    optimizer: Optional[OptimizerState] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
) -> Tuple[SegModel, EmaTeacher]:
    """
    Train one bridging path.

    Every step draws (x_s, y_s, x_t), pseudo-labels x_t with the teacher,
    builds the mix and weight map, minimises L_src + L_brg and updates the
    teacher by EMA.

    Args:
        student: Path model, updated in place
        teacher: EMA teacher initialised from the student
        data: TrainingData (cyclic source/target batches)
        cfg: Path settings
        rng: Stage random state (streams 'batches' and 'mix')
        optimizer: Optimizer state; a fresh one spanning ``cfg.steps`` by default
        log_path: CSV file for per-step scalars
        progress: Show a progress bar

    Returns:
        (student, teacher)
    """
    if teacher.model.arch != student.arch:
        raise ArgumentError("Teacher and student architectures differ")
    optimizer = optimizer or make_optimizer(total_steps=cfg.steps)
    sampler = data.stage_sampler(rng.stream("batches"))
    mix_rng = rng.stream("mix")
    step_log = StepLogger(log_path, DPDB_LOG_COLUMNS)
    start = time.time()

    for step in tqdm(range(1, cfg.steps + 1), desc=f"DPDB[{cfg.kind}]", disable=not progress):
        x_s, y_s = sampler.next_source(cfg.batch_size)
        x_t = sampler.next_target(cfg.batch_size)
        pack = make_pseudo_labels(teacher, x_t, cfg.tau)
        mixed, weights = build_bridging_batch(cfg, x_s, y_s, x_t, pack, student.num_classes, mix_rng)

        student.zero_grad()
        loss_src, loss_brg = path_loss_terms(student, x_s, y_s, mixed, weights, cfg.reduction)
        loss = loss_src + loss_brg
        backward(loss)
        optimizer_step(student, optimizer)
        ema_update(teacher, student)

        step_log.log(
            step=step,
            loss_src=loss_src.item(),
            loss_brg=loss_brg.item(),
            m_t_mean=float(np.mean(pack.m_t)),
            lr=optimizer.lr_for("classifier.weight", optimizer.step),
        )
    step_log.close()
    logger.debug(f"DPDB[{cfg.kind}] finished {cfg.steps} steps in {time.time() - start:.2f} seconds")
    return student, teacher
