"""
Toy segmentation model: strided conv feature extractor + 1x1 classifier,
with its AdamW optimizer and parameter copy helpers.
"""
from dataclasses import dataclass, field, asdict, replace
from typing import Dict, Optional, Tuple, Any

import numpy as np

from numerics import (
    Tensor, RngState, conv2d, relu, bilinear_upsample, as_tensor, tensor,
)
from utils import ArgumentError, TrainingError


@dataclass(frozen=True)
class ArchSpec:
    """Layer layout of the toy network."""
    in_channels: int = 3
    widths: Tuple[int, ...] = (16, 32, 32)
    strides: Tuple[int, ...] = (2, 2, 2)
    kernel_size: int = 3
    num_classes: int = 6
    input_size: Tuple[int, int] = (64, 64)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def output_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feature_size(self) -> Tuple[int, int]:
        h, w = self.input_size
        for s in self.strides:
            h = (h + 2 * (self.kernel_size // 2) - self.kernel_size) // s + 1
            w = (w + 2 * (self.kernel_size // 2) - self.kernel_size) // s + 1
        return h, w

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["widths"] = list(self.widths)
        data["strides"] = list(self.strides)
        data["input_size"] = list(self.input_size)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchSpec":
        data = dict(data)
        for key in ("widths", "strides", "input_size"):
            if key in data:
                data[key] = tuple(int(v) for v in data[key])
        return cls(**data)


class SegModel:
    """
    Feature extractor + pixel classifier.

    Parameters are kept in an ordered dict; names starting with ``extractor.``
    belong to the backbone, ``classifier.`` to the head.
    """

    def __init__(self, arch: ArchSpec, params: Dict[str, Tensor]):
        self.arch = arch
        self.params = params

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def feature_dim(self) -> int:
        return self.arch.feature_dim

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def requires_grad_(self, flag: bool) -> "SegModel":
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise ArgumentError("State dict names do not match the model parameters")
        for name, value in state.items():
            if value.shape != self.params[name].shape:
                raise ArgumentError(f"Parameter {name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name].data = np.array(value, dtype=np.float64)

    def __call__(self, image) -> Tuple[Tensor, Tensor]:
        return forward(self, image)


def _layer_shapes(arch: ArchSpec) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    c_in = arch.in_channels
    for i, width in enumerate(arch.widths, start=1):
        shapes[f"extractor.conv{i}.weight"] = (arch.kernel_size, arch.kernel_size, c_in, width)
        shapes[f"extractor.conv{i}.bias"] = (width,)
        c_in = width
    shapes["classifier.weight"] = (1, 1, c_in, arch.num_classes)
    shapes["classifier.bias"] = (arch.num_classes,)
    return shapes


def init_std(shape: Tuple[int, ...], name: str) -> float:
    """Kaiming fan-in standard deviation; the classifier uses gain 1 instead of 2."""
    fan_in = int(np.prod(shape[:-1]))
    gain = 1.0 if name.startswith("classifier.") else 2.0
    return float(np.sqrt(gain / fan_in))


def init_model(arch: ArchSpec, num_classes: Optional[int], rng: RngState) -> SegModel:
    """
    Build a model with Kaiming fan-in normal weights and zero biases.

    Each layer draws from its own stream named ``init/<param name>``, so the
    same seed always produces the same parameters.

    Args:
        arch: Layer layout
        num_classes: Class count K; ``None`` keeps ``arch.num_classes``
        rng: Seeded streams

    Returns:
        A freshly initialised SegModel
    """
    if num_classes is not None:
        arch = replace(arch, num_classes=int(num_classes))
    if len(arch.widths) != len(arch.strides) or not arch.widths:
        raise ArgumentError("ArchSpec needs one stride per extractor width")
    if arch.num_classes < 2:
        raise ArgumentError(f"Need at least 2 classes, got {arch.num_classes}")
    params: Dict[str, Tensor] = {}
    for name, shape in _layer_shapes(arch).items():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            values = rng.stream(f"init/{name}").normal(0.0, init_std(shape, name), size=shape)
        params[name] = tensor(values, requires_grad=True)
    return SegModel(arch, params)


def forward(model: SegModel, image) -> Tuple[Tensor, Tensor]:
    """
    Run the network.

    Args:
        model: The segmentation model
        image: (H, W, C) or (B, H, W, C) array/tensor

    Returns:
        (features, logits): features at the reduced grid (.., H', W', D) and
        logits upsampled to the input resolution (.., H, W, K). A 3-D input
        yields outputs without the batch axis.
    """
    x = as_tensor(image)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    arch = model.arch
    if x.ndim != 4 or x.shape[1:] != (arch.input_size[0], arch.input_size[1], arch.in_channels):
        raise ArgumentError(
            f"Input shape {x.shape} does not match {arch.input_size + (arch.in_channels,)}"
        )
    h = x
    for i, stride in enumerate(arch.strides, start=1):
        h = relu(conv2d(
            h,
            model.params[f"extractor.conv{i}.weight"],
            model.params[f"extractor.conv{i}.bias"],
            stride=stride,
            padding=arch.kernel_size // 2,
        ))
    features = h
    coarse = conv2d(features, model.params["classifier.weight"], model.params["classifier.bias"])
    logits = bilinear_upsample(coarse, arch.input_size[0], arch.input_size[1])
    if single:
        features = features.reshape(features.shape[1:])
        logits = logits.reshape(logits.shape[1:])
    return features, logits


def copy_params(src: SegModel, dst: SegModel) -> None:
    """Deep-copy every parameter of ``src`` into ``dst`` (optimizer state is not touched)."""
    if src.arch != dst.arch:
        raise ArgumentError(f"Architecture mismatch: {src.arch} vs {dst.arch}")
    for name, p in src.params.items():
        dst.params[name].data = p.data.copy()


def clone_model(src: SegModel, requires_grad: bool = True) -> SegModel:
    params = {name: tensor(p.data, requires_grad=requires_grad) for name, p in src.params.items()}
    return SegModel(src.arch, params)


@dataclass
class OptimizerState:
    """
    AdamW moments, step counter and learning-rate schedule.

    The schedule is a linear warmup over ``warmup_steps`` followed by linear
    decay to zero at ``total_steps``; ``total_steps=None`` keeps the rate
    constant after warmup.
    """
    lr_head: float = 1e-2
    lr_backbone: float = 1e-3
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    total_steps: Optional[int] = None
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_factor(self, step: int) -> float:
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return step / self.warmup_steps
        if self.total_steps is None:
            return 1.0
        remaining = self.total_steps - step
        span = max(self.total_steps - self.warmup_steps, 1)
        return max(0.0, remaining / span)

    def lr_for(self, name: str, step: int) -> float:
        base = self.lr_head if name.startswith("classifier.") else self.lr_backbone
        return base * self.lr_factor(step)


def make_optimizer(
    lr_head: float = 1e-2,
    lr_backbone: float = 1e-3,
    weight_decay: float = 0.01,
    total_steps: Optional[int] = None,
    warmup_fraction: float = 0.05,
) -> OptimizerState:
    """Fresh optimizer state with warmup set to a fraction of the stage length."""
    warmup = int(round(warmup_fraction * total_steps)) if total_steps else 0
    return OptimizerState(
        lr_head=lr_head,
        lr_backbone=lr_backbone,
        weight_decay=weight_decay,
        warmup_steps=warmup,
        total_steps=total_steps,
    )


def optimizer_step(
    model: SegModel,
    state: OptimizerState,
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[SegModel, OptimizerState]:
    """
    Apply one AdamW update with decoupled weight decay.

    Args:
        model: Model to update in place
        state: Optimizer state, updated in place
        grads: Gradients per parameter name; defaults to each parameter's ``grad``

    Returns:
        The updated (model, state)
    """
    if grads is None:
        grads = {name: p.grad for name, p in model.params.items()}
    for name, p in model.params.items():
        g = grads.get(name)
        if g is None:
            raise ArgumentError(f"Missing gradient for {name}")
        if g.shape != p.shape:
            raise ArgumentError(f"Gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"Non-finite gradient for {name}")

    state.step += 1
    t = state.step
    beta1, beta2 = state.betas
    for name, p in model.params.items():
        g = grads[name]
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        lr = state.lr_for(name, t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)
    return model, state
