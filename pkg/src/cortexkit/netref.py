"""Forward-only reference math of the segmentation network.

Feature maps are ``(H, W, C)`` float arrays. Nothing here trains; weights
are supplied by the caller or drawn from a seeded generator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ProbNotNormalized, ShapeMismatch
from .io import LabelTable

BN_EPS = 1e-5
CE_EPS = 1e-12
DICE_EPS = 1e-7
DEFAULT_VIEW_WEIGHTS = (1.0, 1.0, 0.5)


def maxout(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise maximum over equally shaped feature maps."""
    if len(inputs) == 0:
        raise ShapeMismatch("maxout needs at least one input")
    shape = np.shape(inputs[0])
    for x in inputs[1:]:
        if np.shape(x) != shape:
            raise ShapeMismatch(f"maxout inputs {shape} vs {np.shape(x)}")
    out = np.array(inputs[0], dtype=float, copy=True)
    for x in inputs[1:]:
        np.maximum(out, x, out=out)
    return out


# ---------------------------------------------------------------------------
# composite units and blocks


@dataclass
class BatchNorm:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.running_var) <= 0):
            raise ValueError("BN running variance must be positive")

    @classmethod
    def identity(cls, c: int) -> "BatchNorm":
        return cls(np.ones(c), np.zeros(c), np.zeros(c), np.full(c, 1.0 - BN_EPS))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != len(self.scale):
            raise ShapeMismatch(f"BN expects {len(self.scale)} channels, got {x.shape[-1]}")
        return (x - self.running_mean) / np.sqrt(self.running_var + BN_EPS) * self.scale + self.shift


@dataclass
class CompositeUnit:
    """PReLU -> conv -> BN; with ``input_bn`` set the PReLU is replaced by a BN."""

    kernel: np.ndarray  # (k, k, C_in, C_out)
    bn: BatchNorm
    prelu_slope: np.ndarray | None = None
    input_bn: BatchNorm | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        k = self.kernel.shape[0]
        if self.kernel.ndim != 4 or self.kernel.shape[1] != k or k % 2 == 0:
            raise ShapeMismatch(f"kernel must be (k, k, C_in, C_out) with odd k, got {self.kernel.shape}")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[2]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[3]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.c_in:
            raise ShapeMismatch(f"unit expects {self.c_in} input channels, got {x.shape[-1]}")
        if self.input_bn is not None:
            x = self.input_bn(x)
        else:
            x = prelu(x, self.prelu_slope)
        return self.bn(conv2d(x, self.kernel, self.bias))


@dataclass
class BlockWeights:
    units: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.units) != 3:
            raise ShapeMismatch("a block has exactly three composite units")


def prelu(x: np.ndarray, slope) -> np.ndarray:
    slope = np.zeros(x.shape[-1]) if slope is None else np.asarray(slope)
    return np.where(x >= 0, x, slope * x)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """Stride-1 same-padded 2D convolution (cross-correlation) with zero borders."""
    k = kernel.shape[0]
    r = k // 2
    padded = np.pad(x, ((r, r), (r, r), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, C, k, k)
    out = np.einsum("hwcij,ijco->hwo", windows, kernel, optimize=True)
    if bias is not None:
        out = out + bias
    return out


def dense_block_forward(x: np.ndarray, w: BlockWeights) -> np.ndarray:
    """Concatenating dense block; channel order is newest features first."""
    h1, h2, h3 = w.units
    y1 = np.concatenate([h1(x), x], axis=-1)
    y2 = np.concatenate([h2(y1), y1], axis=-1)  # == concat(H2(y1), H1(x), x)
    return h3(y2)


def competitive_block_forward(x: np.ndarray, w: BlockWeights, first_block: bool = False) -> np.ndarray:
    """Maxout block; intermediates keep the channel count of ``x``.

    In the first block the raw input may have fewer channels than the block
    width; the first maxout is then skipped since there is nothing to compete.
    """
    h1, h2, h3 = w.units
    if first_block and h1.input_bn is None:
        raise ShapeMismatch("first block unit 1 needs an input BN in place of PReLU")
    a = h1(x)
    if a.shape == x.shape:
        y1 = maxout([a, x])
    elif first_block:
        y1 = a
    else:
        raise ShapeMismatch(f"competitive block keeps channels: H1 gave {a.shape}, input {x.shape}")
    b = h2(y1)
    if b.shape != y1.shape:
        raise ShapeMismatch(f"H2 output {b.shape} vs {y1.shape}")
    y2 = maxout([b, y1])
    return h3(y2)


def random_block(
    rng: np.random.Generator,
    c_in: int,
    width: int,
    kernel: int = 5,
    variant: str = "competitive",
    first_block: bool = False,
) -> BlockWeights:
    """Seeded weights for one block of either variant."""
    if variant == "dense":
        ins = [c_in, c_in + width, c_in + 2 * width]
    else:
        ins = [c_in, width, width]
    units = []
    for j, ci in enumerate(ins):
        kern = rng.normal(scale=1.0 / np.sqrt(kernel * kernel * ci), size=(kernel, kernel, ci, width))
        bn = BatchNorm(
            rng.uniform(0.5, 1.5, width), rng.normal(scale=0.1, size=width),
            rng.normal(scale=0.1, size=width), rng.uniform(0.5, 1.5, width),
        )
        if j == 0 and first_block:
            in_bn = BatchNorm(
                rng.uniform(0.5, 1.5, ci), rng.normal(scale=0.1, size=ci),
                rng.normal(scale=0.1, size=ci), rng.uniform(0.5, 1.5, ci),
            )
            units.append(CompositeUnit(kern, bn, input_bn=in_bn))
        else:
            units.append(CompositeUnit(kern, bn, prelu_slope=rng.uniform(0.0, 0.5, ci)))
    return BlockWeights(units)


# ---------------------------------------------------------------------------
# parameter accounting


class Variant(str, enum.Enum):
    DENSE = "dense"
    COMPETITIVE = "competitive"


def conv_params(kernel: int, c_in: int, c_out: int, bias: bool = True) -> int:
    return kernel * kernel * c_in * c_out + (c_out if bias else 0)


def block_params(c_in: int, width: int, kernel: int, variant, first_block: bool = False, bias: bool = True) -> int:
    """Learnables of one block: three convs, two BN affine params per channel, PReLU slopes."""
    variant = Variant(variant)
    if variant is Variant.DENSE:
        ins = [c_in, c_in + width, c_in + 2 * width]
    else:
        ins = [c_in, width, width]
    total = 0
    for j, ci in enumerate(ins):
        total += conv_params(kernel, ci, width, bias) + 2 * width
        total += 2 * ci if (j == 0 and first_block) else ci
    return total


@dataclass(frozen=True)
class NetworkConfig:
    """Encoder/decoder stack: ``channels`` gives each block's width, encoders then decoders."""

    channels: tuple = (64,) * 8
    kernel: int = 5
    in_channels: int = 7
    n_classes: int = 78
    bottleneck: bool = True
    bias: bool = True

    @classmethod
    def constant(cls, width: int, kernel: int = 5, n_encoders: int = 4, **kw) -> "NetworkConfig":
        return cls(channels=(width,) * (2 * n_encoders), kernel=kernel, **kw)


def count_params(config: NetworkConfig, variant) -> int:
    """Exact conv + PReLU + BN learnable count.

    Skip connections merge by maxout in both variants, so decoder blocks take
    ``width`` input channels either way and only the blocks themselves differ.
    """
    total = 0
    c_prev = config.in_channels
    n_enc = len(config.channels) // 2
    for i, width in enumerate(config.channels):
        if i == n_enc and config.bottleneck:
            total += conv_params(config.kernel, c_prev, c_prev, config.bias) + 2 * c_prev
        total += block_params(c_prev, width, config.kernel, variant, first_block=(i == 0), bias=config.bias)
        c_prev = width
    total += conv_params(1, c_prev, config.n_classes, config.bias)
    return total


# ---------------------------------------------------------------------------
# spatial information aggregation and view aggregation


def stack_slices(volume: np.ndarray, axis: int, index: int, half_width: int = 3) -> np.ndarray:
    """``2 * half_width + 1`` neighbouring slices as channels, edge slices replicated."""
    volume = np.asarray(volume)
    n = volume.shape[axis]
    if n < 1:
        raise ShapeMismatch("volume has no slices along axis")
    idx = np.clip(np.arange(index - half_width, index + half_width + 1), 0, n - 1)
    return np.stack([np.take(volume, i, axis=axis) for i in idx], axis=-1)


def _check_normalized(p: np.ndarray, name: str, tol: float = 1e-5) -> None:
    s = p.sum(axis=-1)
    if np.any(p < -tol) or np.any(np.abs(s - 1.0) > tol):
        raise ProbNotNormalized(f"{name}: class probabilities must sum to 1 (max error {np.max(np.abs(s - 1)):.3g})")


def expand_sagittal(p_sag: np.ndarray, table: LabelTable) -> np.ndarray:
    """Copy each merged sagittal class probability to both lateral classes (50 -> 78).

    Class axis order: internal ids ascending for the full space, sorted
    sagittal ids for the merged space.
    """
    sag_ids = table.sagittal_ids()
    pos = {s: i for i, s in enumerate(sag_ids)}
    cols = [pos[table[i].sagittal_id] for i in sorted(table.ids)]
    return p_sag[..., cols]


def view_aggregate(p_cor, p_ax, p_sag, table: LabelTable, weights=DEFAULT_VIEW_WEIGHTS):
    """Weighted average of the three view probability maps.

    Returns ``(labels, probs)``: labels are internal ids, ``probs`` keeps the
    full class axis and is renormalized per voxel (copying sagittal mass to
    both hemispheres adds mass).
    """
    p_cor, p_ax, p_sag = (np.asarray(p, dtype=float) for p in (p_cor, p_ax, p_sag))
    n_full = len(table)
    n_sag = len(table.sagittal_ids())
    if p_cor.shape != p_ax.shape or p_cor.shape[-1] != n_full:
        raise ShapeMismatch(f"coronal/axial maps need {n_full} classes: {p_cor.shape}, {p_ax.shape}")
    if p_sag.shape[:-1] != p_cor.shape[:-1] or p_sag.shape[-1] not in (n_sag, n_full):
        raise ShapeMismatch(f"sagittal map shape {p_sag.shape}")
    for p, name in ((p_cor, "coronal"), (p_ax, "axial"), (p_sag, "sagittal")):
        _check_normalized(p, name)
    w = np.asarray(weights, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or not np.any(w > 0):
        raise ValueError(f"view weights must be 3 nonnegative values, not all zero: {weights}")
    if p_sag.shape[-1] == n_sag and n_sag != n_full:
        p_sag = expand_sagittal(p_sag, table)
    agg = (w[0] * p_cor + w[1] * p_ax + w[2] * p_sag) / w.sum()
    agg /= agg.sum(axis=-1, keepdims=True)
    ids = np.asarray(sorted(table.ids))
    return ids[np.argmax(agg, axis=-1)], agg


# ---------------------------------------------------------------------------
# loss


def median_frequency_weights(histogram) -> np.ndarray:
    """``median(f) / f_c`` over present classes; absent classes get the largest present weight."""
    f = np.asarray(histogram, dtype=float)
    if np.any(f < 0) or not np.any(f > 0):
        raise ValueError("frequencies must be nonnegative with at least one positive")
    present = f > 0
    w = np.zeros_like(f)
    w[present] = np.median(f[present]) / f[present]
    w[~present] = w[present].max()
    return w


def loss_terms(pred: np.ndarray, target: np.ndarray, class_weights=None) -> tuple[float, float]:
    """``(cross_entropy, 1 - soft_dice)`` for ``(..., L)`` predictions and one-hot targets.

    Class weights are normalized to sum to 1; the cross-entropy is averaged
    over pixels, the Dice over classes present in prediction or target.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    _check_normalized(pred, "prediction")
    n_classes = pred.shape[-1]
    w = np.ones(n_classes) if class_weights is None else np.asarray(class_weights, dtype=float)
    w = w / w.sum()
    p = pred.reshape(-1, n_classes)
    g = target.reshape(-1, n_classes)
    ce = -np.sum(w * g * np.log(np.maximum(p, CE_EPS)), axis=1).mean()
    inter = np.sum(p * g, axis=0)
    denom = p.sum(axis=0) + g.sum(axis=0)
    # classes absent from both prediction and target carry no Dice information
    seen = denom > 0
    dice = 2.0 * inter[seen] / (denom[seen] + DICE_EPS)
    return float(ce), float(1.0 - dice.mean())


def composite_loss(pred: np.ndarray, target: np.ndarray, class_weights=None) -> float:
    """Weighted cross-entropy plus (1 - soft Dice)."""
    ce, dice_loss = loss_terms(pred, target, class_weights)
    return ce + dice_loss
