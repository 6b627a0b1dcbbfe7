"""Token/feature-map alignment and the two student adapter heads.

A vision transformer emits per-image token matrices; a convolutional student
emits 4-d maps. This module converts between the two layouts and adapts a
student map to a teacher map's (channels, height, width) so the distillation
losses can compare them. Feature maps are plain rank-4 tensors
(batch, channels, height, width); only patch embeddings need extra metadata
and get a real type.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    batch_norm2d,
    bilinear_resize,
    conv2d,
    narrow,
    permute,
    relu,
    view,
)

HEAD_KINDS = ("single", "multi")


@dataclass(frozen=True)
class PatchEmbedding:
    """A (batch, tokens, hidden) token matrix plus the geometry that produced it.

    ``has_cls`` marks a leading classification token that carries no spatial
    position. The grid is image extent over patch extent on each axis, and
    the non-CLS token count must equal the number of grid cells.
    """

    tensor: Tensor
    has_cls: bool
    image_h: int
    image_w: int
    patch_h: int
    patch_w: int

    def __post_init__(self):
        if self.tensor.data.ndim != 3:
            raise ShapeError(
                f"patch embedding must be rank 3, got shape {self.tensor.shape}"
            )
        if self.patch_h < 1 or self.patch_w < 1:
            raise ShapeError(f"patch extents ({self.patch_h}, {self.patch_w}) must be positive")
        if self.image_h % self.patch_h != 0:
            raise ShapeError(
                f"image height {self.image_h} is not divisible by patch height {self.patch_h}"
            )
        if self.image_w % self.patch_w != 0:
            raise ShapeError(
                f"image width {self.image_w} is not divisible by patch width {self.patch_w}"
            )
        expected = self.grid_h * self.grid_w + (1 if self.has_cls else 0)
        tokens = self.tensor.shape[1]
        if tokens != expected:
            raise ShapeError(
                f"token count {tokens} does not match a {self.grid_h}x{self.grid_w} grid"
                f"{' plus CLS' if self.has_cls else ''} (expected {expected})"
            )

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_h

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_w


def patch_to_spatial(emb: PatchEmbedding) -> Tensor:
    """Lay tokens out on their patch grid: (B, N, D) -> (B, D, grid_h, grid_w).

    A leading CLS token is dropped first. Token r * grid_w + c lands at
    spatial position (r, c), i.e. tokens are in row-major raster order.
    """
    tokens = emb.tensor
    if emb.has_cls:
        tokens = narrow(tokens, 1, 1, tokens.shape[1] - 1)
    b, _, d = tokens.shape
    grid = view(tokens, (b, emb.grid_h, emb.grid_w, d))
    return permute(grid, (0, 3, 1, 2))


def spatial_to_patch(feature_map: Tensor) -> PatchEmbedding:
    """Inverse of patch_to_spatial for CLS-free embeddings.

    The spatial grid becomes the token axis in raster order. The returned
    metadata uses 1x1 "patches" so the geometry stays self-consistent: the
    original patch size is not recoverable from a bare feature map.
    """
    if feature_map.data.ndim != 4:
        raise ShapeError(f"feature map must be rank 4, got shape {feature_map.shape}")
    b, d, h, w = feature_map.shape
    tokens = view(permute(feature_map, (0, 2, 3, 1)), (b, h * w, d))
    return PatchEmbedding(
        tensor=tokens, has_cls=False, image_h=h, image_w=w, patch_h=1, patch_w=1
    )


def flatten_per_sample(feature_map: Tensor) -> Tensor:
    """Row-major flatten of each sample: (B, C, H, W) -> (B, C*H*W)."""
    if feature_map.data.ndim != 4:
        raise ShapeError(f"feature map must be rank 4, got shape {feature_map.shape}")
    b, c, h, w = feature_map.shape
    return view(feature_map, (b, c * h * w))


@dataclass
class HeadParams:
    """Learnable parameters of one adapter head.

    ``single`` holds one conv stage (1x1 kernel); ``multi`` holds two
    conv stages each followed by batch norm, so ``gammas``/``betas`` are
    populated only in that case.
    """

    head_kind: str
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)
    gammas: list[Tensor] = field(default_factory=list)
    betas: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        n = len(self.weights)
        if self.head_kind == "single" and n != 1:
            raise ValueError(f"single head needs exactly 1 conv stage, got {n}")
        if self.head_kind == "multi" and n != 2:
            raise ValueError(f"multi head needs exactly 2 conv stages, got {n}")
        if self.head_kind == "multi" and (len(self.gammas) != 2 or len(self.betas) != 2):
            raise ValueError("multi head needs batch-norm gamma/beta for both stages")

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases, *self.gammas, *self.betas]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[0]


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    # fan-in of a conv kernel (out, in, kh, kw) is in * kh * kw
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_stage(rng: np.random.Generator, c_in: int, c_out: int, k: int) -> tuple[Tensor, Tensor]:
    weight = Tensor(_kaiming_uniform(rng, (c_out, c_in, k, k)), requires_grad=True)
    bias_bound = 1.0 / np.sqrt(c_in * k * k)
    bias = Tensor(rng.uniform(-bias_bound, bias_bound, size=c_out), requires_grad=True)
    return weight, bias


def init_single_head(in_channels: int, out_channels: int,
                     rng: np.random.Generator) -> HeadParams:
    """One 1x1 conv projecting student channels to teacher channels."""
    weight, bias = _conv_stage(rng, in_channels, out_channels, 1)
    return HeadParams(head_kind="single", weights=[weight], biases=[bias])


def init_multi_head(in_channels: int, out_channels: int, rng: np.random.Generator,
                    hidden_channels: int | None = None) -> HeadParams:
    """Two 3x3 conv-BN-ReLU stages; the hidden width defaults to the target width."""
    hidden = out_channels if hidden_channels is None else hidden_channels
    w1, b1 = _conv_stage(rng, in_channels, hidden, 3)
    w2, b2 = _conv_stage(rng, hidden, out_channels, 3)
    ones = [Tensor(np.ones(hidden), requires_grad=True),
            Tensor(np.ones(out_channels), requires_grad=True)]
    zeros = [Tensor(np.zeros(hidden), requires_grad=True),
             Tensor(np.zeros(out_channels), requires_grad=True)]
    return HeadParams(head_kind="multi", weights=[w1, w2], biases=[b1, b2],
                      gammas=ones, betas=zeros)


def _check_target(params: HeadParams, target: tuple[int, int, int]) -> tuple[int, int, int]:
    channels, height, width = (int(v) for v in target)
    if channels < 1 or height < 1 or width < 1:
        raise ShapeError(f"target shape {target} must be positive in every extent")
    if params.out_channels != channels:
        raise ShapeError(
            f"head emits {params.out_channels} channels but target wants {channels}"
        )
    return channels, height, width


def single_layer_head(student: Tensor, params: HeadParams,
                      target: tuple[int, int, int]) -> Tensor:
    """Project channels with a 1x1 conv, then resize to the target grid."""
    if params.head_kind != "single":
        raise ValueError(f"expected a single head, got {params.head_kind!r}")
    _, height, width = _check_target(params, target)
    out = conv2d(student, params.weights[0], params.biases[0])
    return bilinear_resize(out, height, width)


def multi_layer_head(student: Tensor, params: HeadParams,
                     target: tuple[int, int, int]) -> Tensor:
    """Two conv-BN-ReLU stages, then resize to the target grid."""
    if params.head_kind != "multi":
        raise ValueError(f"expected a multi head, got {params.head_kind!r}")
    _, height, width = _check_target(params, target)
    out = student
    for i in range(2):
        out = conv2d(out, params.weights[i], params.biases[i], stride=1, padding=1)
        out = batch_norm2d(out, params.gammas[i], params.betas[i])
        out = relu(out)
    return bilinear_resize(out, height, width)


def apply_head(student: Tensor, params: HeadParams,
               target: tuple[int, int, int]) -> Tensor:
    """Dispatch on the head kind."""
    if params.head_kind == "single":
        return single_layer_head(student, params, target)
    return multi_layer_head(student, params, target)
