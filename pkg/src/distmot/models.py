"""Desk-scale stand-ins for the teacher and student networks.

The teacher is a frozen featurizer: each patch is mean-pooled to a scalar and
lifted into the hidden dimension by a random-but-fixed projection vector plus
a per-position offset, with a CLS token derived from the whole frame. It has
no learnable state and never enters the autodiff tape, but it responds to
image content the way a real embedding model would at the granularity the
pipeline cares about: change a patch, and exactly that token (plus CLS) moves.

The student is a small trainable conv stack over the raw frame, and the proxy
task loss is an object-center heatmap regression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import PatchEmbedding
from .losses import mse_loss
from .tensor import ShapeError, Tensor, bilinear_resize, conv2d, narrow, relu, view

# hidden widths for the named teacher sizes; configuration constants of this
# toolkit, not measurements of any external model
PRESET_HIDDEN = {"small": 384, "base": 768, "large": 1024}

HEATMAP_SIGMA = 1.5  # Gaussian bump radius for the proxy task, in grid cells


@dataclass(frozen=True)
class TeacherConfig:
    """Frozen teacher geometry: hidden width, patch size, and the draw seed."""

    hidden_dim: int
    patch: int = 14
    seed: int = 0
    size_preset: str = "custom"

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.patch < 1:
            raise ValueError(f"patch must be >= 1, got {self.patch}")

    @classmethod
    def from_preset(cls, name: str, patch: int = 14, seed: int = 0) -> "TeacherConfig":
        if name not in PRESET_HIDDEN:
            raise ValueError(f"size preset must be one of {sorted(PRESET_HIDDEN)}, got {name!r}")
        return cls(hidden_dim=PRESET_HIDDEN[name], patch=patch, seed=seed, size_preset=name)


@dataclass(frozen=True)
class SyntheticFrame:
    """One single-channel image with intensities in [0, 1]."""

    image: np.ndarray
    frame_id: int

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2:
            raise ShapeError(f"frame image must be rank 2, got shape {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError("frame intensities must lie in [0, 1]")
        object.__setattr__(self, "image", img)


def teacher_forward(frame: SyntheticFrame, cfg: TeacherConfig) -> PatchEmbedding:
    """Embed a frame into (1, patches + 1, hidden) tokens, CLS first.

    Deterministic in (frame, cfg.seed): the projection vector and positional
    offsets are drawn from a generator seeded with cfg.seed on every call, so
    equal inputs give bit-identical embeddings across runs and processes.
    """
    h, w = frame.image.shape
    if h % cfg.patch != 0 or w % cfg.patch != 0:
        raise ShapeError(
            f"frame {h}x{w} is not divisible by the teacher patch size {cfg.patch}"
        )
    gh, gw = h // cfg.patch, w // cfg.patch
    # mean intensity per patch, raster order
    pooled = frame.image.reshape(gh, cfg.patch, gw, cfg.patch).mean(axis=(1, 3)).reshape(-1)

    rng = np.random.default_rng(cfg.seed)
    lift = rng.normal(size=cfg.hidden_dim)
    cls_lift = rng.normal(size=cfg.hidden_dim)
    cls_offset = rng.normal(size=cfg.hidden_dim)
    offsets = rng.normal(size=(gh * gw, cfg.hidden_dim))

    tokens = np.empty((1, gh * gw + 1, cfg.hidden_dim))
    tokens[0, 0] = frame.image.mean() * cls_lift + cls_offset
    tokens[0, 1:] = pooled[:, None] * lift[None, :] + offsets
    return PatchEmbedding(
        tensor=Tensor(tokens), has_cls=True,
        image_h=h, image_w=w, patch_h=cfg.patch, patch_w=cfg.patch,
    )


@dataclass
class StudentParams:
    """Trainable conv-stack parameters; two stride-2 stages halve the frame twice."""

    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[0]


def init_student(out_channels: int, rng: np.random.Generator,
                 hidden_channels: int = 8) -> StudentParams:
    if out_channels < 1:
        raise ValueError(f"out_channels must be >= 1, got {out_channels}")
    params = StudentParams()
    for c_in, c_out in ((1, hidden_channels), (hidden_channels, out_channels)):
        fan_in = c_in * 9
        bound = np.sqrt(6.0 / fan_in)
        params.weights.append(
            Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)), requires_grad=True))
        params.biases.append(Tensor(np.zeros(c_out), requires_grad=True))
    return params


def student_forward(frame: SyntheticFrame, params: StudentParams) -> Tensor:
    """Run the conv stack over one frame: (H, W) image -> (1, C, H/4, W/4) map."""
    h, w = frame.image.shape
    out = Tensor(frame.image.reshape(1, 1, h, w))
    last = len(params.weights) - 1
    for i, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        out = conv2d(out, weight, bias, stride=2, padding=1)
        if i < last:
            out = relu(out)
    return out


def render_center_heatmap(boxes, frame_h: int, frame_w: int,
                          out_h: int, out_w: int,
                          sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """Max-combined Gaussian bumps at box centers, on an (out_h, out_w) grid.

    ``boxes`` holds (left, top, width, height) tuples in frame pixels; centers
    are scaled into grid coordinates. An empty list gives an all-zero map.
    """
    heat = np.zeros((out_h, out_w))
    ys = np.arange(out_h)[:, None]
    xs = np.arange(out_w)[None, :]
    for left, top, bw, bh in boxes:
        cx = (left + bw / 2.0) * out_w / frame_w
        cy = (top + bh / 2.0) * out_h / frame_h
        bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
        heat = np.maximum(heat, bump)
    return heat


def proxy_task_loss(feature_map: Tensor, gt_heatmap: Tensor) -> Tensor:
    """MSE between the map's first channel (resized to the target grid) and a
    ground-truth center heatmap of shape (H, W)."""
    if feature_map.data.ndim != 4:
        raise ShapeError(f"feature map must be rank 4, got shape {feature_map.shape}")
    if gt_heatmap.data.ndim != 2:
        raise ShapeError(f"heatmap must be rank 2, got shape {gt_heatmap.shape}")
    th, tw = gt_heatmap.shape
    channel = narrow(feature_map, 1, 0, 1)
    resized = bilinear_resize(channel, th, tw)
    return mse_loss(resized, view(gt_heatmap, (1, 1, th, tw)))
