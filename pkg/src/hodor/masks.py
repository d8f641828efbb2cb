"""Domain types and soft-mask algebra shared by the whole pipeline.

Mask algebra (background grid, soft complements) runs on torch tensors so
gradients can flow through predicted masks during sequence training. The
label-map codecs are numpy-based interchange plumbing (palette-indexed PNG,
value 0 = background, values 1..O = objects).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

BACKBONE_STRIDE = 8


@dataclass
class Frame:
    """A single RGB video frame, values in [0, 1], H and W divisible by 8."""

    image: torch.Tensor  # H x W x 3
    index: int = 0

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[-1] != 3:
            raise ValueError(f"frame image must be HxWx3, got {tuple(self.image.shape)}")
        h, w = self.image.shape[:2]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ValueError(
                f"frame dimensions {h}x{w} must be divisible by {BACKBONE_STRIDE}"
            )
        if not torch.isfinite(self.image).all():
            raise ValueError("frame image contains non-finite values")

    @classmethod
    def from_array(cls, array: np.ndarray, index: int = 0, dtype=torch.float32) -> "Frame":
        return cls(torch.as_tensor(np.ascontiguousarray(array), dtype=dtype), index)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class MaskSet:
    """O foreground + B background soft masks over one frame."""

    fg: torch.Tensor  # O x H x W, values in [0, 1]
    bg: torch.Tensor  # B x H x W, values in [0, 1]
    object_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.fg.ndim != 3 or self.bg.ndim != 3:
            raise ValueError("fg and bg must be stacks of 2-D masks")
        if self.fg.shape[0] < 1:
            raise ValueError("a MaskSet needs at least one foreground mask")
        if self.fg.shape[1:] != self.bg.shape[1:]:
            raise ValueError("fg and bg mask resolutions differ")
        if not self.object_ids:
            self.object_ids = list(range(1, self.fg.shape[0] + 1))
        if len(self.object_ids) != self.fg.shape[0]:
            raise ValueError("object_ids length must match foreground mask count")
        _check_unit_range(self.fg, "fg")
        _check_unit_range(self.bg, "bg")

    @property
    def num_objects(self) -> int:
        return self.fg.shape[0]

    @property
    def num_background(self) -> int:
        return self.bg.shape[0]

    def all_masks(self) -> torch.Tensor:
        """(O+B) x H x W stack, foreground first."""
        return torch.cat([self.fg, self.bg], dim=0)


@dataclass
class FeaturePyramid:
    """Per-frame feature maps at strides 4 and 8, C channels each."""

    f4: torch.Tensor  # H/4 x W/4 x C
    f8: torch.Tensor  # H/8 x W/8 x C

    def __post_init__(self):
        if self.f4.shape[-1] != self.f8.shape[-1]:
            raise ValueError("f4 and f8 channel counts differ")

    @property
    def channels(self) -> int:
        return self.f8.shape[-1]


@dataclass
class DescriptorSet:
    """(O+B) x C descriptor matrix produced from one frame."""

    d: torch.Tensor
    frame_index: int = 0
    object_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.d.ndim != 2:
            raise ValueError("descriptors must be a 2-D matrix")
        if len(self.object_ids) > self.d.shape[0]:
            raise ValueError("more object_ids than descriptor rows")

    @property
    def num_objects(self) -> int:
        return len(self.object_ids)


def _check_unit_range(masks: torch.Tensor, name: str, tol: float = 1e-5) -> None:
    if not torch.isfinite(masks).all():
        raise ValueError(f"{name} masks contain non-finite values")
    lo, hi = float(masks.min()) if masks.numel() else 0.0, float(masks.max()) if masks.numel() else 0.0
    if lo < -tol or hi > 1.0 + tol:
        raise ValueError(f"{name} mask values outside [0,1]: min={lo}, max={hi}")


def grid_cell_masks(height: int, width: int, grid: tuple[int, int],
                    dtype=torch.float32, device=None) -> torch.Tensor:
    """Binary indicators for a gh x gw partition of the image.

    Cells partition by integer division; remainder rows/cols join the last
    row/column cell. Returns B = gh*gw masks in row-major cell order.
    """
    gh, gw = grid
    if gh < 1 or gw < 1:
        raise ValueError("grid dimensions must be >= 1")
    cells = torch.zeros(gh * gw, height, width, dtype=dtype, device=device)
    ch, cw = height // gh, width // gw
    for i in range(gh):
        y0 = i * ch
        y1 = (i + 1) * ch if i < gh - 1 else height
        for j in range(gw):
            x0 = j * cw
            x1 = (j + 1) * cw if j < gw - 1 else width
            cells[i * gw + j, y0:y1, x0:x1] = 1.0
    return cells


def split_background_grid(fg: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Split the soft background complement 1 - max(fg) into grid cell masks.

    Differentiable in fg; used both for first-frame setup and for re-deriving
    background masks from predicted soft foregrounds between frames.
    """
    if fg.ndim != 3:
        raise ValueError("fg must be O x H x W")
    if not torch.isfinite(fg).all():
        raise ValueError("fg masks contain non-finite values")
    background = 1.0 - fg.max(dim=0).values
    cells = grid_cell_masks(fg.shape[1], fg.shape[2], grid, dtype=fg.dtype, device=fg.device)
    return cells * background.unsqueeze(0)


def encode_label_map(mask_set: MaskSet, threshold: float = 0.5) -> np.ndarray:
    """Collapse soft foreground masks to an H x W integer label map.

    Pixel label is 1 + argmax over foreground channels when that maximum is
    at least `threshold`, else 0. Ties break toward the lowest channel index.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    fg = mask_set.fg.detach().cpu().numpy()
    best = fg.argmax(axis=0)
    peak = fg.max(axis=0)
    labels = np.where(peak >= threshold, best + 1, 0)
    return labels.astype(np.int32)


def decode_label_map(label_map: np.ndarray, num_objects: int) -> torch.Tensor:
    """Inverse of encode_label_map for binary disjoint masks.

    Returns O x H x W binary float masks; rejects labels above num_objects.
    """
    labels = np.asarray(label_map)
    if labels.max(initial=0) > num_objects:
        raise ValueError(
            f"label map contains value {int(labels.max())} > num_objects={num_objects}"
        )
    masks = np.stack([(labels == k + 1) for k in range(num_objects)], axis=0)
    return torch.as_tensor(masks.astype(np.float32))


def davis_palette() -> np.ndarray:
    """The standard 256-entry palette for indexed segmentation PNGs."""
    palette = np.zeros((256, 3), dtype=np.uint8)
    for idx in range(256):
        value, shift = idx, 7
        while value:
            for ch in range(3):
                palette[idx, ch] |= ((value >> ch) & 1) << shift
            value >>= 3
            shift -= 1
    return palette


def save_label_map(path, label_map: np.ndarray) -> None:
    """Write a label map as a palette-indexed PNG (0 = background)."""
    labels = np.asarray(label_map)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label values must fit in a palette byte")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(davis_palette().reshape(-1).tolist())
    img.save(path, format="PNG")


def load_label_map(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P":
        img = img.convert("P")
    return np.asarray(img, dtype=np.int32)
