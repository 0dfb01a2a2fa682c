"""Scene data model and the mask/appearance composition algebra.

Images are channels-first float tensors (C, H, W) with pixel values in
[-1, 1]; mask sets are (n, H, W) tensors whose entries lie in [0, 1] and sum
to one at every pixel. A leading batch dimension is accepted everywhere.
Region ``n`` (the last mask channel) is always the background.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

# Per-pixel mask sums may drift from 1 by float noise; anything past
# OVERLAP_HARD_LIMIT is treated as a real contract bug, not noise.
SIMPLEX_ATOL = 1e-5
OVERLAP_HARD_LIMIT = 1e-3


class InvalidMaskError(ValueError):
    """Raised when a mask set violates the per-pixel simplex contract."""


@dataclass(frozen=True)
class SceneConfig:
    """Static shape information shared by every component of the model."""

    n: int = 2
    width: int = 128
    height: int = 128
    channels: int = 3
    latent_dim: int = 32

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least one object and a background, got n={self.n}")
        if min(self.width, self.height, self.channels, self.latent_dim) < 1:
            raise ValueError("width, height, channels and latent_dim must be >= 1")
        if self.width % 4 or self.height % 4:
            raise ValueError(
                f"width and height must be divisible by 4 (mask network downsamples "
                f"twice), got {self.width}x{self.height}"
            )


def _mask_batched(masks: Tensor) -> bool:
    if masks.dim() == 3:
        return False
    if masks.dim() == 4:
        return True
    raise ValueError(f"mask set must be (n,H,W) or (B,n,H,W), got shape {tuple(masks.shape)}")


def validate_mask_set(masks: Tensor, atol: float = SIMPLEX_ATOL) -> None:
    """Check the MaskSet invariant: entries in [0,1], per-pixel sum == 1."""
    _mask_batched(masks)
    if masks.min() < -atol or masks.max() > 1 + atol:
        raise InvalidMaskError(
            f"mask entries outside [0,1]: min={masks.min():.3e} max={masks.max():.3e}"
        )
    sums = masks.sum(dim=-3)
    err = (sums - 1).abs().max()
    if err > atol:
        raise InvalidMaskError(f"per-pixel mask sum deviates from 1 by {err:.3e}")


def complete_background_mask(object_masks: Tensor) -> Tensor:
    """Append the background mask ``1 - sum(object masks)`` as the last region.

    ``object_masks`` holds the n-1 object masks, shape (n-1, H, W) or
    (B, n-1, H, W). Overshoot of the per-pixel object sum up to
    OVERLAP_HARD_LIMIT is clamped; anything larger raises InvalidMaskError
    naming the worst pixel.
    """
    _mask_batched(object_masks)
    if object_masks.min() < 0 or object_masks.max() > 1:
        raise InvalidMaskError(
            f"object mask entries outside [0,1]: min={object_masks.min():.3e} "
            f"max={object_masks.max():.3e}"
        )
    total = object_masks.sum(dim=-3)
    overshoot = total - 1
    worst = overshoot.max()
    if worst > OVERLAP_HARD_LIMIT:
        idx = tuple(int(i) for i in (overshoot == worst).nonzero()[0])
        raise InvalidMaskError(
            f"object masks overlap: sum {1 + worst:.6f} > 1 at pixel {idx}"
        )
    background = (1 - total).clamp(min=0).unsqueeze(-3)
    return torch.cat([object_masks, background], dim=-3)


def _check_compose_shapes(masks: Tensor, appearances: Tensor) -> None:
    batched = _mask_batched(masks)
    want_dim = 5 if batched else 4
    if appearances.dim() != want_dim:
        raise ValueError(
            f"appearances must be (n,C,H,W) per mask layout, got shape "
            f"{tuple(appearances.shape)} for masks {tuple(masks.shape)}"
        )
    if appearances.shape[-4] != masks.shape[-3] or appearances.shape[-2:] != masks.shape[-2:]:
        raise ValueError(
            f"appearances {tuple(appearances.shape)} inconsistent with masks "
            f"{tuple(masks.shape)}"
        )


def compose(masks: Tensor, appearances: Tensor) -> Tensor:
    """Assemble an image as the mask-weighted sum of region appearances.

    ``appearances`` stacks one (C, H, W) appearance per region along dim -4;
    output pixel (c,y,x) is sum_k masks[k,y,x] * appearances[k,c,y,x].
    """
    _check_compose_shapes(masks, appearances)
    return (masks.unsqueeze(-3) * appearances).sum(dim=-4)


def redraw_one(image: Tensor, masks: Tensor, new_appearance: Tensor, region: int) -> Tensor:
    """Replace region ``region`` (1-based; n = background) with a new appearance.

    Equals ``compose`` with every appearance set to ``image`` except slot
    ``region``. Pixels where the region's mask is zero come out bit-identical
    to the input.
    """
    n = masks.shape[-3]
    if not 1 <= region <= n:
        raise ValueError(f"region index {region} outside 1..{n}")
    if image.shape != new_appearance.shape:
        raise ValueError(
            f"appearance shape {tuple(new_appearance.shape)} != image shape "
            f"{tuple(image.shape)}"
        )
    m = masks[..., region - 1, :, :].unsqueeze(-3)
    # delta form: bit-exact identity both where the mask is zero and when the
    # new appearance equals the input
    return image + m * (new_appearance - image)
