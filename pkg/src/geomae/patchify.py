"""Cube patching of ``[B, T, C, H, W]`` chips, token embedding and random masking.

Pixel cubes are flattened in ``(row, col, channel)`` order: element
``(r, c, ch)`` of a ``ph x pw x C`` cube sits at ``(r * pw + c) * C + ch``.
Tokens are ordered ``l = t * Gh * Gw + i * Gw + j``. Temporal patch size is
always 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidArgumentError

Patch = tuple[int, int, int]


@dataclass(frozen=True)
class TokenGrid:
    data: torch.Tensor  # [B, L, D]
    dims: tuple[int, int, int]  # (T, Gh, Gw)
    patch: Patch = (1, 16, 16)

    @property
    def num_tokens(self) -> int:
        T, gh, gw = self.dims
        return T * gh * gw


@dataclass(frozen=True)
class MaskPlan:
    keep_count: int
    shuffle: torch.Tensor  # [B, L] token index at each shuffled slot
    restore: torch.Tensor  # [B, L] inverse of shuffle
    mask: torch.Tensor  # [B, L] True where masked

    @property
    def num_tokens(self) -> int:
        return int(self.shuffle.shape[1])

    def subset(self, index) -> "MaskPlan":
        """The plan restricted to the samples at ``index`` (for batch sharding)."""
        return MaskPlan(self.keep_count, self.shuffle[index], self.restore[index], self.mask[index])


def _check_patch(patch) -> Patch:
    pt, ph, pw = (int(p) for p in patch)
    if pt != 1:
        raise InvalidArgumentError(f"temporal patch size must be 1, got {pt}")
    if ph < 1 or pw < 1:
        raise InvalidArgumentError(f"invalid patch size {patch}")
    return pt, ph, pw


def grid_dims(shape, patch) -> tuple[int, int, int]:
    """Token grid ``(T, Gh, Gw)`` for a ``[B, T, C, H, W]`` shape."""
    _, ph, pw = _check_patch(patch)
    if len(shape) != 5:
        raise InvalidArgumentError(f"expected [B, T, C, H, W], got shape {tuple(shape)}")
    _, T, _, H, W = shape
    if H % ph or W % pw:
        raise InvalidArgumentError(f"spatial size {H}x{W} not divisible by patch {ph}x{pw}")
    return T, H // ph, W // pw


def patchify_pixels(x: torch.Tensor, patch=(1, 16, 16)) -> torch.Tensor:
    """``[B, T, C, H, W] -> [B, L, ph*pw*C]`` by pure reindexing."""
    _, ph, pw = _check_patch(patch)
    T, gh, gw = grid_dims(x.shape, patch)
    B, _, C = x.shape[:3]
    x = x.reshape(B, T, C, gh, ph, gw, pw)
    x = x.permute(0, 1, 3, 5, 4, 6, 2)  # B, T, Gh, Gw, ph, pw, C
    return x.reshape(B, T * gh * gw, ph * pw * C)


def unpatchify(tokens: torch.Tensor, dims, patch=(1, 16, 16), channels: int | None = None) -> torch.Tensor:
    """Exact inverse of :func:`patchify_pixels`."""
    _, ph, pw = _check_patch(patch)
    T, gh, gw = (int(d) for d in dims)
    if tokens.ndim != 3:
        raise InvalidArgumentError(f"expected [B, L, P], got shape {tuple(tokens.shape)}")
    B, L, P = tokens.shape
    if L != T * gh * gw:
        raise InvalidArgumentError(f"{L} tokens inconsistent with grid {(T, gh, gw)}")
    if P % (ph * pw):
        raise InvalidArgumentError(f"token width {P} not a multiple of {ph}*{pw}")
    C = P // (ph * pw)
    if channels is not None and channels != C:
        raise InvalidArgumentError(f"token width implies {C} channels, expected {channels}")
    x = tokens.reshape(B, T, gh, gw, ph, pw, C)
    x = x.permute(0, 1, 6, 2, 4, 3, 5)  # B, T, C, Gh, ph, Gw, pw
    return x.reshape(B, T, C, gh * ph, gw * pw)


def embed(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, patch=(1, 16, 16)) -> TokenGrid:
    """Linear projection of every pixel cube: ``W @ cube + b``.

    ``weight`` is ``[D, ph*pw*C]``. This equals a 3D convolution whose kernel
    and stride are both the patch size (weights permuted to the cube order).
    """
    pt, ph, pw = _check_patch(patch)
    cubes = patchify_pixels(x, patch)
    if weight.ndim != 2 or weight.shape[1] != cubes.shape[-1]:
        raise InvalidArgumentError(
            f"projection expects inputs of width {cubes.shape[-1]}, got weight {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise InvalidArgumentError("bias shape does not match projection output")
    data = torch.nn.functional.linear(cubes, weight, bias)
    return TokenGrid(data=data, dims=grid_dims(x.shape, patch), patch=(pt, ph, pw))


def keep_count_for(num_tokens: int, ratio: float) -> int:
    if not 0.0 <= ratio < 1.0:
        raise InvalidArgumentError(f"mask ratio must be in [0, 1), got {ratio}")
    return int(round(num_tokens * (1.0 - ratio)))


def random_masking(
    tokens: torch.Tensor | TokenGrid, ratio: float, rng: int | torch.Generator
) -> tuple[torch.Tensor, MaskPlan]:
    """Keep a uniformly random subset of ``round(L * (1 - ratio))`` tokens per sample.

    Returns the visible tokens in shuffled order and the plan needed to put
    them back. ``rng`` is a seed or a ``torch.Generator``.
    """
    data = tokens.data if isinstance(tokens, TokenGrid) else tokens
    B, L, D = data.shape
    keep = keep_count_for(L, ratio)
    if isinstance(rng, torch.Generator):
        gen = rng
    else:
        gen = torch.Generator()
        gen.manual_seed(int(rng))
    noise = torch.rand(B, L, generator=gen, dtype=torch.float64)
    shuffle = torch.argsort(noise, dim=1, stable=True)
    restore = torch.argsort(shuffle, dim=1, stable=True)
    visible = torch.gather(data, 1, shuffle[:, :keep, None].expand(B, keep, D))
    mask = torch.ones(B, L, dtype=torch.bool)
    mask[:, :keep] = False
    mask = torch.gather(mask, 1, restore)
    return visible, MaskPlan(keep_count=keep, shuffle=shuffle, restore=restore, mask=mask)


def apply_mask_plan(tokens: torch.Tensor | TokenGrid, plan: MaskPlan) -> torch.Tensor:
    """Visible tokens selected by an existing plan, in its shuffled order."""
    data = tokens.data if isinstance(tokens, TokenGrid) else tokens
    B, L, D = data.shape
    if L != plan.num_tokens or plan.shuffle.shape[0] != B:
        raise InvalidArgumentError(f"plan for {tuple(plan.shuffle.shape)} tokens does not fit batch {(B, L)}")
    keep = plan.keep_count
    return torch.gather(data, 1, plan.shuffle[:, :keep, None].expand(B, keep, D))


def restore_order(shuffled: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Undo the shuffle of a full-length ``[B, L, D]`` sequence."""
    B, L, D = shuffled.shape
    if L != plan.num_tokens:
        raise InvalidArgumentError(f"sequence length {L} does not match plan ({plan.num_tokens})")
    return torch.gather(shuffled, 1, plan.restore[:, :, None].expand(B, L, D))


@dataclass
class ReflectanceBatch:
    """Chip batch ``[B, T, C, H, W]`` with optional per-sample metadata."""

    values: torch.Tensor
    meta: list | None = None

    def __post_init__(self):
        if self.values.ndim != 5:
            raise InvalidArgumentError(f"expected [B, T, C, H, W], got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise InvalidArgumentError("reflectance batch contains NaN/Inf")
        if self.meta is not None and len(self.meta) != self.values.shape[0]:
            raise InvalidArgumentError("metadata list length does not match batch size")
