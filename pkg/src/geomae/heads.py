"""Fine-tuning heads, losses and chip resampling for downstream tasks.

Heads consume the unmasked encoder output (a :class:`TokenGrid`, aliased
``LatentGrid``). Segmentation heads fold the temporal axis into channels,
giving a ``[B, T*dim, Gh, Gw]`` map with frame-major channel order.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidArgumentError
from .patchify import TokenGrid

LatentGrid = TokenGrid


def feature_map(latent: LatentGrid) -> torch.Tensor:
    """``[B, L, D] -> [B, T*D, Gh, Gw]``."""
    T, gh, gw = latent.dims
    B, L, D = latent.data.shape
    if L != T * gh * gw:
        raise InvalidArgumentError(f"{L} tokens inconsistent with grid {latent.dims}")
    x = latent.data.reshape(B, T, gh, gw, D).permute(0, 1, 4, 2, 3)
    return x.reshape(B, T * D, gh, gw)


def _pair(size) -> tuple[int, int]:
    if isinstance(size, int):
        return size, size
    h, w = size
    return int(h), int(w)


class LayerNorm2d(nn.LayerNorm):
    """Layer norm over the channel axis of an NCHW map."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


# classification ----------------------------------------------------------------
def classify(latent: LatentGrid, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Mean-pool all tokens, then an affine map to class logits."""
    return F.linear(latent.data.mean(dim=1), weight, bias)


class LinearClassifier(nn.Module):
    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(dim, n_classes)

    def forward(self, latent: LatentGrid) -> torch.Tensor:
        return classify(latent, self.linear.weight, self.linear.bias)


# segmentation --------------------------------------------------------------------
def _check_out_size(grid: tuple[int, int], out_size: tuple[int, int]) -> None:
    if out_size[0] < grid[0] or out_size[1] < grid[1]:
        raise InvalidArgumentError(f"output size {out_size} smaller than token grid {grid}")


class DeconvSegHead(nn.Module):
    """Four stride-2 transposed convolutions (x16), a 1x1 classifier, then a
    bilinear resize when the upsampled map does not already match ``out_size``.
    """

    def __init__(self, in_channels: int, n_classes: int, channels: Sequence[int] = (256, 128, 64, 32)):
        super().__init__()
        if len(channels) != 4:
            raise InvalidArgumentError("the deconvolution decoder has exactly four blocks")
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [nn.ConvTranspose2d(prev, ch, kernel_size=2, stride=2), LayerNorm2d(ch, eps=1e-6), nn.GELU()]
            prev = ch
        self.decoder = nn.Sequential(*layers)
        self.classifier = nn.Conv2d(prev, n_classes, kernel_size=1)

    def forward(self, latent: LatentGrid | torch.Tensor, out_size) -> torch.Tensor:
        x = feature_map(latent) if isinstance(latent, TokenGrid) else latent
        out_size = _pair(out_size)
        _check_out_size(tuple(x.shape[-2:]), out_size)
        x = self.classifier(self.decoder(x))
        if tuple(x.shape[-2:]) != out_size:
            x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return x


def upsample_blocks_needed(grid: int, target: int) -> int:
    """Smallest n with ``grid * 2**n >= target``."""
    if target < grid:
        raise InvalidArgumentError(f"target {target} smaller than grid {grid}")
    return max(0, math.ceil(math.log2(target / grid) - 1e-12))


class ConvUpSegHead(nn.Module):
    """Nearest x2 upsample + 3x3 conv blocks up to ``out_size``, then a 1x1
    classifier. The block count is fixed at construction from the grid and
    target size; a final bilinear resize covers non power-of-two ratios.
    """

    def __init__(self, in_channels: int, n_classes: int, grid, out_size, width: int = 64):
        super().__init__()
        grid, out_size = _pair(grid), _pair(out_size)
        _check_out_size(grid, out_size)
        self.out_size = out_size
        n = max(upsample_blocks_needed(grid[0], out_size[0]), upsample_blocks_needed(grid[1], out_size[1]))
        layers: list[nn.Module] = []
        prev = in_channels
        for _ in range(n):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(prev, width, kernel_size=3, padding=1),
                LayerNorm2d(width, eps=1e-6),
                nn.ReLU(),
            ]
            prev = width
        self.num_blocks = n
        self.decoder = nn.Sequential(*layers)
        self.classifier = nn.Conv2d(prev, n_classes, kernel_size=1)

    def forward(self, latent: LatentGrid | torch.Tensor, out_size=None) -> torch.Tensor:
        x = feature_map(latent) if isinstance(latent, TokenGrid) else latent
        out_size = self.out_size if out_size is None else _pair(out_size)
        _check_out_size(tuple(x.shape[-2:]), out_size)
        x = self.classifier(self.decoder(x))
        if tuple(x.shape[-2:]) != out_size:
            x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return x


def segment_deconv(latent: LatentGrid, head: DeconvSegHead, out_size) -> torch.Tensor:
    return head(latent, out_size)


def segment_convup(latent: LatentGrid, head: ConvUpSegHead, out_size) -> torch.Tensor:
    return head(latent, out_size)


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weights=None) -> torch.Tensor:
    """``sum(-w_y * log p_y) / sum(w_y)`` over all pixels.

    ``logits`` is ``[N, C, ...]`` and ``labels`` ``[N, ...]``.
    """
    n_classes = logits.shape[1]
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise InvalidArgumentError(f"labels must lie in [0, {n_classes})")
    if class_weights is None:
        w = torch.ones(n_classes, dtype=logits.dtype)
    else:
        w = torch.as_tensor(class_weights, dtype=logits.dtype)
        if w.shape != (n_classes,) or bool((w <= 0).any()):
            raise InvalidArgumentError("class weights must be positive, one per class")
    logp = F.log_softmax(logits, dim=1)
    picked = torch.gather(logp, 1, labels.unsqueeze(1)).squeeze(1)
    pw = w[labels]
    return -(pw * picked).sum() / pw.sum()


# regression ---------------------------------------------------------------------
class GPPHead(nn.Module):
    """Two-branch regressor: token MLP on the image latent, small CNN on the
    auxiliary grids, concatenated into one linear output.
    """

    def __init__(
        self,
        num_tokens: int,
        dim: int,
        aux_channels: int = 10,
        aux_size=(1, 1),
        hidden: tuple[int, int] = (64, 8),
        conv_channels: tuple[int, int, int] = (32, 64, 64),
        aux_hidden: int = 32,
    ):
        super().__init__()
        ah, aw = _pair(aux_size)
        self.num_tokens = num_tokens
        self.aux_shape = (aux_channels, ah, aw)
        self.latent_branch = nn.Sequential(
            nn.Linear(dim, hidden[0]), nn.ReLU(), nn.Linear(hidden[0], hidden[1]), nn.ReLU(), nn.Flatten(1)
        )
        c1, c2, c3 = conv_channels
        self.aux_branch = nn.Sequential(
            nn.Conv2d(aux_channels, c1, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c2, c3, 3, padding=1),
            nn.ReLU(),
            nn.Flatten(1),
            nn.Linear(c3 * ah * aw, aux_hidden),
            nn.ReLU(),
        )
        self.out = nn.Linear(num_tokens * hidden[1] + aux_hidden, 1)

    def forward(self, latent: torch.Tensor, aux: torch.Tensor) -> torch.Tensor:
        if latent.shape[1] != self.num_tokens:
            raise InvalidArgumentError(f"head built for {self.num_tokens} tokens, got {latent.shape[1]}")
        if tuple(aux.shape[1:]) != self.aux_shape:
            raise InvalidArgumentError(f"aux variables must be {self.aux_shape}, got {tuple(aux.shape[1:])}")
        if latent.shape[0] != aux.shape[0]:
            raise InvalidArgumentError("image and aux batch sizes differ")
        z = torch.cat([self.latent_branch(latent), self.aux_branch(aux)], dim=1)
        return self.out(z).squeeze(1)


class FrozenBackboneRegressor(nn.Module):
    """Frozen encoder feeding a :class:`GPPHead`; only the head trains."""

    def __init__(self, backbone, head: GPPHead):
        super().__init__()
        self.backbone = backbone
        self.head = head
        for p in self.backbone.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor, aux: torch.Tensor, meta=None) -> torch.Tensor:
        with torch.no_grad():
            latent = self.backbone.forward_features(x, meta).data
        return self.head(latent, aux)


def regress_gpp(model: FrozenBackboneRegressor, x: torch.Tensor, aux: torch.Tensor, meta=None) -> torch.Tensor:
    return model(x, aux, meta)


# chip resampling ---------------------------------------------------------------
def prepare_chip(chip: torch.Tensor, target_size, mode: str = "resize_bilinear") -> torch.Tensor:
    """Spatially resample the trailing ``H, W`` axes of ``chip``.

    Bilinear modes use half-pixel centres (``align_corners=False``), no
    antialiasing. ``upscale`` is bilinear restricted to non-shrinking targets;
    ``center_crop`` takes the window starting at ``((H-h)//2, (W-w)//2)``.
    """
    th, tw = _pair(target_size)
    H, W = chip.shape[-2:]
    if mode == "center_crop":
        if th > H or tw > W:
            raise InvalidArgumentError(f"cannot crop {H}x{W} to {th}x{tw}")
        top, left = (H - th) // 2, (W - tw) // 2
        return chip[..., top : top + th, left : left + tw].clone()
    if mode not in ("resize_bilinear", "upscale"):
        raise InvalidArgumentError(f"unknown resampling mode {mode!r}")
    if mode == "upscale" and (th < H or tw < W):
        raise InvalidArgumentError(f"upscale target {th}x{tw} smaller than {H}x{W}")
    if (th, tw) == (H, W):
        return chip.clone()
    lead = chip.shape[:-2]
    flat = chip.reshape(-1, 1, H, W)
    out = F.interpolate(flat, size=(th, tw), mode="bilinear", align_corners=False)
    return out.reshape(*lead, th, tw)
