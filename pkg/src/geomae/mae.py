"""Masked autoencoder with a 3D-patch ViT encoder and a light decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidArgumentError
from .patchify import MaskPlan, ReflectanceBatch, TokenGrid, apply_mask_plan, grid_dims, patchify_pixels, random_masking
from .posenc import MetadataBiasParams, apply_metadata_bias, draw_drop_flags, sincos_3d
from .seeding import numpy_rng, torch_gen

LN_EPS = 1e-6


@dataclass
class EncoderConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: tuple[int, int, int] = (1, 16, 16)
    channels: int = 6

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.dim % self.heads:
            raise InvalidArgumentError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patch[0] != 1:
            raise InvalidArgumentError("temporal patch size must be 1")

    @property
    def patch_pixels(self) -> int:
        return self.patch[1] * self.patch[2] * self.channels


@dataclass
class DecoderConfig:
    dim: int = 512
    depth: int = 8
    heads: int = 16
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise InvalidArgumentError(f"decoder dim {self.dim} not divisible by heads {self.heads}")


PRESETS: dict[str, tuple[EncoderConfig, DecoderConfig]] = {
    "tiny": (EncoderConfig(64, 2, 4, 4.0, (1, 16, 16), 6), DecoderConfig(32, 1, 4, 4.0)),
    "300M": (EncoderConfig(1024, 24, 16, 4.0, (1, 16, 16), 6), DecoderConfig(512, 8, 16, 4.0)),
    "600M": (EncoderConfig(1280, 32, 16, 4.0, (1, 14, 14), 6), DecoderConfig(512, 8, 16, 4.0)),
}


def preset(name: str) -> tuple[EncoderConfig, DecoderConfig]:
    try:
        enc, dec = PRESETS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return EncoderConfig(**asdict(enc)), DecoderConfig(**asdict(dec))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        hd = D // self.heads
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (hd**-0.5)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class PretrainOutput:
    pred_pixels: torch.Tensor
    loss: torch.Tensor
    mask: torch.Tensor
    target_pixels: torch.Tensor | None = None
    drop_flags: np.ndarray | None = field(default=None, repr=False)


class MaskedAutoencoder(nn.Module):
    """3D-patch MAE with additive date/location bias on the encoder input.

    There is no class token; the decoder sees plain positional encodings and
    learned mask tokens.
    """

    def __init__(
        self, encoder: EncoderConfig, decoder: DecoderConfig, init_seed: int | None = 0, init_scheme: str = "xavier"
    ):
        super().__init__()
        self.encoder_cfg = encoder
        self.decoder_cfg = decoder
        self.patch_embed = nn.Linear(encoder.patch_pixels, encoder.dim)
        self.w_time = nn.Parameter(torch.ones(()))
        self.w_loc = nn.Parameter(torch.ones(()))
        self.blocks = nn.ModuleList(Block(encoder.dim, encoder.heads, encoder.mlp_ratio) for _ in range(encoder.depth))
        self.norm = nn.LayerNorm(encoder.dim, eps=LN_EPS)

        self.decoder_embed = nn.Linear(encoder.dim, decoder.dim)
        self.mask_token = nn.Parameter(torch.zeros(decoder.dim))
        self.decoder_blocks = nn.ModuleList(
            Block(decoder.dim, decoder.heads, decoder.mlp_ratio) for _ in range(decoder.depth)
        )
        self.decoder_norm = nn.LayerNorm(decoder.dim, eps=LN_EPS)
        self.decoder_pred = nn.Linear(decoder.dim, encoder.patch_pixels)
        self._pos_cache: dict[tuple, torch.Tensor] = {}
        if init_seed is not None and self.patch_embed.weight.device.type != "meta":
            self.reset_parameters(init_seed, init_scheme)

    @property
    def patch(self) -> tuple[int, int, int]:
        return self.encoder_cfg.patch

    def reset_parameters(self, seed: int, scheme: str = "xavier") -> None:
        """Seeded init. Matrices: ``xavier`` uniform or ``trunc_normal`` (std 0.02);
        mask token truncated normal; biases zero; norms identity; metadata weights 1.
        """
        if scheme not in ("xavier", "trunc_normal"):
            raise InvalidArgumentError(f"unknown init scheme {scheme!r}")
        g = torch_gen(seed, "init")
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in ("w_time", "w_loc"):
                    p.fill_(1.0)
                elif p.ndim == 2 and scheme == "xavier":
                    nn.init.xavier_uniform_(p, generator=g)
                elif name == "mask_token" or p.ndim == 2:
                    nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=g)
                elif ".norm" in name or name.startswith(("norm.", "decoder_norm.")):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    p.zero_()

    def encoder_parameters(self):
        enc_prefixes = ("patch_embed.", "w_time", "w_loc", "blocks.", "norm.")
        return [(n, p) for n, p in self.named_parameters() if n.startswith(enc_prefixes)]

    def pos_table(self, dims, dim: int, dtype) -> torch.Tensor:
        key = (tuple(dims), dim, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = torch.as_tensor(sincos_3d(*dims, dim).values, dtype=dtype)
        return self._pos_cache[key]

    # encoder side -----------------------------------------------------------
    def embed_tokens(self, x: torch.Tensor) -> TokenGrid:
        """Patch projection plus the 3D positional table."""
        if x.shape[2] != self.encoder_cfg.channels:
            raise InvalidArgumentError(f"model expects {self.encoder_cfg.channels} channels, got {x.shape[2]}")
        dims = grid_dims(x.shape, self.patch)
        data = self.patch_embed(patchify_pixels(x, self.patch))
        data = data + self.pos_table(dims, self.encoder_cfg.dim, data.dtype)
        return TokenGrid(data=data, dims=dims, patch=self.patch)

    def add_metadata(self, grid: TokenGrid, meta, drop_time=False, drop_loc=False) -> TokenGrid:
        if meta is None:
            return grid
        params = MetadataBiasParams(w_time=self.w_time, w_loc=self.w_loc)
        return apply_metadata_bias(grid, meta, params, drop_time, drop_loc)

    def encode(self, visible: torch.Tensor) -> torch.Tensor:
        if visible.shape[-1] != self.encoder_cfg.dim:
            raise InvalidArgumentError(f"token dim {visible.shape[-1]} != encoder dim {self.encoder_cfg.dim}")
        for blk in self.blocks:
            visible = blk(visible)
        return self.norm(visible)

    def forward_features(self, x: torch.Tensor, meta=None) -> TokenGrid:
        """Unmasked encoder pass in canonical token order (for fine-tuning)."""
        grid = self.add_metadata(self.embed_tokens(x), meta)
        return TokenGrid(data=self.encode(grid.data), dims=grid.dims, patch=grid.patch)

    # decoder side -----------------------------------------------------------
    def decode(self, latent: torch.Tensor, plan: MaskPlan, dims) -> torch.Tensor:
        B, keep, _ = latent.shape
        L = plan.num_tokens
        T, gh, gw = dims
        if L != T * gh * gw or keep != plan.keep_count or plan.shuffle.shape[0] != B:
            raise InvalidArgumentError("mask plan inconsistent with latent/grid")
        x = self.decoder_embed(latent)
        D = x.shape[-1]
        mask_tokens = self.mask_token.to(x.dtype).expand(B, L - keep, D)
        x = torch.cat([x, mask_tokens], dim=1)
        x = torch.gather(x, 1, plan.restore[:, :, None].expand(B, L, D))
        x = x + self.pos_table(dims, D, x.dtype)
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))


def encoder_forward(visible: torch.Tensor, model: MaskedAutoencoder) -> torch.Tensor:
    """Transformer blocks plus final layer norm over already-embedded tokens."""
    return model.encode(visible)


def decoder_forward(latent: torch.Tensor, plan: MaskPlan, dims, model: MaskedAutoencoder) -> torch.Tensor:
    return model.decode(latent, plan, dims)


def mae_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, norm_pix: bool = False) -> torch.Tensor:
    """Mean over masked tokens of the per-token pixel MSE."""
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if mask.shape != pred.shape[:2]:
        raise InvalidArgumentError("mask must be [B, L]")
    if not bool(mask.any(dim=1).all()):
        raise InvalidArgumentError("every sample needs at least one masked token")
    if norm_pix:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, unbiased=False, keepdim=True)
        target = (target - mean) / (var + 1e-6) ** 0.5
    per_token = ((pred - target) ** 2).mean(dim=-1)
    m = mask.to(per_token.dtype)
    return (per_token * m).sum() / m.sum()


def pretrain_step(
    model: MaskedAutoencoder,
    batch: ReflectanceBatch | torch.Tensor,
    mask_ratio: float = 0.75,
    drop_prob: float = 0.1,
    seed: int = 0,
    norm_pix: bool = False,
    drop_flags: np.ndarray | None = None,
    plan: MaskPlan | None = None,
) -> PretrainOutput:
    """embed -> +pos -> +metadata -> mask -> encoder -> decoder -> masked MSE.

    Drop flags come from the ``drop`` sub-stream of ``seed`` unless given
    explicitly as a ``[B, 2]`` boolean array; masking uses the ``mask`` stream
    unless an explicit ``plan`` is passed (e.g. a shard of a full-batch plan).
    """
    if isinstance(batch, torch.Tensor):
        batch = ReflectanceBatch(batch)
    x = batch.values
    grid = model.embed_tokens(x)
    flags = None
    if batch.meta is not None:
        flags = drop_flags if drop_flags is not None else draw_drop_flags(drop_prob, numpy_rng(seed, "drop"), x.shape[0])
        flags = np.asarray(flags, dtype=bool).reshape(x.shape[0], 2)
        grid = model.add_metadata(grid, batch.meta, flags[:, 0], flags[:, 1])
    if plan is None:
        visible, plan = random_masking(grid, mask_ratio, torch_gen(seed, "mask"))
    else:
        visible = apply_mask_plan(grid, plan)
    latent = model.encode(visible)
    pred = model.decode(latent, plan, grid.dims)
    target = patchify_pixels(x, model.patch)
    loss = mae_loss(pred, target, plan.mask, norm_pix)
    return PretrainOutput(pred_pixels=pred, loss=loss, mask=plan.mask, target_pixels=target, drop_flags=flags)


def loss_and_grad(model: MaskedAutoencoder, batch, **step_kwargs) -> tuple[float, dict[str, torch.Tensor]]:
    """Pure gradient of the pretraining loss; does not touch ``.grad`` fields.

    Gradients from disjoint shards can be summed (weighted by masked-token
    counts) to reproduce the full-batch gradient.
    """
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    out = pretrain_step(model, batch, **step_kwargs)
    grads = torch.autograd.grad(out.loss, params, allow_unused=True)
    return float(out.loss.detach()), {
        n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)
    }


# parameter counting --------------------------------------------------------
def _block_params(dim: int, mlp_ratio: float) -> int:
    hidden = int(dim * mlp_ratio)
    attn = dim * 3 * dim + 3 * dim + dim * dim + dim
    mlp = dim * hidden + hidden + hidden * dim + dim
    norms = 4 * dim
    return attn + mlp + norms


def analytic_param_count(encoder: EncoderConfig, decoder: DecoderConfig | None = None) -> int:
    """Closed-form weight count; encoder only unless ``decoder`` is given."""
    n = encoder.patch_pixels * encoder.dim + encoder.dim  # patch projection
    n += 2  # metadata weights
    n += encoder.depth * _block_params(encoder.dim, encoder.mlp_ratio)
    n += 2 * encoder.dim  # final norm
    if decoder is not None:
        n += encoder.dim * decoder.dim + decoder.dim + decoder.dim  # embed + mask token
        n += decoder.depth * _block_params(decoder.dim, decoder.mlp_ratio)
        n += 2 * decoder.dim
        n += decoder.dim * encoder.patch_pixels + encoder.patch_pixels
    return n


def module_param_count(encoder: EncoderConfig, decoder: DecoderConfig, encoder_only: bool = True) -> int:
    """Count by instantiating on the meta device (no memory allocated)."""
    with torch.device("meta"):
        model = MaskedAutoencoder(encoder, decoder, init_seed=None)
    params = [p for _, p in model.encoder_parameters()] if encoder_only else list(model.parameters())
    return sum(math.prod(p.shape) for p in params)
