"""Fine-tuning and evaluation of task heads over a pretrained encoder."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint
from .chips import ChipDataset, read_chip
from .errors import ConfigError, DataError, InvalidArgumentError, NumericError
from .heads import ConvUpSegHead, DeconvSegHead, GPPHead, LinearClassifier, weighted_cross_entropy
from .mae import DecoderConfig, EncoderConfig, MaskedAutoencoder
from .metrics import confusion, regression_scores, scores
from .patchify import TokenGrid
from .seeding import numpy_rng, sub_seed
from .trainer import EarlyStopping, load_model_tensors

PRIMARY_METRIC = {"classify": "overall_acc", "segment": "miou", "regress": "r2"}


def load_backbone(
    checkpoint, encoder: EncoderConfig, decoder: DecoderConfig, init_seed: int, init_scheme: str = "xavier", dtype=torch.float64
) -> tuple[MaskedAutoencoder, np.ndarray | None, np.ndarray | None]:
    """Model from a pretraining checkpoint, or freshly initialised without one.

    Returns the model plus the normalisation statistics stored with it.
    """
    if checkpoint is None:
        model = MaskedAutoencoder(encoder, decoder, init_seed=init_seed, init_scheme=init_scheme).to(dtype)
        return model, None, None
    tensors, meta = load_checkpoint(checkpoint)
    if "encoder" not in meta:
        raise DataError(f"{checkpoint}: not a pretraining checkpoint (no encoder record)")
    stored = EncoderConfig(**{**meta["encoder"], "patch": tuple(meta["encoder"]["patch"])})
    diffs = [
        f"{k}: checkpoint {getattr(stored, k)} vs config {getattr(encoder, k)}"
        for k in ("dim", "depth", "heads", "channels", "patch")
        if getattr(stored, k) != getattr(encoder, k)
    ]
    if diffs:
        raise ConfigError(f"checkpoint {checkpoint} does not match the model config ({'; '.join(diffs)})")
    model = MaskedAutoencoder(stored, DecoderConfig(**meta["decoder"]), init_seed=None).to(dtype)
    load_model_tensors(model, tensors)
    mean = np.asarray(meta["norm_mean"]) if "norm_mean" in meta else None
    std = np.asarray(meta["norm_std"]) if "norm_std" in meta else None
    return model, mean, std


@dataclass
class LabelledSet:
    """Every chip of a labelled manifest held in memory, already normalised."""

    x: torch.Tensor  # [N, T, C, H, W]
    meta: list | None
    split: np.ndarray  # [N] of str
    labels: torch.Tensor  # [N] class ids, [N, H, W] masks, or [N] targets
    aux: torch.Tensor | None = None  # [N, K, h, w]
    years: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def indices(self, split: str) -> np.ndarray:
        return np.nonzero(self.split == split)[0]


def load_labelled(manifest, task: str, mean=None, std=None, dtype=torch.float64) -> LabelledSet:
    ds = ChipDataset(manifest)
    if not len(ds):
        raise DataError(f"{manifest}: manifest lists no chips")
    rows = ds.rows
    needed = {"classify": "label", "segment": "label_path", "regress": "target"}[task]
    if needed not in rows[0]:
        raise DataError(f"{manifest}: task {task!r} needs a {needed!r} column")
    x = np.stack([ds.chip(i).astype(np.float64) for i in range(len(ds))])
    if mean is not None:
        x = (x - mean[None, None, :, None, None]) / std[None, None, :, None, None]
    metas = [ds.meta(i) for i in range(len(ds))]
    meta = metas if all(m is not None for m in metas) else None
    split = np.array([r.get("split", "train") for r in rows])
    aux = years = None
    try:
        if task == "classify":
            labels = torch.tensor([int(r["label"]) for r in rows])
        elif task == "segment":
            labels = torch.as_tensor(np.stack([read_chip(ds.resolve(r["label_path"])) for r in rows])).long()
        else:
            labels = torch.tensor([float(r["target"]) for r in rows], dtype=dtype)
            if "aux_path" in rows[0]:
                aux = torch.as_tensor(np.stack([read_chip(ds.resolve(r["aux_path"])) for r in rows]), dtype=dtype)
            if "year" in rows[0]:
                years = np.array([int(r["year"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{manifest}: bad label column: {exc}") from None
    return LabelledSet(torch.as_tensor(x, dtype=dtype), meta, split, labels, aux, years)


def _select_meta(meta, idx):
    return None if meta is None else [meta[int(i)] for i in idx]


@torch.no_grad()
def encode_all(model: MaskedAutoencoder, data: LabelledSet, batch_size: int = 32) -> TokenGrid:
    """Frozen-encoder latents of every chip, canonical token order."""
    model.eval()
    parts, dims, patch = [], None, None
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        grid = model.forward_features(data.x[idx], _select_meta(data.meta, idx))
        parts.append(grid.data)
        dims, patch = grid.dims, grid.patch
    return TokenGrid(torch.cat(parts), dims, patch)


class PooledMLPClassifier(nn.Module):
    """Mean-pooled tokens through ``depth - 1`` hidden GELU layers, then linear."""

    def __init__(self, dim: int, n_classes: int, depth: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        for _ in range(depth - 1):
            layers += [nn.Linear(dim, dim), nn.GELU()]
        self.mlp = nn.Sequential(*layers, nn.Linear(dim, n_classes))

    def forward(self, latent: TokenGrid) -> torch.Tensor:
        return self.mlp(latent.data.mean(dim=1))


def build_head(task: str, kind: str, n_classes: int, dim: int, dims, out_size, aux_shape=None, depth: int = 1) -> nn.Module:
    T, gh, gw = dims
    if task == "classify":
        if kind not in ("auto", "linear"):
            raise ConfigError(f"head {kind!r} does not fit task classify")
        return LinearClassifier(dim, n_classes) if depth == 1 else PooledMLPClassifier(dim, n_classes, depth)
    if task == "segment":
        if kind in ("auto", "deconv"):
            return DeconvSegHead(T * dim, n_classes)
        if kind == "convup":
            return ConvUpSegHead(T * dim, n_classes, (gh, gw), out_size)
        raise ConfigError(f"head {kind!r} does not fit task segment")
    if task == "regress":
        if kind not in ("auto", "gpp"):
            raise ConfigError(f"head {kind!r} does not fit task regress")
        if aux_shape is None:
            raise DataError("regression needs auxiliary variables (aux_path column)")
        return GPPHead(T * gh * gw, dim, aux_channels=aux_shape[0], aux_size=aux_shape[1:])
    raise ConfigError(f"task {task!r} has no fine-tuning head")


@dataclass
class FinetuneSettings:
    task: str
    head: str = "auto"
    n_classes: int = 2
    class_weights: list[float] | None = None
    freeze_backbone: bool = True
    head_depth: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    patience: int = 20


@dataclass
class FinetuneResult:
    head: nn.Module
    backbone: MaskedAutoencoder
    val_metrics: dict
    test_metrics: dict
    test_pred: np.ndarray
    test_true: np.ndarray
    history: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, train loss, val loss


class _Runner:
    def __init__(self, backbone, head, data: LabelledSet, s: FinetuneSettings, latents: TokenGrid | None):
        self.backbone, self.head, self.data, self.s = backbone, head, data, s
        self.latents = latents
        self.out_size = tuple(data.x.shape[-2:])

    def features(self, idx) -> TokenGrid:
        if self.latents is not None:
            return TokenGrid(self.latents.data[idx], self.latents.dims, self.latents.patch)
        return self.backbone.forward_features(self.data.x[idx], _select_meta(self.data.meta, idx))

    def outputs(self, idx):
        z = self.features(idx)
        if self.s.task == "segment":
            return self.head(z, self.out_size)
        if self.s.task == "regress":
            return self.head(z.data, self.data.aux[idx])
        return self.head(z)

    def loss(self, out, idx):
        y = self.data.labels[idx]
        if self.s.task == "regress":
            return F.mse_loss(out, y)
        return weighted_cross_entropy(out, y, self.s.class_weights)

    @torch.no_grad()
    def evaluate(self, idx):
        self.head.eval()
        self.backbone.eval()
        out = self.outputs(idx)
        loss = float(self.loss(out, idx))
        pred = out if self.s.task == "regress" else out.argmax(dim=1)
        return loss, pred.numpy(), self.data.labels[idx].numpy()


def task_metrics(task: str, pred, true, n_classes: int) -> dict:
    if task == "regress":
        return regression_scores(pred, true)
    return scores(confusion(pred, true, n_classes))


def run_finetune(
    backbone: MaskedAutoencoder,
    data: LabelledSet,
    settings: FinetuneSettings,
    seed: int,
    train_idx,
    val_idx,
    test_idx,
    latents: TokenGrid | None = None,
) -> FinetuneResult:
    """Train a head (and optionally the encoder) and score it on val and test.

    With a frozen backbone, pass ``latents`` from :func:`encode_all` to skip
    the encoder entirely. The head state with the lowest validation loss is kept.
    """
    s = settings
    train_idx, val_idx, test_idx = (np.asarray(i, dtype=np.int64) for i in (train_idx, val_idx, test_idx))
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise DataError("fine-tuning needs non-empty train and test splits")
    if s.freeze_backbone:
        backbone.requires_grad_(False)
        if latents is None:
            latents = encode_all(backbone, data)
    else:
        backbone = copy.deepcopy(backbone)
        backbone.requires_grad_(True)
        latents = None
    dims = latents.dims if latents is not None else backbone.forward_features(data.x[:1]).dims
    torch.manual_seed(sub_seed(seed, "init/head"))
    head = build_head(
        s.task, s.head, s.n_classes, backbone.encoder_cfg.dim, dims, tuple(data.x.shape[-2:]),
        None if data.aux is None else tuple(data.aux.shape[1:]), s.head_depth,
    ).to(data.x.dtype)
    params = list(head.parameters()) + ([] if s.freeze_backbone else list(backbone.parameters()))
    opt = torch.optim.AdamW(params, lr=s.lr, weight_decay=s.weight_decay, foreach=False)
    run = _Runner(backbone, head, data, s, latents)
    stopper = EarlyStopping(s.patience)
    best_state, best_val = None, float("inf")
    history = []
    for epoch in range(s.epochs):
        head.train()
        if not s.freeze_backbone:
            backbone.train()
        perm = train_idx[numpy_rng(seed, f"finetune/epoch={epoch}").permutation(len(train_idx))]
        total = 0.0
        for b in range(0, len(perm), s.batch_size):
            idx = perm[b : b + s.batch_size]
            loss = run.loss(run.outputs(idx), idx)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        val_loss = run.evaluate(val_idx)[0] if len(val_idx) else total / len(perm)
        history.append((epoch, total / len(perm), val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_state = (copy.deepcopy(head.state_dict()), None if s.freeze_backbone else copy.deepcopy(backbone.state_dict()))
        if stopper.update(val_loss):
            break
    if best_state is not None:
        head.load_state_dict(best_state[0])
        if best_state[1] is not None:
            backbone.load_state_dict(best_state[1])
    val_metrics = {}
    if len(val_idx):
        _, vp, vt = run.evaluate(val_idx)
        val_metrics = _safe_metrics(s.task, vp, vt, s.n_classes)
    _, tp, tt = run.evaluate(test_idx)
    return FinetuneResult(head, backbone, val_metrics, _safe_metrics(s.task, tp, tt, s.n_classes), tp, tt, history)


def _safe_metrics(task, pred, true, n_classes) -> dict:
    try:
        return task_metrics(task, pred, true, n_classes)
    except InvalidArgumentError as exc:
        raise DataError(f"cannot score predictions: {exc}") from None


def split_indices(data: LabelledSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Manifest train/val/test split; without a test split, val doubles as test."""
    tr, va, te = data.indices("train"), data.indices("val"), data.indices("test")
    if len(te) == 0:
        te = va
    return tr, va, te
