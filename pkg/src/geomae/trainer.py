"""Learning-rate schedule, augmentation and the seeded training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .chips import ChipDataset
from .errors import InvalidArgumentError, NumericError
from .mae import DecoderConfig, EncoderConfig, MaskedAutoencoder, pretrain_step
from .patchify import ReflectanceBatch
from .seeding import numpy_rng, sub_seed


@dataclass
class ScheduleConfig:
    max_lr: float = 5e-4
    start_lr: float = 1e-6
    warmup_epochs: float = 40.0
    total_epochs: float = 400.0
    min_lr: float = 0.0
    weight_decay: float = 0.05

    def __post_init__(self):
        if not self.start_lr < self.max_lr:
            raise InvalidArgumentError("start_lr must be below max_lr")
        if not self.warmup_epochs < self.total_epochs:
            raise InvalidArgumentError("warmup must end before training does")


@dataclass
class OptimConfig:
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Linear warmup from ``start_lr`` then half-cosine decay to ``min_lr``.

    Past ``total_epochs`` the rate stays at ``min_lr``.
    """
    if epoch < cfg.warmup_epochs:
        return cfg.start_lr + (cfg.max_lr - cfg.start_lr) * epoch / cfg.warmup_epochs
    progress = min(1.0, (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs))
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


# augmentation -------------------------------------------------------------------
def augment_params(height: int, width: int, crop: int, rng: np.random.Generator) -> tuple[int, int, bool]:
    if height < crop or width < crop:
        raise InvalidArgumentError(f"input {height}x{width} smaller than crop {crop}")
    top = int(rng.integers(0, height - crop + 1))
    left = int(rng.integers(0, width - crop + 1))
    flip = bool(rng.random() < 0.5)
    return top, left, flip


def apply_augment(sample, top: int, left: int, flip: bool, crop: int):
    """Crop ``[..., H, W]`` at ``(top, left)`` and optionally mirror horizontally."""
    out = sample[..., top : top + crop, left : left + crop]
    if flip:
        out = out.flip(-1) if isinstance(out, torch.Tensor) else out[..., ::-1]
    return out


def augment(sample, rng: np.random.Generator, crop: int = 224):
    """Random crop and horizontal flip shared by every timestamp of a ``[T, C, H, W]`` sample."""
    top, left, flip = augment_params(sample.shape[-2], sample.shape[-1], crop, rng)
    return apply_augment(sample, top, left, flip, crop)


# optimisation -------------------------------------------------------------------
def _no_decay(name: str, p: torch.Tensor) -> bool:
    return name.endswith("bias") or "norm" in name or name in ("w_time", "w_loc")


def build_optimizer(model: torch.nn.Module, schedule: ScheduleConfig, optim: OptimConfig) -> torch.optim.AdamW:
    """AdamW; biases, norm parameters and metadata weights skip weight decay."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (no_decay if _no_decay(name, p) else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": schedule.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=schedule.start_lr, betas=tuple(optim.betas), eps=optim.eps, foreach=False)


def optimizer_tensors(model: torch.nn.Module, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        for key, value in opt.state.get(p, {}).items():
            out[f"optim.{name}.{key}"] = torch.as_tensor(value)
    return out


def restore_optimizer(model: torch.nn.Module, opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    for name, p in model.named_parameters():
        state = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            t = tensors.get(f"optim.{name}.{key}")
            if t is not None:
                state[key] = t.clone()
        if state:
            opt.state[p] = state


# data ---------------------------------------------------------------------------
@dataclass
class BatchLoader:
    """Deterministic batches: per-epoch permutation and per-step augmentation
    are both derived from the master seed, so any step can be rebuilt alone.
    """

    dataset: ChipDataset
    batch_size: int
    seed: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    crop: int | None = None
    use_meta: bool = True
    dtype: torch.dtype = torch.float64
    _perm: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.dataset) < self.batch_size:
            raise InvalidArgumentError(
                f"dataset has {len(self.dataset)} chips, fewer than batch size {self.batch_size}"
            )

    @property
    def steps_per_epoch(self) -> int:
        return len(self.dataset) // self.batch_size

    def indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        if epoch not in self._perm:
            self._perm = {epoch: numpy_rng(self.seed, f"data/epoch={epoch}").permutation(len(self.dataset))}
        return self._perm[epoch][k * self.batch_size : (k + 1) * self.batch_size]

    def batch(self, step: int) -> ReflectanceBatch:
        idx = self.indices(step)
        rng = numpy_rng(self.seed, f"augment/step={step}")
        chips, metas = [], []
        for i in idx:
            x = self.dataset.chip(int(i)).astype(np.float64)
            if self.crop is not None:
                x = np.ascontiguousarray(augment(x, rng, self.crop))
            chips.append(x)
            metas.append(self.dataset.meta(int(i)))
        x = np.stack(chips)
        if self.mean is not None:
            x = (x - self.mean[None, None, :, None, None]) / self.std[None, None, :, None, None]
        meta = metas if self.use_meta and all(m is not None for m in metas) else None
        return ReflectanceBatch(torch.as_tensor(x, dtype=self.dtype), meta)


# training loop ------------------------------------------------------------------
@dataclass
class TrainResult:
    trace: list[tuple[int, float, float, float]]
    checkpoint: Path | None
    steps: int


def write_trace(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch_fraction", "lr", "loss"])
        for step, ep, lr, loss in trace:
            w.writerow([step, repr(float(ep)), repr(float(lr)), repr(float(loss))])


def model_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"model.{k}": v for k, v in model.state_dict().items()}


def load_model_tensors(model: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    sd = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(sd)


StepFn = Callable[[torch.nn.Module, ReflectanceBatch, int], torch.Tensor]


def default_step_fn(mask_ratio: float = 0.75, drop_prob: float = 0.1, norm_pix: bool = False) -> StepFn:
    def step_fn(model, batch, step_seed):
        return pretrain_step(model, batch, mask_ratio, drop_prob, seed=step_seed, norm_pix=norm_pix).loss

    return step_fn


def train(
    model: torch.nn.Module,
    loader: BatchLoader,
    schedule: ScheduleConfig,
    optim: OptimConfig | None = None,
    seed: int = 0,
    max_steps: int | None = None,
    epochs: float | None = None,
    step_fn: StepFn | None = None,
    out_dir=None,
    checkpoint_every: int = 0,
    resume_from=None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Run AdamW steps with the warmup/cosine schedule.

    The number of steps is ``max_steps`` or ``epochs * steps_per_epoch``.
    Every piece of per-step randomness is keyed by (seed, step), so resuming
    from a checkpoint at step k reproduces the uninterrupted run exactly.
    """
    optim = optim or OptimConfig()
    step_fn = step_fn or default_step_fn()
    if max_steps is None:
        if epochs is None:
            raise InvalidArgumentError("give max_steps or epochs")
        max_steps = int(round(epochs * loader.steps_per_epoch))
    opt = build_optimizer(model, schedule, optim)
    trace: list[tuple[int, float, float, float]] = []
    start = 0
    if resume_from is not None:
        tensors, meta = load_checkpoint(resume_from)
        load_model_tensors(model, tensors)
        restore_optimizer(model, opt, tensors)
        start = int(meta["step"])
        trace = [tuple(r) for r in meta.get("trace", [])]
    out_dir = Path(out_dir) if out_dir is not None else None

    def save(step: int, name: str) -> Path:
        meta = {"step": step, "trace": trace, "schedule": asdict(schedule), "optim": asdict(optim), "seed": seed}
        if loader.mean is not None:
            meta["norm_mean"] = [float(v) for v in loader.mean]
            meta["norm_std"] = [float(v) for v in loader.std]
        meta.update(extra_meta or {})
        return save_checkpoint(out_dir / name, {**model_tensors(model), **optimizer_tensors(model, opt)}, meta)

    model.train()
    for step in range(start, max_steps):
        epoch_fraction = step / loader.steps_per_epoch
        lr = lr_at(epoch_fraction, schedule)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = loader.batch(step)
        loss = step_fn(model, batch, sub_seed(seed, f"step={step}"))
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss {float(loss.detach())} at step {step} (lr={lr:.3e})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append((step, epoch_fraction, lr, float(loss.detach())))
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0 and step + 1 < max_steps:
            save(step + 1, f"step_{step + 1:07d}")
    ckpt = None
    if out_dir is not None:
        ckpt = save(max_steps, "final")
        write_trace(out_dir / "loss_trace.csv", trace)
    return TrainResult(trace=trace, checkpoint=ckpt, steps=max_steps)


def build_model_from_meta(meta: dict, dtype=torch.float64) -> MaskedAutoencoder:
    enc = EncoderConfig(**meta["encoder"])
    dec = DecoderConfig(**meta["decoder"])
    return MaskedAutoencoder(enc, dec, init_seed=None).to(dtype)


@dataclass
class EarlyStopping:
    """Stop when the monitored loss has not improved for ``patience`` epochs."""

    patience: int = 20
    best: float = math.inf
    bad_epochs: int = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience
