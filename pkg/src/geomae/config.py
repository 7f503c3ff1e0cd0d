"""Experiment configuration: YAML in, validated dataclasses out.

Errors carry the 1-based line of the offending key or value. Unknown keys are
rejected; every field has a default, so an empty file is a valid config.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import ConfigError, InvalidArgumentError
from .mae import PRESETS, DecoderConfig, EncoderConfig
from .trainer import ScheduleConfig

TASKS = ("pretrain", "classify", "segment", "regress")


def _choice(default, *choices):
    return field(default=default, metadata={"choices": choices})


@dataclass
class ModelConfig:
    """A preset plus optional per-field overrides (``None`` keeps the preset value)."""

    preset: str = _choice("tiny", *PRESETS)
    dim: int | None = None
    depth: int | None = None
    heads: int | None = None
    mlp_ratio: float | None = None
    patch: list[int] | None = None
    channels: int | None = None
    decoder_dim: int | None = None
    decoder_depth: int | None = None
    decoder_heads: int | None = None
    init_scheme: str = _choice("xavier", "xavier", "trunc_normal")
    dtype: str = _choice("float64", "float64", "float32")

    def encoder(self) -> EncoderConfig:
        enc, _ = PRESETS[self.preset]
        kw = {k: getattr(self, k) for k in ("dim", "depth", "heads", "mlp_ratio", "channels") if getattr(self, k) is not None}
        if self.patch is not None:
            kw["patch"] = tuple(self.patch)
        return dataclasses.replace(enc, **kw)

    def decoder(self) -> DecoderConfig:
        _, dec = PRESETS[self.preset]
        kw = {
            k: getattr(self, f"decoder_{k}")
            for k in ("dim", "depth", "heads")
            if getattr(self, f"decoder_{k}") is not None
        }
        return dataclasses.replace(dec, **kw)


@dataclass
class DataConfig:
    manifest: str | None = None  # chip manifest (pretrain, finetune, embed)
    catalog: str | None = None  # tile catalog CSV (sample-dataset)
    scenes: str | None = None  # scene QA index CSV (sample-dataset)
    checkpoint: str | None = None  # pretrained checkpoint dir (finetune, embed, eval)
    predictions: str | None = None  # pred,true CSV (eval)
    normalize: bool = True  # per-channel standardisation with training-set statistics
    crop: int | None = None  # random crop size; None disables crop and flip


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int | None = 200
    epochs: float | None = None
    schedule_unit: str = _choice("epochs", "epochs", "steps")
    mask_ratio: float = 0.75
    drop_prob: float = 0.1
    norm_pix: bool = False
    checkpoint_every: int = 0


@dataclass
class FinetuneConfig:
    head: str = _choice("auto", "auto", "linear", "deconv", "convup", "gpp")
    n_classes: int = 2
    class_weights: list[float] | None = None
    freeze_backbone: bool = True
    head_depth: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    patience: int = 20
    loyo: bool = False  # regression: leave-one-year-out folds instead of the manifest split


@dataclass
class BenchmarkConfig:
    budget: int = 10
    n_seeds: int = 10
    lr_range: list[float] = field(default_factory=lambda: [1e-4, 1e-2])
    weight_decay_range: list[float] = field(default_factory=lambda: [1e-3, 0.3])
    decoder_depths: list[int] = field(default_factory=lambda: [1, 2])


@dataclass
class SamplerSection:
    train_fraction: float = 0.95
    per_class: int = 100
    pool_size: int = 500
    n_urban: int = 1000
    n_entropy: int = 1000
    write_chips: bool = False  # render synthetic chips for each sampled record
    chip_size: int = 32


@dataclass
class ExperimentConfig:
    task: str = _choice("pretrain", *TASKS)
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)


PATH_FIELDS = ("manifest", "catalog", "scenes", "checkpoint", "predictions")


# YAML tree with line numbers ---------------------------------------------------------
@dataclass
class _Node:
    value: Any  # dict[str, (_Node, key_line)] | list[_Node] | scalar
    line: int | None


def _tree(node: yaml.Node, loader: yaml.SafeLoader) -> _Node:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out: dict[str, tuple[_Node, int]] = {}
        for knode, vnode in node.value:
            key = loader.construct_object(knode)
            kline = knode.start_mark.line + 1
            if not isinstance(key, str):
                raise ConfigError(f"keys must be strings, got {key!r}", kline)
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", kline)
            out[key] = (_tree(vnode, loader), kline)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_tree(n, loader) for n in node.value], line)
    return _Node(loader.construct_object(node), line)


def _plain(n: _Node):
    if isinstance(n.value, dict):
        return {k: _plain(v) for k, (v, _) in n.value.items()}
    if isinstance(n.value, list):
        return [_plain(v) for v in n.value]
    return n.value


# validation --------------------------------------------------------------------------
def _coerce(n: _Node, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if n.value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(n, inner, where)
    v = n.value
    if dataclasses.is_dataclass(tp):
        return _build(tp, n, where)
    if origin in (list, tuple):
        if not isinstance(v, list):
            raise ConfigError(f"{where}: expected a list, got {v!r}", n.line)
        (elem,) = typing.get_args(tp)[:1]
        items = [_coerce(x, elem, f"{where}[{i}]") for i, x in enumerate(v)]
        return items if origin is list else tuple(items)
    if tp is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{where}: expected true/false, got {v!r}", n.line)
        return v
    if tp is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{where}: expected an integer, got {v!r}", n.line)
        return v
    if tp is float:
        if isinstance(v, str):  # YAML 1.1 reads "1e-6" as a string
            try:
                return float(v)
            except ValueError:
                pass
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {v!r}", n.line)
        return float(v)
    if tp is str:
        if not isinstance(v, str):
            raise ConfigError(f"{where}: expected a string, got {v!r}", n.line)
        return v
    raise ConfigError(f"{where}: unsupported field type {tp}", n.line)


def _build(cls, n: _Node, where: str):
    if n.value is None:
        n = _Node({}, n.line)
    if not isinstance(n.value, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping", n.line)
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, (child, kline) in n.value.items():
        name = f"{where}.{key}" if where else key
        if key not in fields:
            raise ConfigError(f"unknown key {name!r} (allowed: {', '.join(fields)})", kline)
        value = _coerce(child, hints[key], name)
        choices = fields[key].metadata.get("choices")
        if choices and value not in choices:
            raise ConfigError(f"{name}: {value!r} is not one of {list(choices)}", child.line)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (InvalidArgumentError, ValueError, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}", n.line) from None


def _apply_override(root: _Node, text: str) -> None:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    parts = key.strip().split(".")
    node = root
    for p in parts[:-1]:
        entry = node.value.get(p)
        if entry is None:
            entry = (_Node({}, None), None)
            node.value[p] = entry
        node = entry[0]
        if not isinstance(node.value, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    value = yaml.safe_load(raw) if raw.strip() else None
    node.value[parts[-1]] = (_wrap(value), None)


def _wrap(value) -> _Node:
    if isinstance(value, dict):
        return _Node({k: (_wrap(v), None) for k, v in value.items()}, None)
    if isinstance(value, list):
        return _Node([_wrap(v) for v in value], None)
    return _Node(value, None)


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse YAML text, apply ``KEY=VALUE`` overrides (dotted keys), validate."""
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"invalid YAML: {exc.problem}", line) from None
    finally:
        loader.dispose()
    root = _tree(node, loader) if node is not None else _Node({}, 1)
    if root.value is None:
        root = _Node({}, root.line)
    if not isinstance(root.value, dict):
        raise ConfigError("top level must be a mapping", root.line)
    for ov in overrides:
        _apply_override(root, ov)
    return _build(ExperimentConfig, root, "")


def resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    """Make relative data paths and the output dir relative to ``base``."""
    data = dataclasses.replace(
        cfg.data,
        **{k: str((base / v).resolve()) for k in PATH_FIELDS if (v := getattr(cfg.data, k)) and not Path(v).is_absolute()},
    )
    out = cfg.out if Path(cfg.out).is_absolute() else str((base / cfg.out).resolve())
    return dataclasses.replace(cfg, data=data, out=out)


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load ``path`` (or defaults when ``None``); relative paths resolve against
    the config file's directory, or the working directory without a file.
    """
    if path is None:
        return resolve_paths(parse_config("", overrides), Path.cwd())
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return resolve_paths(parse_config(path.read_text(encoding="utf-8"), overrides), path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=False, default_flow_style=None)
