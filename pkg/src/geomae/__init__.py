"""Multi-temporal masked autoencoder for satellite image time series."""
from .errors import ConfigError, DataError, InvalidArgumentError, NumericError
from .mae import PRESETS, DecoderConfig, EncoderConfig, MaskedAutoencoder, mae_loss, pretrain_step, preset
from .patchify import TokenGrid, embed, patchify_pixels, random_masking, unpatchify

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DecoderConfig",
    "EncoderConfig",
    "InvalidArgumentError",
    "MaskedAutoencoder",
    "NumericError",
    "PRESETS",
    "TokenGrid",
    "embed",
    "mae_loss",
    "patchify_pixels",
    "pretrain_step",
    "preset",
    "random_masking",
    "unpatchify",
]
