"""Master-seed fan-out.

Every random component draws from its own named sub-seed so that changing,
say, the masking stream never perturbs the data order. The derivation is::

    sub_seed(master, name) = int.from_bytes(sha256(f"{master}:{name}")[:8], "little") & (2**63 - 1)

Names may be nested with ``/`` (``"mask/step=12"``).
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch

STREAMS = ("data", "mask", "drop", "init", "search", "augment", "sampler")


def sub_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def numpy_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(master, name))


def torch_gen(master: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(sub_seed(master, name))
    return g
