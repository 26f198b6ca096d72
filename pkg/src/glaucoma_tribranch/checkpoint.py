"""Single-file checkpoints.

Layout (``.npz``): one array per named tensor under ``param/<state-dict key>``
and a JSON header in ``__meta__``:

    {"format": "tribranch-checkpoint", "version": 1,
     "config": <ModelConfig as a dict>, ...extra fields}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, MissingFile

FORMAT = "tribranch-checkpoint"
VERSION = 1


def save_checkpoint(path, state_dict, config: dict, **extra) -> None:
    meta = {"format": FORMAT, "version": VERSION, "config": config, **extra}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state_dict.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    """-> (state_dict of tensors, meta dict)"""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise DataError(f"{path} has no checkpoint header")
        meta = json.loads(str(z["__meta__"]))
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    if meta.get("format") != FORMAT:
        raise DataError(f"{path} is not a checkpoint")
    if meta.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')}")
    return state, meta
