"""Checkpoint archive: a numpy ``.npz`` holding every parameter under its dotted name plus a
``__meta__`` entry (UTF-8 JSON bytes) with the format version, ModelConfig and vocabulary."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .model import VideoTextModel
from .tokenizer import WordTokenizer

FORMAT = "singleframe-checkpoint"
VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(model: VideoTextModel, path: str | os.PathLike, tokenizer: WordTokenizer | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "dtype": str(model.dtype).replace("torch.", ""),
        "has_temporal": model.temporal is not None,
        "has_decoder": model.decoder is not None,
        "vocab": tokenizer.to_list() if tokenizer is not None else None,
        "extra": extra or {},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # write through a file handle so the name is used verbatim (no .npz suffix appended)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_meta(path: str | os.PathLike) -> dict:
    with np.load(path) as z:
        meta = json.loads(bytes(z[META_KEY]).decode())
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if meta["version"] > VERSION:
        raise ValueError(f"checkpoint version {meta['version']} is newer than supported ({VERSION})")
    return meta


def load_checkpoint(path: str | os.PathLike):
    """Return (model, tokenizer or None, meta)."""
    from .qa import attach_decoder
    from .temporal import attach_temporal

    meta = read_meta(path)
    model = VideoTextModel(ModelConfig.from_dict(meta["config"]))
    if meta["has_temporal"]:
        attach_temporal(model)
    if meta["has_decoder"]:
        attach_decoder(model)
    model = model.to(getattr(torch, meta.get("dtype", "float32")))
    with np.load(path) as z:
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != META_KEY}
    model.load_state_dict(state)
    tok = WordTokenizer(meta["vocab"]) if meta.get("vocab") is not None else None
    return model, tok, meta
