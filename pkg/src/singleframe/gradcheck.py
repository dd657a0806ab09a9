"""Central finite-difference checks of autograd gradients for every loss, in float64."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np
import torch

from .config import ModelConfig
from .model import EncodedSequence, VideoTextModel
from .objectives import apply_mlm_masking, mlm_loss, sample_hard_negatives, vtc_loss, vtm_loss
from .qa import attach_decoder, qa_loss
from .temporal import attach_temporal, predict_temporal
from .tokenizer import TokenSequence, WordTokenizer

TINY_WORDS = ["red", "green", "blue", "square", "circle", "what", "color", "is", "it"]
PERTURB = 0.3


def tiny_config(vocab_size: int, **overrides) -> ModelConfig:
    kw = dict(vocab_size=vocab_size, image_size=8, patch_size=4, hidden_dim=8, proj_dim=4, heads=2,
              vision_layers=1, text_layers=1, multimodal_layers=1, temporal_layers=1, mlp_ratio=2,
              max_text_len=6, t_train_temporal=3)
    kw.update(overrides)
    return ModelConfig(**kw)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    diff = (analytic - numeric).norm().item()
    return diff / max(analytic.norm().item(), numeric.norm().item(), floor)


def finite_difference(loss_fn: Callable[[], torch.Tensor], param: torch.Tensor, step: float = 1e-5,
                      entries: np.ndarray | None = None) -> tuple[np.ndarray, torch.Tensor]:
    """Central differences (f(x+h) - f(x-h)) / 2h at the given flat entries (all by default)."""
    flat = param.data.view(-1)
    if entries is None:
        entries = np.arange(flat.numel())
    out = torch.empty(len(entries), dtype=torch.float64)
    with torch.no_grad():
        for k, i in enumerate(entries):
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            out[k] = (up - down) / (2 * step)
    return entries, out


def check_gradients(loss_fn: Callable[[], torch.Tensor], module: torch.nn.Module, step: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0, skip_zero: bool = False) -> dict[str, float]:
    """Relative error between autograd and finite differences for every parameter tensor.

    ``max_entries`` caps the number of checked entries per tensor: the flat tensor is cut into
    ``max_entries`` equal strata and one seeded random entry is taken from each. Fused tensors
    (e.g. key/value projections, whose key-bias half has an identically zero gradient) are thus
    always sampled across all their parts.
    """
    rng = np.random.default_rng(seed)
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    errors = {}
    for name, p in module.named_parameters():
        analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        n = p.numel()
        entries = None
        if max_entries is not None and n > max_entries:
            edges = np.linspace(0, n, max_entries + 1).astype(int)
            entries = np.array([rng.integers(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])
        idx, numeric = finite_difference(loss_fn, p, step, entries)
        a = analytic.view(-1)[torch.as_tensor(idx)]
        if skip_zero and a.abs().max() == 0 and numeric.abs().max() < 1e-10:
            continue
        errors[name] = relative_error(a, numeric)
    module.zero_grad(set_to_none=True)
    return errors


def _setup(seed: int, n: int = 3, t_frames: int = 3):
    tok = WordTokenizer(TINY_WORDS)
    cfg = tiny_config(tok.vocab_size)
    model = VideoTextModel(cfg, seed=seed).double()
    attach_temporal(model, seed=seed + 1)
    attach_decoder(model)
    model.double()
    g = torch.Generator().manual_seed(seed)
    # perturb every parameter so no gradient is checked at a symmetric / all-zero point
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name != "log_tau":
                p.add_(PERTURB * torch.randn(p.shape, generator=g, dtype=p.dtype))
    frames = torch.rand(n, t_frames, cfg.image_size, cfg.image_size, cfg.channels, generator=g, dtype=torch.float64)
    texts = ["red square", "green circle", "blue square"][:n]
    tokens = tok.encode_batch(texts, cfg.max_text_len)
    return tok, cfg, model, frames, tokens


def gradcheck_suite(seed: int = 0, step: float = 1e-5, max_entries: int | None = None) -> dict:
    """Check VTC, MLM, VTM, QA and temporal-score gradients on a D=8, n=3 model.

    Returns {"losses": {name: {"max_rel_error", "per_param"}}, "max_rel_error", "seconds"}.
    """
    t0 = time.perf_counter()
    tok, cfg, model, frames, tokens = _setup(seed)
    n = frames.shape[0]
    first = frames[:, 0]

    def vtc():
        v = model.project_pool(model.encode_frame(first), "vision")
        t = model.project_pool(model.encode_text(tokens), "text")
        return vtc_loss(v, t, model.temperature, "sum")

    masked = apply_mlm_masking(tokens.ids, tokens.mask, cfg.mlm_mask_ratio, np.random.default_rng(seed), cfg.vocab_size)
    if (masked.labels == -1).all():
        masked.labels[0, 1] = tokens.ids[0, 1]

    def mlm():
        text = model.encode_text(TokenSequence(masked.input_ids, tokens.mask))
        fused = model.multimodal_fuse(text, model.encode_frame(first))
        return mlm_loss(model.mlm_logits(fused.states), masked.labels)

    with torch.no_grad():
        v = model.project_pool(model.encode_frame(first), "vision")
        t = model.project_pool(model.encode_text(tokens), "text")
        negatives = sample_hard_negatives(v @ t.T, model.temperature, np.random.default_rng(seed))

    def vtm():
        text = model.encode_text(tokens)
        visual = model.encode_frame(first)
        return vtm_loss(model, text, visual, None, None, negatives=negatives)

    answers = tok.encode_batch(["red", "green", "blue"][:n], cfg.max_text_len)
    question = tok.encode_batch(["what color is it"] * n, cfg.max_text_len)

    def qa():
        q = model.encode_text(question)
        fused = model.multimodal_fuse(q, model.encode_frame(first))
        return qa_loss(model, EncodedSequence(fused.states, q.mask, fused.states[:, 0]), answers)

    def temporal():
        text = model.encode_text(tokens)
        encs = [model.encode_frame(frames[:, i]) for i in range(frames.shape[1])]
        return predict_temporal(model, text, encs).sum()

    with torch.no_grad():
        model.temporal.pos_table.normal_(0.0, 0.1, generator=torch.Generator().manual_seed(seed + 7))

    report = {"losses": {}, "config": cfg.to_dict(), "step": step, "dtype": "float64"}
    for name, fn in (("vtc", vtc), ("mlm", mlm), ("vtm", vtm), ("qa", qa), ("temporal", temporal)):
        errs = check_gradients(fn, model, step=step, max_entries=max_entries, seed=seed)
        report["losses"][name] = {"max_rel_error": max(errs.values()), "per_param": errs}
    report["max_rel_error"] = max(v["max_rel_error"] for v in report["losses"].values())
    report["seconds"] = time.perf_counter() - t0
    return report
