"""Pre-training losses: vision-text contrastive (VTC), masked language modelling (MLM),
and vision-text matching (VTM) with in-batch hard negatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError
from .model import EncodedSequence, VideoTextModel
from .tokenizer import CLS, MASK, PAD, SEP

IGNORE = -1
SPECIAL_IDS = (PAD, CLS, SEP, MASK)


def vtc_loss(vision_proj: torch.Tensor, text_proj: torch.Tensor, tau, reduction: str = "sum",
             positive_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Two-directional softmax cross-entropy over s = vision_proj @ text_proj.T.

    With ``reduction="sum"`` this is -sum_i(log p_i^v + log p_i^l); ``"mean"`` divides by n.
    ``positive_mask`` (n x n bool, diagonal True) marks extra in-batch positives, e.g. duplicate
    captions; the target distribution then spreads uniformly over each row's positives. With the
    identity mask (the default) both forms coincide.
    """
    tau = torch.as_tensor(tau, dtype=vision_proj.dtype)
    if (tau <= 0).any():
        raise InputError("temperature must be positive")
    n = vision_proj.shape[0]
    if n < 1 or text_proj.shape[0] != n:
        raise InputError("vision and text batches must have the same non-zero size")
    sim = vision_proj @ text_proj.T / tau
    if positive_mask is None:
        idx = torch.arange(n)
        loss = -(sim.log_softmax(dim=1)[idx, idx].sum() + sim.log_softmax(dim=0)[idx, idx].sum())
    else:
        target = positive_mask.to(sim.dtype)
        v2t = -(target / target.sum(1, keepdim=True) * sim.log_softmax(dim=1)).sum()
        t2v = -(target / target.sum(0, keepdim=True) * sim.log_softmax(dim=0)).sum()
        loss = v2t + t2v
    if reduction == "mean":
        return loss / n
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


@dataclass
class MaskedTokens:
    input_ids: torch.Tensor  # corrupted ids
    labels: torch.Tensor  # original id at corrupted positions, IGNORE elsewhere


def apply_mlm_masking(ids: torch.Tensor, mask: torch.Tensor, ratio: float, rng, vocab_size: int) -> MaskedTokens:
    """BERT-style corruption: select each maskable position with probability ``ratio``;
    selected positions become [MASK] 80%, a random word 10%, unchanged 10%.

    Special tokens and padding are never selected. Works on (L,) or (B, L) ids.
    """
    if not 0.0 < ratio < 1.0:
        raise InputError("mask ratio must lie in (0, 1)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    ids_np = ids.cpu().numpy()
    maskable = mask.cpu().numpy().astype(bool) & ~np.isin(ids_np, SPECIAL_IDS)
    selected = (rng.random(ids_np.shape) < ratio) & maskable
    action = rng.random(ids_np.shape)
    random_words = rng.integers(len(SPECIAL_IDS), max(vocab_size, len(SPECIAL_IDS) + 1), size=ids_np.shape)
    corrupted = ids_np.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    corrupted[to_mask] = MASK
    corrupted[to_random] = random_words[to_random]
    labels = np.where(selected, ids_np, IGNORE)
    return MaskedTokens(torch.as_tensor(corrupted, dtype=torch.long), torch.as_tensor(labels, dtype=torch.long))


def mlm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy at labelled positions, averaged over them. No labels -> 0 with zero gradient."""
    sel = labels != IGNORE
    if not sel.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[sel], labels[sel])


def negative_weights(sim: torch.Tensor, tau, positive_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise softmax of sim / tau with the diagonal (and any extra positives) excluded."""
    n = sim.shape[0]
    excluded = torch.eye(n, dtype=torch.bool)
    if positive_mask is not None:
        excluded = excluded | positive_mask.bool()
    logits = (sim / torch.as_tensor(tau, dtype=sim.dtype)).masked_fill(excluded, float("-inf"))
    weights = logits.softmax(dim=1)
    # rows with every candidate excluded fall back to uniform over non-diagonal entries
    bad = excluded.all(dim=1)
    if bad.any():
        fallback = (~torch.eye(n, dtype=torch.bool)).to(sim.dtype)
        weights[bad] = fallback[bad] / fallback[bad].sum(dim=1, keepdim=True)
    return weights


def sample_hard_negatives(sim: torch.Tensor, tau, rng, positive_mask: torch.Tensor | None = None):
    """For each video i draw one negative text, for each text j one negative video.

    ``sim[i, j]`` is the similarity of video i and text j. Returns (neg_text_for_video, neg_video_for_text).
    """
    n = sim.shape[0]
    if n < 2:
        raise InputError("hard negative sampling needs a batch of at least 2 pairs")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    with torch.no_grad():
        w_v2t = negative_weights(sim.detach().double(), tau, positive_mask).numpy()
        pm = None if positive_mask is None else positive_mask.T
        w_t2v = negative_weights(sim.detach().double().T, tau, pm).numpy()
    neg_text = np.array([rng.choice(n, p=row / row.sum()) for row in w_v2t])
    neg_video = np.array([rng.choice(n, p=row / row.sum()) for row in w_t2v])
    return neg_text, neg_video


def matching_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def vtm_loss(model: VideoTextModel, text: EncodedSequence, visual: EncodedSequence, sim: torch.Tensor, rng,
             positive_mask: torch.Tensor | None = None, negatives=None) -> torch.Tensor:
    """Binary matching loss over n positives plus n negative texts and n negative videos.

    ``negatives`` may pin the sampled (neg_text, neg_video) indices, e.g. for gradient checks.
    """
    n = text.batch_size
    if n < 2:
        raise InputError("VTM needs at least 2 pairs in the batch")
    if negatives is None:
        negatives = sample_hard_negatives(sim, model.temperature.detach(), rng, positive_mask)
    neg_text, neg_video = (torch.as_tensor(x, dtype=torch.long) for x in negatives)
    vis_idx = torch.cat([torch.arange(n), torch.arange(n), neg_video])
    txt_idx = torch.cat([torch.arange(n), neg_text, torch.arange(n)])
    logits = model.multimodal_fuse(text.select(txt_idx), visual.select(vis_idx)).match_logit
    labels = torch.cat([torch.ones(n), torch.zeros(2 * n)])
    return matching_bce(logits, labels)
