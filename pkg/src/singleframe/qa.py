"""Open-ended QA by answer generation, and multiple choice as retrieval."""
from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError
from .model import EncodedSequence, VideoTextModel
from .tokenizer import CLS, MASK, PAD, SEP, TokenSequence


def attach_decoder(model: VideoTextModel) -> VideoTextModel:
    """Add an answer decoder to ``model`` in place.

    The decoder has the multi-modal encoder's architecture and starts from a copy of its
    weights; the output head starts from a copy of the MLM head.
    """
    model.decoder = torch.nn.ModuleDict({
        "blocks": copy.deepcopy(model.fusion),
        "head": copy.deepcopy(model.mlm_head),
    })
    return model


def _decoder_logits(model: VideoTextModel, prefix_ids: torch.Tensor, prefix_mask: torch.Tensor,
                    context: torch.Tensor, context_mask: torch.Tensor) -> torch.Tensor:
    x = model.text.embed(prefix_ids)
    h = model.decoder["blocks"](x, context, prefix_mask, context_mask, causal=True)
    return model.decoder["head"](h)


def qa_loss(model: VideoTextModel, fused: EncodedSequence, answers: TokenSequence) -> torch.Tensor:
    """Teacher-forced cross-entropy over answer tokens (the [SEP] terminator included)."""
    if model.decoder is None:
        raise InputError("model has no answer decoder; call attach_decoder first")
    ids, mask = answers.ids, answers.mask.bool()
    logits = _decoder_logits(model, ids[:, :-1], mask[:, :-1], fused.states, fused.mask)
    targets = ids[:, 1:].masked_fill(~mask[:, 1:], -100)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


@torch.no_grad()
def decode_answer(model: VideoTextModel, fused: EncodedSequence, max_len: int,
                  allowed_ids: Sequence[int] | None = None) -> list[list[int]]:
    """Greedy decoding from [CLS]; a sequence stops after emitting [SEP] or max_len tokens.

    Returns the generated ids per example (the start token excluded, a final [SEP] kept).
    [PAD], [CLS] and [MASK] are never emitted; ``allowed_ids`` further restricts the output
    vocabulary ([SEP] is always allowed).
    """
    if max_len < 1:
        raise InputError("max_len must be >= 1")
    if model.decoder is None:
        raise InputError("model has no answer decoder; call attach_decoder first")
    b = fused.batch_size
    vocab = model.cfg.vocab_size
    banned = torch.zeros(vocab, dtype=torch.bool)
    banned[[PAD, CLS, MASK]] = True
    if allowed_ids is not None:
        keep = torch.zeros(vocab, dtype=torch.bool)
        keep[list(allowed_ids)] = True
        keep[SEP] = True
        banned |= ~keep
    limit = min(max_len, model.cfg.max_text_len - 1)
    seq = torch.full((b, 1), CLS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(limit):
        logits = _decoder_logits(model, seq, torch.ones_like(seq, dtype=torch.bool), fused.states, fused.mask)
        nxt = logits[:, -1].masked_fill(banned, float("-inf")).argmax(dim=-1)
        for i in range(b):
            if not done[i]:
                out[i].append(int(nxt[i]))
        done |= nxt == SEP
        if done.all():
            break
        seq = torch.cat([seq, nxt[:, None]], dim=1)
    return out


@torch.no_grad()
def answer_log_likelihoods(model: VideoTextModel, fused: EncodedSequence, answers: TokenSequence) -> torch.Tensor:
    """(B, K) log-probability of each of K candidate answers ([SEP] included) under the decoder."""
    if model.decoder is None:
        raise InputError("model has no answer decoder; call attach_decoder first")
    b, k = fused.batch_size, answers.ids.shape[0]
    if k == 0:
        raise InputError("no candidate answers given")
    ids = answers.ids.repeat(b, 1)
    mask = answers.mask.bool().repeat(b, 1)
    states = fused.states.repeat_interleave(k, dim=0)
    ctx_mask = fused.mask.repeat_interleave(k, dim=0)
    logp = _decoder_logits(model, ids[:, :-1], mask[:, :-1], states, ctx_mask).log_softmax(-1)
    tok_lp = logp.gather(-1, ids[:, 1:, None]).squeeze(-1) * mask[:, 1:]
    return tok_lp.sum(-1).reshape(b, k)


def argmax_first(scores) -> int:
    """Index of the maximum; ties go to the lowest index."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise InputError("no scores given")
    return int(np.flatnonzero(arr == arr.max())[0])


def multiple_choice_predict(model: VideoTextModel, tokenizer, frames: torch.Tensor, candidates: Sequence[str],
                            t_test: int = 4) -> int:
    """Score each candidate against the video by early fusion over t_test uniform frames; return the argmax."""
    from .evaluation import score_matrix

    if not candidates:
        raise InputError("no candidates given")
    scores = score_matrix(model, tokenizer, list(candidates), [frames], "concat", t_test)[:, 0]
    return argmax_first(scores)
