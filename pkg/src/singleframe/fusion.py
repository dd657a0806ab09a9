"""Frame sampling and video-level scoring from multiple frames.

``concat`` feeds all frame tokens to the multi-modal encoder in one pass (early fusion).
``lse``, ``max`` and ``mean`` score each frame separately and aggregate the logits (late fusion).
"""
from __future__ import annotations

import enum
import math

import numpy as np
import torch

from .errors import InputError
from .model import EncodedSequence, VideoTextModel, concat_frames


class EnsembleStrategy(str, enum.Enum):
    CONCAT = "concat"
    LSE = "lse"
    MAX = "max"
    MEAN = "mean"

    @property
    def is_late(self) -> bool:
        return self is not EnsembleStrategy.CONCAT


LATE_AGGREGATORS = ("lse", "max", "mean")


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_train_frame(num_frames: int, rng) -> int:
    """Uniform random frame index in [0, num_frames)."""
    if num_frames < 1:
        raise InputError("video has no frames")
    return int(_rng(rng).integers(num_frames))


def sample_train_clip(num_frames: int, n: int, rng) -> list[int]:
    """n sorted frame indices, one drawn uniformly from each of n equal segments of the video."""
    if num_frames < 1 or n < 1:
        raise InputError("num_frames and n must be >= 1")
    rng = _rng(rng)
    edges = np.linspace(0, num_frames, n + 1)
    out = []
    for i in range(n):
        lo = int(math.floor(edges[i]))
        hi = max(lo + 1, int(math.ceil(edges[i + 1])))
        out.append(int(rng.integers(lo, min(hi, num_frames))))
    return out


def sample_inference_frames(num_frames: int, t_test: int) -> list[int]:
    """Midpoint rule: index i -> floor((i + 0.5) * T / t_test). Repeats frames when t_test > T."""
    if num_frames < 1 or t_test < 1:
        raise InputError("num_frames and t_test must be >= 1")
    return [int((2 * i + 1) * num_frames // (2 * t_test)) for i in range(t_test)]


def aggregate_scores(scores, aggregator: str):
    """Reduce per-frame scores over the last axis.

    lse is log-mean-exp, so a constant vector maps to itself and mean <= lse <= max.
    Accepts a torch tensor (differentiable) or anything array-like (returns float or ndarray).
    """
    as_tensor = isinstance(scores, torch.Tensor)
    t = scores if as_tensor else torch.as_tensor(np.asarray(scores, dtype=np.float64))
    if t.numel() == 0 or t.shape[-1] == 0:
        raise InputError("cannot aggregate an empty score list")
    if not torch.isfinite(t).all():
        raise InputError("scores must be finite")
    if aggregator == "mean":
        out = t.mean(dim=-1)
    elif aggregator == "max":
        out = t.max(dim=-1).values
    elif aggregator == "lse":
        out = torch.logsumexp(t, dim=-1) - math.log(t.shape[-1])
    else:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    if as_tensor:
        return out
    return out.item() if out.dim() == 0 else out.numpy()


def predict_early_fusion(model: VideoTextModel, text: EncodedSequence, frame_encodings: list[EncodedSequence]) -> torch.Tensor:
    if not frame_encodings:
        raise InputError("no frame encodings given")
    return model.multimodal_fuse(text, concat_frames(frame_encodings)).match_logit


def predict_late_fusion(model: VideoTextModel, text: EncodedSequence, frame_encodings: list[EncodedSequence],
                        aggregator: str) -> torch.Tensor:
    if not frame_encodings:
        raise InputError("no frame encodings given")
    if aggregator not in LATE_AGGREGATORS:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    b = text.batch_size
    t = len(frame_encodings)
    # score all frames in one batched pass: (t*b) pairs
    text_rep = EncodedSequence(text.states.repeat(t, 1, 1), text.mask.repeat(t, 1), text.pooled.repeat(t, 1))
    frames = EncodedSequence(
        torch.cat([e.states for e in frame_encodings]),
        torch.cat([e.mask for e in frame_encodings]),
        torch.cat([e.pooled for e in frame_encodings]),
    )
    per_frame = model.multimodal_fuse(text_rep, frames).match_logit.reshape(t, b).T
    return aggregate_scores(per_frame, aggregator)


def predict(model: VideoTextModel, text: EncodedSequence, frame_encodings: list[EncodedSequence],
            strategy: EnsembleStrategy | str) -> torch.Tensor:
    """Video-level match logit for the given strategy.

    A model carrying a temporal encoder always routes ``concat`` through it.
    """
    strategy = EnsembleStrategy(strategy)
    if strategy is EnsembleStrategy.CONCAT:
        if model.temporal is not None:
            from .temporal import predict_temporal

            return predict_temporal(model, text, frame_encodings)
        return predict_early_fusion(model, text, frame_encodings)
    if model.temporal is not None:
        raise InputError("late fusion is not defined for the temporal model")
    return predict_late_fusion(model, text, frame_encodings, strategy.value)
