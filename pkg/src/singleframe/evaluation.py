"""Text-to-video retrieval metrics, QA accuracy, and the frame-ensemble comparison sweep."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import VideoExample
from .errors import InputError
from .fusion import EnsembleStrategy, aggregate_scores, sample_inference_frames
from .model import EncodedSequence, VideoTextModel, concat_frames
from .qa import answer_log_likelihoods, argmax_first, decode_answer
from .records import write_json
from .temporal import temporal_visual

log = logging.getLogger(__name__)


def _gt_sets(gt) -> list[set[int]]:
    return [set(g) if isinstance(g, (set, frozenset, list, tuple)) else {int(g)} for g in gt]


def gt_ranks(scores: np.ndarray, gt) -> np.ndarray:
    """1-based rank of the best ground-truth video per text row.

    Ties are pessimistic: every non-ground-truth video scoring >= the best ground truth ranks ahead.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gts = _gt_sets(gt)
    if len(gts) != scores.shape[0]:
        raise InputError("one ground-truth entry per text row required")
    ranks = np.empty(len(gts), dtype=np.int64)
    for i, g in enumerate(gts):
        if not g or min(g) < 0 or max(g) >= scores.shape[1]:
            raise InputError(f"row {i}: invalid ground-truth index")
        idx = np.fromiter(g, dtype=np.int64)
        best = scores[i, idx].max()
        others = np.ones(scores.shape[1], dtype=bool)
        others[idx] = False
        ranks[i] = 1 + int((scores[i, others] >= best).sum())
    return ranks


def recall_at_k(scores, gt, k: int) -> float:
    """Percentage of text rows whose ground-truth video ranks within the top k (k capped at n_video)."""
    if k < 1:
        raise InputError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise InputError("scores must be finite")
    k = min(k, scores.shape[1])
    hits = int((gt_ranks(scores, gt) <= k).sum())
    return 100.0 * hits / scores.shape[0]


@dataclass
class RetrievalReport:
    r1: float
    r5: float
    r10: float
    avg_recall: float
    n_text: int
    n_video: int
    skipped: list = field(default_factory=list, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("skipped")
        return d


def retrieval_report(scores, gt) -> RetrievalReport:
    scores = np.asarray(scores)
    r1, r5, r10 = (recall_at_k(scores, gt, k) for k in (1, 5, 10))
    return RetrievalReport(r1, r5, r10, (r1 + r5 + r10) / 3.0, scores.shape[0], scores.shape[1])


def video_query_r1(scores, gt) -> float:
    """Per-video top-1 accuracy over the query set (each video's correct query is the row listing it).

    Used for tasks with few distinct queries (e.g. motion templates), where text-to-video R@1 over
    a handful of rows is too coarse. Ties count against the video.
    """
    scores = np.asarray(scores, dtype=np.float64)
    owner = np.full(scores.shape[1], -1)
    for i, g in enumerate(_gt_sets(gt)):
        for j in g:
            owner[j] = i
    cols = np.flatnonzero(owner >= 0)
    hits = 0
    for j in cols:
        col = scores[:, j]
        correct = col[owner[j]]
        hits += int((np.delete(col, owner[j]) < correct).all())
    return float(100.0 * hits / max(len(cols), 1))


# ---------------------------------------------------------------- scoring

def _frames_of(v) -> np.ndarray:
    return v.frames if isinstance(v, VideoExample) else np.asarray(v)


def encode_videos(model: VideoTextModel, videos: Sequence, t_test: int, chunk: int = 256) -> torch.Tensor:
    """(N, t_test, L_v, D) encodings of t_test uniformly sampled frames per video."""
    frames = []
    for v in videos:
        arr = _frames_of(v)
        frames.append(torch.as_tensor(arr[sample_inference_frames(arr.shape[0], t_test)]))
    flat = torch.stack(frames).flatten(0, 1)
    states = torch.cat([model.encode_frame(flat[i:i + chunk]).states for i in range(0, len(flat), chunk)])
    return states.reshape(len(videos), t_test, *states.shape[1:])


def _frame_list(states: torch.Tensor) -> list[EncodedSequence]:
    # (B, T, L, D) -> T encodings of (B, L, D)
    out = []
    for t in range(states.shape[1]):
        s = states[:, t]
        out.append(EncodedSequence(s, torch.ones(s.shape[:2], dtype=torch.bool), s[:, 0]))
    return out


def video_visuals(model: VideoTextModel, frame_states: torch.Tensor) -> EncodedSequence:
    """The K/V set each video presents to the multi-modal encoder under early fusion."""
    frames = _frame_list(frame_states)
    if model.temporal is not None:
        return temporal_visual(model, frames)
    return concat_frames(frames)


@torch.no_grad()
def score_matrices(model: VideoTextModel, tokenizer, texts: Sequence[str], videos: Sequence,
                   strategies: Iterable, t_test: int, pair_chunk: int = 1024) -> dict[str, np.ndarray]:
    """n_text x n_video match-logit matrices for several strategies; late-fusion ones share per-frame scores."""
    strategies = [EnsembleStrategy(s) for s in strategies]
    was_training = model.training
    model.eval()
    try:
        tokens = tokenizer.encode_batch(texts, model.cfg.max_text_len)
        text = model.encode_text(tokens)
        frame_states = encode_videos(model, videos, t_test)
        m, n = len(texts), len(videos)
        out: dict[str, np.ndarray] = {}
        if EnsembleStrategy.CONCAT in strategies:
            vis = video_visuals(model, frame_states)
            out["concat"] = _pair_scores(model, text, vis, m, n, pair_chunk)
        late = [s for s in strategies if s.is_late]
        if late:
            if model.temporal is not None:
                raise InputError("late fusion is not defined for the temporal model")
            per_frame = np.stack([
                _pair_scores(model, text, f, m, n, pair_chunk) for f in _frame_list(frame_states)
            ], axis=-1)
            for s in late:
                out[s.value] = aggregate_scores(per_frame, s.value)
        return out
    finally:
        model.train(was_training)


def _pair_scores(model, text: EncodedSequence, vis: EncodedSequence, m: int, n: int, chunk: int) -> np.ndarray:
    ti, vi = torch.meshgrid(torch.arange(m), torch.arange(n), indexing="ij")
    ti, vi = ti.reshape(-1), vi.reshape(-1)
    scores = []
    for s in range(0, len(ti), chunk):
        sl = slice(s, s + chunk)
        scores.append(model.multimodal_fuse(text.select(ti[sl]), vis.select(vi[sl])).match_logit)
    return torch.cat(scores).reshape(m, n).double().numpy()


def score_matrix(model, tokenizer, texts, videos, strategy, t_test: int) -> np.ndarray:
    strategy = EnsembleStrategy(strategy)
    return score_matrices(model, tokenizer, texts, videos, [strategy], t_test)[strategy.value]


# ---------------------------------------------------------------- protocols

def retrieval_queries(dataset: Sequence[VideoExample], paragraph_mode: bool = False):
    """Query texts and their ground-truth video sets.

    Each caption is a query; identical texts are merged into one query whose ground truth is
    every video carrying it. In paragraph mode a video's captions are joined by [SEP] into one
    query (truncated later to max_text_len). Videos without captions are skipped and reported.
    """
    queries: dict[str, set[int]] = {}
    skipped = []
    for j, ex in enumerate(dataset):
        caps = [c for c in ex.captions if c.strip()]
        if not caps:
            skipped.append({"video_id": ex.video_id, "reason": "no caption"})
            log.warning("skipping %s: no caption", ex.video_id)
            continue
        texts = [" [SEP] ".join(caps)] if paragraph_mode else caps
        for t in texts:
            queries.setdefault(t, set()).add(j)
    return list(queries), list(queries.values()), skipped


def evaluate_retrieval(model: VideoTextModel, tokenizer, dataset: Sequence[VideoExample],
                       strategy="concat", t_test: int = 4, paragraph_mode: bool = False) -> RetrievalReport:
    if len(dataset) < 2:
        raise InputError("retrieval needs at least 2 videos")
    texts, gt, skipped = retrieval_queries(dataset, paragraph_mode)
    report = retrieval_report(score_matrix(model, tokenizer, texts, dataset, strategy, t_test), gt)
    report.skipped = skipped
    return report


@torch.no_grad()
def predict_answers(model: VideoTextModel, tokenizer, dataset: Sequence[VideoExample], t_test: int = 4,
                    allowed_answers: Sequence[str] | None = None, max_len: int = 3) -> list[str]:
    """Generated answers, one per video.

    Free greedy decoding by default. With ``allowed_answers`` the output is the allowed answer
    the decoder assigns the highest likelihood (ties to the first listed).
    """
    was_training = model.training
    model.eval()
    try:
        questions = tokenizer.encode_batch([ex.captions[0] for ex in dataset], model.cfg.max_text_len)
        text = model.encode_text(questions)
        vis = video_visuals(model, encode_videos(model, dataset, t_test))
        fused = model.multimodal_fuse(text, vis)
        fused = EncodedSequence(fused.states, text.mask, fused.states[:, 0])
        if allowed_answers is not None:
            answers = list(allowed_answers)
            ll = answer_log_likelihoods(model, fused, tokenizer.encode_batch(answers, model.cfg.max_text_len))
            return [answers[argmax_first(row)] for row in ll.numpy()]
        ids = decode_answer(model, fused, max_len)
        return [tokenizer.decode(seq) for seq in ids]
    finally:
        model.train(was_training)


def qa_accuracy(predictions: Sequence[str], gold: Sequence[str]) -> float:
    """Exact-match accuracy (percentage) after whitespace normalisation."""
    if not gold:
        raise InputError("empty QA dataset")
    hits = sum(" ".join(p.split()) == " ".join(g.split()) for p, g in zip(predictions, gold))
    return 100.0 * hits / len(gold)


def evaluate_qa(model: VideoTextModel, tokenizer, dataset: Sequence[VideoExample], t_test: int = 4,
                allowed_answers: Sequence[str] | None = None) -> float:
    """Exact-match accuracy of generated answers; frames are early-fused."""
    if not dataset:
        raise InputError("empty QA dataset")
    preds = predict_answers(model, tokenizer, dataset, t_test, allowed_answers)
    return qa_accuracy(preds, [ex.meta["answer"] for ex in dataset])


def compare_ensembles(model: VideoTextModel, tokenizer, dataset: Sequence[VideoExample],
                      frame_counts: Sequence[int] = (1, 2, 4, 8), strategies: Sequence[str] = ("concat", "lse", "max", "mean"),
                      out_dir: str | Path | None = None, plot: bool = False) -> list[dict]:
    """Evaluate every (strategy, t_test) cell with the same weights.

    Writes ``ensemble_grid.json`` (and ``ensemble_grid.png`` with ``plot``) into ``out_dir`` if given.
    """
    texts, gt, _ = retrieval_queries(dataset)
    grid = []
    for t in frame_counts:
        mats = score_matrices(model, tokenizer, texts, dataset, strategies, t)
        for s in strategies:
            grid.append({"strategy": EnsembleStrategy(s).value, "t_test": int(t),
                         "report": retrieval_report(mats[EnsembleStrategy(s).value], gt).to_dict()})
    grid.sort(key=lambda c: (list(map(str, strategies)).index(c["strategy"]), c["t_test"]))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_json(grid, out_dir / "ensemble_grid.json")
        if plot:
            plot_grid(grid, out_dir / "ensemble_grid.png")
    return grid


def plot_grid(grid: list[dict], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for s in dict.fromkeys(c["strategy"] for c in grid):
        cells = sorted((c for c in grid if c["strategy"] == s), key=lambda c: c["t_test"])
        ax.plot([c["t_test"] for c in cells], [c["report"]["avg_recall"] for c in cells], marker="o", label=s)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("#frames at inference")
    ax.set_ylabel("avg recall")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
