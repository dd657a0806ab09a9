"""AdamW training loop with linear warmup and cosine decay."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import save_checkpoint
from .data import VideoExample, augment_frames
from .errors import ConfigError, InputError
from .fusion import sample_train_clip, sample_train_frame
from .model import EncodedSequence, VideoTextModel, concat_frames
from .objectives import apply_mlm_masking, mlm_loss, vtc_loss, vtm_loss
from .qa import qa_loss
from .records import dumps
from .temporal import temporal_visual
from .tokenizer import TokenSequence, WordTokenizer

log = logging.getLogger(__name__)

OBJECTIVES = {"vtc", "mlm", "vtm", "qa", "retrieval-finetune"}
STREAMS = ("order", "frames", "augment", "masking", "negatives", "captions")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    peak_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_steps: int = 0
    total_steps: int = 1000
    weight_decay: float = 0.02
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.min_lr > self.peak_lr:
            raise ConfigError("min_lr must not exceed peak_lr")


def lr_at_step(step: int, sched: ScheduleConfig) -> float:
    """Linear ramp 0 -> peak over the warmup, then cosine decay to min_lr at total_steps."""
    if step > sched.total_steps:
        return sched.min_lr
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if sched.total_steps == sched.warmup_steps:
        return sched.peak_lr
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.min_lr + 0.5 * (sched.peak_lr - sched.min_lr) * (1.0 + math.cos(math.pi * progress))


def derive_seeds(seed: int) -> dict[str, int]:
    """Independent per-concern seeds (plus ``init``) from one root seed."""
    names = ("init",) + STREAMS
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def build_optimizer(model: nn.Module, sched: ScheduleConfig,
                    lr_scales: Mapping[str, float] | None = None) -> torch.optim.AdamW:
    """AdamW with decoupled decay; layer norms, biases and the temperature are not decayed.

    ``lr_scales`` maps parameter names to learning-rate multipliers; each such parameter gets its
    own group with an ``lr_scale`` entry that the training loop applies on top of the schedule.
    """
    lr_scales = dict(lr_scales or {})
    names = {n for n, _ in model.named_parameters()}
    unknown = set(lr_scales) - names
    if unknown:
        raise ConfigError(f"lr_scales names unknown parameters: {sorted(unknown)}")
    no_decay = set()
    for m in model.modules():
        if isinstance(m, nn.LayerNorm):
            no_decay.update(id(p) for p in m.parameters(recurse=False))
    decay, plain, scaled = [], [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        wd = 0.0 if id(p) in no_decay or name.endswith("bias") or name == "log_tau" else sched.weight_decay
        if name in lr_scales:
            scaled.append({"params": [p], "weight_decay": wd, "lr_scale": float(lr_scales[name])})
        elif wd:
            decay.append(p)
        else:
            plain.append(p)
    groups = [{"params": decay, "weight_decay": sched.weight_decay}, {"params": plain, "weight_decay": 0.0}] + scaled
    opt = torch.optim.AdamW(groups, lr=lr_at_step(0, sched), betas=sched.betas)
    for g in opt.param_groups:
        g["lr"] = lr_at_step(0, sched) * g.get("lr_scale", 1.0)
    return opt


def positive_pairs(texts: Sequence[str], video_ids: Sequence[str]) -> torch.Tensor:
    """n x n mask of in-batch pairs that must not act as negatives (same caption text or same video)."""
    t = np.asarray(texts, dtype=object)
    v = np.asarray(video_ids, dtype=object)
    return torch.as_tensor((t[:, None] == t[None, :]) | (v[:, None] == v[None, :]))


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


class BatchBuilder:
    """Frame sampling, augmentation and caption choice, each on its own RNG stream."""

    def __init__(self, seeds: dict[str, int], frames_per_step: int, augment: bool):
        self.frames_rng = np.random.default_rng(seeds["frames"])
        self.aug_rng = np.random.default_rng(seeds["augment"])
        self.cap_rng = np.random.default_rng(seeds["captions"])
        self.frames_per_step = frames_per_step
        self.augment = augment

    def clip(self, ex: VideoExample) -> torch.Tensor:
        if self.frames_per_step == 1:
            idx = [sample_train_frame(ex.num_frames, self.frames_rng)]
        else:
            idx = sample_train_clip(ex.num_frames, self.frames_per_step, self.frames_rng)
        frames = torch.from_numpy(ex.frames[idx])
        if self.augment:
            frames = augment_frames(frames, self.aug_rng, flip_allowed=ex.flip_safe)
        return frames

    def caption(self, ex: VideoExample) -> str:
        if len(ex.captions) == 1:
            return ex.captions[0]
        return ex.captions[int(self.cap_rng.integers(len(ex.captions)))]


def encode_visual(model: VideoTextModel, clips: torch.Tensor) -> EncodedSequence:
    """clips: (B, T, H, W, C). One frame -> its encoding; several -> temporal encoder or concatenation."""
    b, t = clips.shape[:2]
    enc = model.encode_frame(clips.flatten(0, 1))
    if t == 1:
        return enc
    states = enc.states.reshape(b, t, *enc.states.shape[1:])
    frames = [EncodedSequence(states[:, i], torch.ones(states.shape[0], states.shape[2], dtype=torch.bool), states[:, i, 0])
              for i in range(t)]
    if model.temporal is not None:
        return temporal_visual(model, frames)
    return concat_frames(frames)


def compute_losses(model: VideoTextModel, tokenizer: WordTokenizer, batch: Sequence[VideoExample],
                   clips: torch.Tensor, captions: Sequence[str], objectives: set[str],
                   mask_rng: np.random.Generator, neg_rng: np.random.Generator) -> dict[str, torch.Tensor]:
    cfg = model.cfg
    active = set(objectives)
    if "retrieval-finetune" in active:
        active |= {"vtc", "vtm"}
    visual = encode_visual(model, clips)
    tokens = tokenizer.encode_batch(captions, cfg.max_text_len)
    losses: dict[str, torch.Tensor] = {}
    if active & {"vtc", "vtm"}:
        text = model.encode_text(tokens)
        pos = positive_pairs(captions, [ex.video_id for ex in batch])
        has_dupes = bool(pos.sum() > len(batch))
        v = model.project_pool(visual, "vision")
        t = model.project_pool(text, "text")
        if "vtc" in active:
            losses["vtc"] = vtc_loss(v, t, model.temperature, "mean", pos if has_dupes else None)
        if "vtm" in active:
            sim = (v @ t.T).detach()
            losses["vtm"] = vtm_loss(model, text, visual, sim, neg_rng, pos if has_dupes else None)
    if "mlm" in active:
        masked = apply_mlm_masking(tokens.ids, tokens.mask, cfg.mlm_mask_ratio, mask_rng, cfg.vocab_size)
        mtext = model.encode_text(TokenSequence(masked.input_ids, tokens.mask))
        fused = model.multimodal_fuse(mtext, visual)
        losses["mlm"] = mlm_loss(model.mlm_logits(fused.states), masked.labels)
    if "qa" in active:
        answers = tokenizer.encode_batch([ex.meta["answer"] for ex in batch], cfg.max_text_len)
        question = model.encode_text(tokens)
        fused = model.multimodal_fuse(question, visual)
        losses["qa"] = qa_loss(model, EncodedSequence(fused.states, question.mask, fused.states[:, 0]), answers)
    return losses


def _fill_missing_grads(model: nn.Module) -> None:
    # AdamW skips params with grad None; a zero grad keeps the decoupled decay running
    for p in model.parameters():
        if p.requires_grad and p.grad is None:
            p.grad = torch.zeros_like(p)


def run_training(model: VideoTextModel, tokenizer: WordTokenizer, dataset: Sequence[VideoExample],
                 objectives: Sequence[str], sched: ScheduleConfig, seed: int, frames_per_step: int = 1,
                 batch_size: int = 32, epochs: int = 1, run_dir: str | Path | None = None,
                 augment: bool = True, grad_clip: float = 1.0, checkpoint_every: int = 1,
                 on_epoch_end: Callable[[int, VideoTextModel], None] | None = None,
                 lr_scales: Mapping[str, float] | None = None) -> TrainResult:
    """Train ``model`` in place.

    Every step draws ``frames_per_step`` frames per video (one frame = single-frame training),
    evaluates the active objectives, and takes one AdamW step at ``lr_at_step``. Loss records go
    to ``{run_dir}/metrics.jsonl`` and checkpoints to ``{run_dir}/ckpt_ep{N}`` every
    ``checkpoint_every`` epochs and after the last one (0 disables checkpoints).
    ``on_epoch_end(epoch, model)`` runs after each epoch, e.g. for held-out evaluation.
    ``lr_scales`` multiplies the scheduled learning rate of the named parameters.
    """
    objectives = set(objectives)
    if not objectives or not objectives <= OBJECTIVES:
        raise ConfigError(f"objectives must be a non-empty subset of {sorted(OBJECTIVES)}")
    if not dataset:
        raise InputError("empty training set")
    if len(dataset) < 2 and objectives & {"vtm", "retrieval-finetune"}:
        raise InputError("VTM needs at least 2 training videos")
    seeds = derive_seeds(seed)
    order_rng = np.random.default_rng(seeds["order"])
    mask_rng = np.random.default_rng(seeds["masking"])
    neg_rng = np.random.default_rng(seeds["negatives"])
    builder = BatchBuilder(seeds, frames_per_step, augment)

    bs = min(batch_size, len(dataset))
    per_epoch = len(dataset) // bs
    opt = build_optimizer(model, sched, lr_scales)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "metrics.jsonl", "w")
    result = TrainResult()
    model.train()
    step = 0
    try:
        for epoch in range(1, epochs + 1):
            perm = order_rng.permutation(len(dataset))
            for b in range(per_epoch):
                batch = [dataset[i] for i in perm[b * bs:(b + 1) * bs]]
                clips = torch.stack([builder.clip(ex) for ex in batch]).to(model.dtype)
                captions = [builder.caption(ex) for ex in batch]
                lr = lr_at_step(step, sched)
                for g in opt.param_groups:
                    g["lr"] = lr * g.get("lr_scale", 1.0)
                losses = compute_losses(model, tokenizer, batch, clips, captions, objectives, mask_rng, neg_rng)
                total = sum(losses.values())
                record = {"step": step, "epoch": epoch, "lr": lr, "loss_total": float(total.detach())}
                record.update({f"loss_{k}": float(v.detach()) for k, v in sorted(losses.items())})
                if not math.isfinite(record["loss_total"]):
                    record["error"] = "non-finite loss"
                    result.records.append(record)
                    if log_file:
                        log_file.write(dumps(record, indent=None) + "\n")
                    raise TrainingDiverged(f"non-finite loss at step {step}: {record}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                _fill_missing_grads(model)
                if grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
                opt.step()
                result.records.append(record)
                if log_file:
                    log_file.write(dumps(record, indent=None) + "\n")
                step += 1
            if run_dir is not None and checkpoint_every and (epoch % checkpoint_every == 0 or epoch == epochs):
                path = save_checkpoint(model, run_dir / f"ckpt_ep{epoch}", tokenizer,
                                       {"epoch": epoch, "step": step, "seed": seed, "schedule": asdict(sched)})
                result.checkpoints.append(path)
            if on_epoch_end is not None:
                on_epoch_end(epoch, model)
                model.train()
    finally:
        if log_file:
            log_file.close()
    return result


def steps_for(n_videos: int, batch_size: int, epochs: int) -> int:
    bs = min(batch_size, n_videos)
    return epochs * (n_videos // bs)
