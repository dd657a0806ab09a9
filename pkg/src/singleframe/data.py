"""Video datasets: synthetic corpora, augmentation, JSON-lines manifests and
Something-Something-v2 style template/label retrieval tasks."""
from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, ManifestError

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
JITTER = 0.05

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring", "stripe", "column")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
    "pink": (1.0, 0.5, 0.75),
    "lime": (0.5, 1.0, 0.0),
    "teal": (0.0, 0.5, 0.5),
    "navy": (0.0, 0.0, 0.5),
    "maroon": (0.5, 0.0, 0.0),
    "olive": (0.5, 0.5, 0.0),
    "gray": (0.5, 0.5, 0.5),
}
STATIC_SHAPES = ("square", "ring", "cross", "triangle")

PLACEHOLDER = "[something]"
MOTIONS = {
    "left_to_right": f"{PLACEHOLDER} moves left to right",
    "right_to_left": f"{PLACEHOLDER} moves right to left",
    "outward": f"{PLACEHOLDER} zigzags outward from the middle",
    "inward": f"{PLACEHOLDER} zigzags inward to the middle",
}


@dataclass
class VideoExample:
    video_id: str
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    captions: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise InputError(f"{self.video_id}: frames must be a non-empty (T, H, W, C) array")
        if not self.captions:
            raise InputError(f"{self.video_id}: at least one caption required")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def flip_safe(self) -> bool:
        return not self.meta.get("flip_unsafe", False)

    def __eq__(self, other):
        if not isinstance(other, VideoExample):
            return NotImplemented
        return (self.video_id == other.video_id and self.captions == other.captions
                and self.meta == other.meta and np.array_equal(self.frames, other.frames))


# ---------------------------------------------------------------- rendering

def _shape_mask(shape: str, cx: float, cy: float, r: float, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        # apex up, base down
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        w = 0.35 * r
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "stripe":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.35 * r)
    if shape == "column":
        return (np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape {shape!r}")


def render(shape: str, color: str, cx: float, cy: float, r: float, background: float) -> np.ndarray:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), background, dtype=np.float32)
    img[_shape_mask(shape, cx, cy, r)] = COLORS[color]
    return img


def _jittered(base: np.ndarray, rng: np.random.Generator, jitter: float = JITTER) -> np.ndarray:
    noise = rng.uniform(-jitter / 2, jitter / 2, size=base.shape).astype(np.float32)
    return np.clip(base + noise, 0.0, 1.0)


def _video_rng(seed: int, index: int) -> np.random.Generator:
    # per-video stream: results do not depend on generation order or worker count
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------- corpora

def generate_static_corpus(n_videos: int, frames_per_video: int, seed: int, prefix: str = "static",
                           n_captions: int = 1, shapes: Sequence[str] = STATIC_SHAPES,
                           colors: Sequence[str] = tuple(COLORS), radius=(7.0, 9.0)) -> list[VideoExample]:
    """Each video shows one (shape, colour) in every frame; any single frame identifies the caption.

    Combinations (shapes x colors, 64 by default) are walked in a seeded order, so n_videos <= 64
    yields distinct combinations;
    beyond that they repeat with different placement, size and jitter.
    """
    if n_videos < 2:
        raise InputError("need at least 2 videos")
    if frames_per_video < 1:
        raise InputError("need at least 1 frame per video")
    combos = [(s, c) for s in shapes for c in colors]
    order = np.random.default_rng([seed, 1 << 20]).permutation(len(combos))
    out = []
    for i in range(n_videos):
        shape, color = combos[order[i % len(combos)]]
        rng = _video_rng(seed, i)
        r = rng.uniform(*radius)
        cx, cy = rng.uniform(r + 2, IMAGE_SIZE - r - 2, size=2)
        base = render(shape, color, cx, cy, r, background=rng.uniform(0.0, 0.2))
        frames = np.stack([_jittered(base, rng) for _ in range(frames_per_video)])
        captions = [f"{color} {shape}", f"a {shape} that is {color}"][:n_captions]
        out.append(VideoExample(f"{prefix}_{i:05d}", frames, captions, {"shape": shape, "color": color}))
    return out


POSITION_WORDS = ("far left", "left", "right", "far right")
TRACK_RADIUS = (3.0, 3.5)


def track_positions(r: float, n: int) -> np.ndarray:
    """x-centres of ``n`` evenly spaced slots across the frame for an object of radius ``r``."""
    return np.linspace(r + 1.5, IMAGE_SIZE - r - 1.5, n)


def generate_position_corpus(n_videos: int, frames_per_video: int, seed: int, prefix: str = "position",
                             colors: Sequence[str] = tuple(COLORS)) -> list[VideoExample]:
    """Static videos of a small object in one of four horizontal slots, captioned with colour, shape
    and slot ("red ring on the far left").

    The slots and object sizes are those of the temporal corpus, so image-text training on this
    corpus teaches where an object is. Videos are flip-unsafe (a flip swaps left and right).
    """
    if n_videos < 2:
        raise InputError("need at least 2 videos")
    if frames_per_video < 1:
        raise InputError("need at least 1 frame per video")
    out = []
    for i in range(n_videos):
        rng = _video_rng(seed, i)
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = colors[int(rng.integers(len(colors)))]
        slot = i % len(POSITION_WORDS)
        r = rng.uniform(*TRACK_RADIUS)
        cx = track_positions(r, len(POSITION_WORDS))[slot]
        cy = rng.uniform(r + 2, IMAGE_SIZE - r - 2)
        base = render(shape, color, cx, cy, r, background=rng.uniform(0.0, 0.2))
        frames = np.stack([_jittered(base, rng) for _ in range(frames_per_video)])
        where = POSITION_WORDS[slot]
        meta = {"shape": shape, "color": color, "position": where, "flip_unsafe": True}
        out.append(VideoExample(f"{prefix}_{i:05d}", frames, [f"{color} {shape} on the {where}"], meta))
    return out


def motion_order(motion: str, num_frames: int) -> list[int]:
    """Order in which the track positions 0..T-1 (left to right) are visited."""
    if motion == "left_to_right":
        return list(range(num_frames))
    if motion == "right_to_left":
        return list(range(num_frames))[::-1]
    mid = (num_frames - 1) / 2
    outward = sorted(range(num_frames), key=lambda k: (abs(k - mid), k))
    if motion == "outward":
        return outward
    if motion == "inward":
        return outward[::-1]
    raise ValueError(f"unknown motion {motion!r}")


def fill_template(template: str, obj: str) -> str:
    return template.replace(PLACEHOLDER, obj)


def generate_temporal_corpus(n_videos: int, frames_per_video: int, seed: int, prefix: str = "temporal",
                             motions: Sequence[str] = tuple(MOTIONS), captions: str = "template") -> list[VideoExample]:
    """Videos of one object visiting T horizontal track positions in a motion-specific order.

    Consecutive groups of ``len(motions)`` videos show the same object with the same frames,
    only reordered, so an unordered frame set never identifies the motion. Opposite motions
    are exact frame reversals of each other. Videos are marked flip-unsafe.

    ``captions`` selects the caption list: "template" (object masked), "label" (object filled
    in) or "both".
    """
    if captions not in ("template", "label", "both"):
        raise InputError(f"captions must be template, label or both, got {captions!r}")
    if n_videos < 2:
        raise InputError("need at least 2 videos")
    if frames_per_video < 2:
        raise InputError("temporal order needs at least 2 frames per video")
    orders = {m: motion_order(m, frames_per_video) for m in motions}
    if len({tuple(o) for o in orders.values()}) != len(orders):
        raise InputError(f"{frames_per_video} frames cannot distinguish motions {list(motions)}")
    combos = [(s, c) for s in SHAPES for c in COLORS]
    out = []
    k = len(motions)
    for g in range(math.ceil(n_videos / k)):
        rng = _video_rng(seed, g)
        shape, color = combos[int(rng.integers(len(combos)))]
        r = rng.uniform(*TRACK_RADIUS)
        cy = rng.uniform(r + 2, IMAGE_SIZE - r - 2)
        bg = rng.uniform(0.0, 0.2)
        xs = track_positions(r, frames_per_video)
        track = np.stack([_jittered(render(shape, color, x, cy, r, bg), rng) for x in xs])
        obj = f"{color} {shape}"
        for j, m in enumerate(motions):
            i = g * k + j
            if i >= n_videos:
                break
            template = MOTIONS[m]
            label = fill_template(template, obj)
            meta = {"template": template, "label": label, "motion": m,
                    "object": obj, "group": g, "flip_unsafe": True}
            caps = {"template": [template], "label": [label], "both": [template, label]}[captions]
            out.append(VideoExample(f"{prefix}_{i:05d}", track[orders[m]].copy(), caps, meta))
    return out


def generate_qa_corpus(n_videos: int, frames_per_video: int, seed: int, prefix: str = "qa",
                       answers: Sequence[str] = ("red", "green", "blue", "yellow")) -> list[VideoExample]:
    """Colour questions with a balanced answer set; captions hold the question, meta the answer."""
    out = []
    for i in range(n_videos):
        rng = _video_rng(seed, i)
        color = answers[i % len(answers)]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        r = rng.uniform(4.0, 7.0)
        cx, cy = rng.uniform(r + 2, IMAGE_SIZE - r - 2, size=2)
        base = render(shape, color, cx, cy, r, background=rng.uniform(0.0, 0.2))
        frames = np.stack([_jittered(base, rng) for _ in range(frames_per_video)])
        out.append(VideoExample(f"{prefix}_{i:05d}", frames, ["what color is the object"],
                                {"answer": color, "shape": shape}))
    return out


def corpus_vocabulary() -> list[str]:
    """Every word the generators can emit, so one tokenizer serves all corpora."""
    words = set(SHAPES) | set(COLORS) | {"a", "that", "is", "what", "color", "the", "object", "on"}
    for p in POSITION_WORDS:
        words |= set(p.split())
    for t in MOTIONS.values():
        words |= set(t.split())
    return sorted(words)


# ---------------------------------------------------------------- augmentation

def augment_frames(frames: torch.Tensor, rng: np.random.Generator, flip_allowed: bool = True,
                   scale=(0.7, 1.0)) -> torch.Tensor:
    """Random resized crop (square, area fraction in ``scale``) and horizontal flip.

    ``frames`` is (T, H, W, C); every frame of one video gets the same crop and flip.
    Flip is skipped when ``flip_allowed`` is False (direction-defined videos).
    """
    t, h, w, c = frames.shape
    side = int(round(h * math.sqrt(rng.uniform(*scale))))
    side = max(1, min(side, h, w))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    flip = bool(rng.random() < 0.5)
    x = frames[:, top:top + side, left:left + side, :].permute(0, 3, 1, 2)
    if side != h or side != w:
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    if flip and flip_allowed:
        x = x.flip(-1)
    return x.permute(0, 2, 3, 1).contiguous()


# ---------------------------------------------------------------- manifests

def write_manifest(dataset: Iterable[VideoExample], path: str | os.PathLike, frames_subdir: str = "frames") -> Path:
    """Write a JSON-lines manifest; frames go to ``<manifest dir>/<frames_subdir>/<video_id>.npy``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / frames_subdir).mkdir(exist_ok=True)
    with open(path, "w") as f:
        for ex in dataset:
            rel = f"{frames_subdir}/{ex.video_id}.npy"
            np.save(path.parent / rel, ex.frames)
            row = {"video_id": ex.video_id, "frames": rel, "captions": list(ex.captions)}
            if ex.meta:
                row["meta"] = ex.meta
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def _validate_row(row, lineno: int) -> None:
    if not isinstance(row, dict):
        raise ManifestError("row must be a JSON object", lineno)
    for key in ("video_id", "frames", "captions"):
        if key not in row:
            raise ManifestError(f"missing field {key!r}", lineno)
    if not isinstance(row["video_id"], str) or not row["video_id"]:
        raise ManifestError("video_id must be a non-empty string", lineno)
    caps = row["captions"]
    if not isinstance(caps, list) or not caps or not all(isinstance(c, str) and c for c in caps):
        raise ManifestError("captions must be a non-empty list of strings", lineno)
    if not isinstance(row["frames"], (str, list)):
        raise ManifestError("frames must be a path or an inline nested list", lineno)
    if "meta" in row and not isinstance(row["meta"], dict):
        raise ManifestError("meta must be an object", lineno)
    extra = set(row) - {"video_id", "frames", "captions", "meta"}
    if extra:
        raise ManifestError(f"unknown fields {sorted(extra)}", lineno)


def load_manifest(path: str | os.PathLike, load_frames: bool = True) -> list[VideoExample]:
    """Load and validate a JSON-lines manifest. Errors name the offending line or frame path.

    With ``load_frames=False`` path-referenced frames are not read; a 1-frame placeholder is used.
    """
    path = Path(path)
    out, seen = [], set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON: {e.msg}", lineno) from None
            _validate_row(row, lineno)
            vid = row["video_id"]
            if vid in seen:
                raise ManifestError(f"duplicate video_id {vid!r}", lineno)
            seen.add(vid)
            frames = row["frames"]
            if isinstance(frames, str):
                fpath = path.parent / frames
                if load_frames:
                    if not fpath.exists():
                        raise ManifestError(f"missing frame file {fpath}", lineno)
                    arr = np.load(fpath)
                else:
                    arr = np.zeros((1, 1, 1, 1), dtype=np.float32)
            else:
                arr = np.asarray(frames, dtype=np.float32)
            if arr.ndim != 4 or arr.shape[0] < 1:
                raise ManifestError("frames must form a non-empty (T, H, W, C) array", lineno)
            out.append(VideoExample(vid, arr, row["captions"], row.get("meta", {})))
    return out


# ---------------------------------------------------------------- SSv2-style tasks

_PLACEHOLDER_RE = re.compile(r"\[[^\]]+\]")
SSV2_FIXTURE = Path(__file__).parent / "fixtures" / "ssv2_fixture.json"


@dataclass(frozen=True)
class SSv2Annotation:
    id: str
    template: str
    label: str
    split: str
    placeholders: tuple = ()


def _label_matches(template: str, label: str, placeholders: Sequence[str]) -> bool:
    if placeholders:
        parts = _PLACEHOLDER_RE.split(template)
        if len(parts) - 1 != len(placeholders):
            return False
        filled = parts[0] + "".join(p + rest for p, rest in zip(placeholders, parts[1:]))
        return filled.lower() == label.lower()
    pattern = ".+".join(re.escape(p) for p in _PLACEHOLDER_RE.split(template))
    return re.fullmatch(pattern, label, flags=re.IGNORECASE) is not None


def parse_ssv2_annotations(records: Iterable[dict], split: str | None = None):
    """Validate annotation records (public SSv2 schema: id, template, label, placeholders).

    ``split`` fills in records that carry no ``split`` field. Returns (accepted, rejected) where
    rejected is a list of {"index", "id", "reason"} diagnostics.
    """
    accepted, rejected = [], []
    for i, rec in enumerate(records):
        rid = rec.get("id") if isinstance(rec, dict) else None
        try:
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            for key in ("id", "template", "label"):
                if not isinstance(rec.get(key), str) or not rec[key]:
                    raise ValueError(f"missing or empty field {key!r}")
            s = rec.get("split", split)
            if s not in ("train", "validation"):
                raise ValueError(f"split must be 'train' or 'validation', got {s!r}")
            ph = tuple(rec.get("placeholders") or ())
            if not _PLACEHOLDER_RE.search(rec["template"]):
                raise ValueError("template has no placeholder")
            if not _label_matches(rec["template"], rec["label"], ph):
                raise ValueError("label does not match template with placeholders filled")
            accepted.append(SSv2Annotation(str(rec["id"]), rec["template"], rec["label"], s, ph))
        except ValueError as e:
            rejected.append({"index": i, "id": rid, "reason": str(e)})
            log.warning("rejected annotation %s: %s", rid, e)
    return accepted, rejected


@dataclass
class SSv2Tasks:
    template_task: dict  # split -> list of manifest rows
    label_task: dict
    rejected: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def _row(a: SSv2Annotation, text: str) -> dict:
    return {"video_id": a.id, "captions": [text], "meta": {"template": a.template, "label": a.label}}


def load_ssv2_records(path: str | os.PathLike) -> list[dict]:
    """Annotation records from a JSON list, or from an object mapping split name to a list.

    Records from the mapping form get their ``split`` from the key.
    """
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        return [dict(r, split=r.get("split", name)) if isinstance(r, dict) else r
                for name, rows in data.items() for r in rows]
    if not isinstance(data, list):
        raise InputError(f"{path}: expected a JSON list or an object of split lists")
    return data


def distinct_queries(rows: Iterable[dict]) -> list[str]:
    """Query texts of a task split, deduplicated in first-appearance order."""
    return list(dict.fromkeys(r["captions"][0] for r in rows))


def build_ssv2_tasks(annotations, per_template: int = 12, seed: int = 0) -> SSv2Tasks:
    """Template and label retrieval tasks over one shared test set.

    The test set takes ``per_template`` seeded-sampled validation videos per template (all of
    them, with a warning, when fewer exist). Training annotations pass through unchanged.
    ``annotations`` may be SSv2Annotation objects or raw dict records.
    """
    annotations = list(annotations)
    rejected: list = []
    if annotations and isinstance(annotations[0], dict):
        annotations, rejected = parse_ssv2_annotations(annotations)
    by_template: dict[str, list[SSv2Annotation]] = {}
    for a in annotations:
        if a.split == "validation":
            by_template.setdefault(a.template, []).append(a)
    rng = np.random.default_rng(seed)
    warnings, test = [], []
    for template, items in by_template.items():
        items = sorted(items, key=lambda a: a.id)
        if len(items) < per_template:
            msg = f"template {template!r} has only {len(items)} validation videos (< {per_template}); using all"
            warnings.append(msg)
            log.warning(msg)
            chosen = items
        else:
            idx = np.sort(rng.choice(len(items), size=per_template, replace=False))
            chosen = [items[i] for i in idx]
        test.extend(chosen)
    train = [a for a in annotations if a.split == "train"]
    return SSv2Tasks(
        template_task={"train": [_row(a, a.template) for a in train], "test": [_row(a, a.template) for a in test]},
        label_task={"train": [_row(a, a.label) for a in train], "test": [_row(a, a.label) for a in test]},
        rejected=rejected,
        warnings=warnings,
    )


def write_ssv2_tasks(tasks: SSv2Tasks, out_dir: str | os.PathLike, frames_dir: str | os.PathLike | None = None) -> list[Path]:
    """Write ``{out_dir}/{task_name}/{split}.jsonl``; frames are referenced relative to each file."""
    out_dir = Path(out_dir)
    written = []
    for name, task in (("ssv2_template", tasks.template_task), ("ssv2_label", tasks.label_task)):
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        for split, rows in task.items():
            p = d / f"{split}.jsonl"
            with open(p, "w") as f:
                for r in rows:
                    src = Path(frames_dir) / f"{r['video_id']}.npy" if frames_dir else d / "frames" / f"{r['video_id']}.npy"
                    r = dict(r, frames=os.path.relpath(src, d))
                    f.write(json.dumps(r, sort_keys=True) + "\n")
            written.append(p)
    return written


def corpus_annotations(dataset: Iterable[VideoExample], split: str) -> list[SSv2Annotation]:
    """SSv2-style annotations for a generated temporal corpus."""
    out = []
    for ex in dataset:
        obj = ex.meta["object"]
        out.append(SSv2Annotation(ex.video_id, ex.meta["template"], ex.meta["label"], split, (obj,)))
    return out


def materialize(rows: Iterable[dict], videos: dict[str, VideoExample]) -> list[VideoExample]:
    """Attach frames (looked up by video id) to task rows."""
    out = []
    for r in rows:
        src = videos[r["video_id"]]
        meta = dict(src.meta, **r.get("meta", {}))
        out.append(VideoExample(r["video_id"], src.frames, list(r["captions"]), meta))
    return out
