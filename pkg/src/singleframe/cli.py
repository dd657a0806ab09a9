"""Command-line entry point: ``singleframe <subcommand> [flags]``.

Every run writes ``run_meta.json`` plus its metrics as fixed-precision JSON under ``--out``.
Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .data import (SSV2_FIXTURE, build_ssv2_tasks, corpus_vocabulary, distinct_queries, generate_position_corpus,
                   generate_qa_corpus, generate_static_corpus, generate_temporal_corpus, load_manifest, load_ssv2_records,
                   write_manifest, write_ssv2_tasks)
from .errors import ConfigError, InputError
from .evaluation import (compare_ensembles, evaluate_qa, evaluate_retrieval, retrieval_queries, score_matrices,
                         video_query_r1)
from .fusion import EnsembleStrategy
from .gradcheck import gradcheck_suite
from .model import VideoTextModel
from .qa import attach_decoder
from .records import write_json
from .temporal import attach_temporal
from .tokenizer import WordTokenizer
from .training import ScheduleConfig, TrainingDiverged, derive_seeds, run_training, steps_for

log = logging.getLogger("singleframe")

COMMANDS = ("gen-static", "gen-temporal", "build-ssv2", "pretrain", "finetune", "train-temporal",
            "eval-retrieval", "eval-qa", "compare-ensembles", "gradcheck")

_MODEL_DEFAULTS = {f.name: f.default for f in fields(ModelConfig) if f.name != "vocab_size"}

DEFAULTS = {
    "seed": 0,
    "model": _MODEL_DEFAULTS,
    "data": {
        "corpus": "static",
        "n_train": 512,
        "n_test": 64,
        "frames": 8,
        "train_manifest": None,
        "test_manifest": None,
        "temporal_train_captions": "template",
    },
    "train": {
        "objectives": ["vtc", "mlm", "vtm"],
        "epochs": 150,
        "batch_size": 32,
        "peak_lr": 1e-3,
        "min_lr": 1e-5,
        "warmup_frac": 0.1,
        "weight_decay": 0.02,
        "augment": True,
        "grad_clip": 1.0,
        "checkpoint_every": 50,
    },
    "finetune": {
        "objectives": ["retrieval-finetune"],
        "epochs": 20,
        "peak_lr": 2e-4,
        "min_lr": 2e-6,
    },
    "temporal": {
        "stage1_corpus": "position",
        "stage1_videos": 512,
        "stage1_epochs": 80,
        "stage2_videos": 2048,
        "stage2_epochs": 12,
        "stage2_lr": 1e-3,
        "stage2_min_lr": 1e-5,
        "frames_per_step": 4,
        "init_std": 0.15,
        "pos_table_lr_scale": 10.0,
    },
    "eval": {
        "t_test": 4,
        "strategy": "concat",
        "frame_counts": [1, 2, 4, 8],
        "strategies": ["concat", "lse", "max", "mean"],
        "paragraph_mode": False,
        "allowed_answers": None,
        "plot": True,
    },
    "ssv2": {"input": None, "per_template": 12},
    "gradcheck": {"step": 1e-5, "tolerance": 1e-4, "max_entries": None},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be an object")
            out[k] = merge_config(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"--config: no such file {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"--config: {path} is not valid JSON ({e})") from None
        if not isinstance(user, dict):
            raise ConfigError("--config must hold a JSON object")
        cfg = merge_config(cfg, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.t_test is not None:
        cfg["eval"]["t_test"] = args.t_test
        cfg["eval"]["frame_counts"] = [args.t_test]
    if args.strategy is not None:
        cfg["eval"]["strategy"] = args.strategy
    if getattr(args, "input", None):
        cfg["ssv2"]["input"] = args.input
    if getattr(args, "data", None):
        d = Path(args.data)
        cfg["data"]["train_manifest"] = str(d / "train.jsonl")
        cfg["data"]["test_manifest"] = str(d / "test.jsonl")
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg["data"]["corpus"] not in ("static", "temporal", "qa"):
        raise ConfigError("data.corpus must be static, temporal or qa")
    for k in ("n_train", "n_test", "frames"):
        if not isinstance(cfg["data"][k], int) or cfg["data"][k] < 1:
            raise ConfigError(f"data.{k} must be a positive integer")
    if cfg["eval"]["t_test"] < 1 or any(t < 1 for t in cfg["eval"]["frame_counts"]):
        raise ConfigError("t_test values must be >= 1")
    try:
        EnsembleStrategy(cfg["eval"]["strategy"])
        [EnsembleStrategy(s) for s in cfg["eval"]["strategies"]]
    except ValueError:
        raise ConfigError(f"strategies must be among {[s.value for s in EnsembleStrategy]}") from None
    tp = cfg["temporal"]
    if tp["stage1_corpus"] not in ("position", "train"):
        raise ConfigError("temporal.stage1_corpus must be position or train")
    for k in ("stage1_videos", "stage2_videos", "frames_per_step"):
        if not isinstance(tp[k], int) or tp[k] < 1:
            raise ConfigError(f"temporal.{k} must be a positive integer")
    if tp["init_std"] <= 0 or tp["pos_table_lr_scale"] <= 0:
        raise ConfigError("temporal.init_std and temporal.pos_table_lr_scale must be positive")


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig.from_dict(dict(cfg["model"], vocab_size=vocab_size))


def schedule(section: dict, total: int, weight_decay: float, warmup_frac: float) -> ScheduleConfig:
    return ScheduleConfig(peak_lr=section["peak_lr"], min_lr=section["min_lr"], warmup_steps=int(total * warmup_frac),
                          total_steps=max(total, 1), weight_decay=weight_decay)


# ---------------------------------------------------------------- datasets

def _data_seed(seed: int, split: str) -> int:
    return int(np.random.SeedSequence([seed, ("train", "test", "stage1").index(split)]).generate_state(1)[0])


def dataset(cfg: dict, split: str):
    manifest = cfg["data"][f"{split}_manifest"]
    if manifest:
        return load_manifest(manifest)
    d, seed = cfg["data"], _data_seed(cfg["seed"], split)
    n = d["n_train"] if split == "train" else d["n_test"]
    if d["corpus"] == "static":
        return generate_static_corpus(n, d["frames"], seed, prefix=f"static_{split}")
    if d["corpus"] == "temporal":
        captions = d["temporal_train_captions"] if split == "train" else "template"
        return generate_temporal_corpus(n, d["frames"], seed, prefix=f"temporal_{split}", captions=captions)
    return generate_qa_corpus(n, d["frames"], seed, prefix=f"qa_{split}")


def _require_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise UsageError(f"{args.command} requires --checkpoint")
    p = Path(args.checkpoint)
    if not p.is_file():
        raise ConfigError(f"--checkpoint: no such file {p}")
    return p


def _load(args):
    model, tok, meta = load_checkpoint(_require_checkpoint(args))
    if tok is None:
        raise ConfigError(f"checkpoint {args.checkpoint} carries no vocabulary")
    return model, tok, meta


# ---------------------------------------------------------------- commands

def cmd_gen(cfg, out: Path, corpus: str) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg["data"]["corpus"] = corpus
    cfg["data"]["train_manifest"] = cfg["data"]["test_manifest"] = None
    summary = {}
    for split in ("train", "test"):
        ds = dataset(cfg, split)
        write_manifest(ds, out / f"{split}.jsonl")
        summary[split] = {"videos": len(ds), "queries": len({c for ex in ds for c in ex.captions})}
    return summary


def cmd_build_ssv2(cfg, out: Path) -> dict:
    src = cfg["ssv2"]["input"] or SSV2_FIXTURE
    tasks = build_ssv2_tasks(load_ssv2_records(src), cfg["ssv2"]["per_template"], cfg["seed"])
    write_ssv2_tasks(tasks, out)
    counts = {}
    for name, task in (("ssv2_template", tasks.template_task), ("ssv2_label", tasks.label_task)):
        counts[name] = {split: {"videos": len(rows), "queries": len(distinct_queries(rows))} for split, rows in task.items()}
    return {"input": cfg["ssv2"]["input"] or "bundled fixture", "counts": counts, "rejected": tasks.rejected, "warnings": tasks.warnings}


def _train(model, tok, train, objectives, section, tr, seed, out, frames_per_step=1, tag="train", lr_scales=None):
    total = steps_for(len(train), tr["batch_size"], section["epochs"])
    sched = schedule(section, total, tr["weight_decay"], tr["warmup_frac"])
    result = run_training(model, tok, train, objectives, sched, seed, frames_per_step=frames_per_step,
                          batch_size=tr["batch_size"], epochs=section["epochs"], run_dir=out / tag,
                          augment=tr["augment"], grad_clip=tr["grad_clip"], checkpoint_every=tr["checkpoint_every"],
                          lr_scales=lr_scales)
    last = result.records[-1] if result.records else {}
    return {"steps": len(result.records), "final": last, "checkpoints": [str(p.relative_to(out)) for p in result.checkpoints]}


def _retrieval_metrics(model, tok, test, cfg) -> dict:
    ev = cfg["eval"]
    report = evaluate_retrieval(model, tok, test, ev["strategy"], ev["t_test"], ev["paragraph_mode"])
    return {"strategy": ev["strategy"], "t_test": ev["t_test"], **report.to_dict(), "skipped": report.skipped}


def cmd_pretrain(cfg, out: Path) -> dict:
    train, test = dataset(cfg, "train"), dataset(cfg, "test")
    tok = WordTokenizer(corpus_vocabulary())
    model = VideoTextModel(model_config(cfg, tok.vocab_size), seed=derive_seeds(cfg["seed"])["init"])
    if "qa" in cfg["train"]["objectives"]:
        attach_decoder(model)
    tr = cfg["train"]
    summary = _train(model, tok, train, tr["objectives"], tr, tr, cfg["seed"], out)
    save_checkpoint(model, out / "model.ckpt", tok, {"command": "pretrain", "seed": cfg["seed"]})
    summary["eval"] = _retrieval_metrics(model, tok, test, cfg) if cfg["data"]["corpus"] != "qa" else None
    return summary


def cmd_finetune(cfg, out: Path, args) -> dict:
    model, tok, _ = _load(args)
    train, test = dataset(cfg, "train"), dataset(cfg, "test")
    ft = cfg["finetune"]
    if "qa" in ft["objectives"] and model.decoder is None:
        attach_decoder(model)
    summary = _train(model, tok, train, ft["objectives"], ft, cfg["train"], cfg["seed"], out)
    save_checkpoint(model, out / "model.ckpt", tok, {"command": "finetune", "seed": cfg["seed"]})
    if "qa" in ft["objectives"]:
        summary["eval"] = {"accuracy": evaluate_qa(model, tok, test, cfg["eval"]["t_test"], cfg["eval"]["allowed_answers"])}
    else:
        summary["eval"] = _retrieval_metrics(model, tok, test, cfg)
    return summary


def template_metrics(model, tok, test, strategies, t_test) -> dict:
    """Per-video top-1 over the motion templates (chance = 1 / #templates)."""
    texts, gt, _ = retrieval_queries(test)
    mats = score_matrices(model, tok, texts, test, strategies, t_test)
    return {s: {"r1": video_query_r1(m, gt), "n_queries": len(texts), "n_video": len(test)} for s, m in mats.items()}


def cmd_train_temporal(cfg, out: Path, args) -> dict:
    """Two stages. Stage 1 trains the single-frame model on image-text pairs (skipped with --checkpoint);
    stage 2 attaches the temporal encoder and trains on 4-frame clips of the temporal corpus.

    The default stage-1 corpus captions each frame with where its object sits, which is what the
    temporal encoder later needs to tell motions apart.
    """
    cfg = copy.deepcopy(cfg)
    tr, tp = cfg["train"], cfg["temporal"]
    if not cfg["data"]["train_manifest"]:
        cfg["data"]["corpus"] = "temporal"
        cfg["data"]["frames"] = cfg["model"]["t_train_temporal"]
        cfg["data"]["n_train"] = tp["stage2_videos"]
    train, test = dataset(cfg, "train"), dataset(cfg, "test")
    summary = {}
    if args.checkpoint:
        model, tok, _ = _load(args)
    else:
        tok = WordTokenizer(corpus_vocabulary())
        model = VideoTextModel(model_config(cfg, tok.vocab_size), seed=derive_seeds(cfg["seed"])["init"])
        if tp["stage1_corpus"] == "position":
            stage1_data = generate_position_corpus(tp["stage1_videos"], 1, _data_seed(cfg["seed"], "stage1"),
                                                   prefix="position_train")
        else:
            stage1_data = train
        stage1 = dict(tr, epochs=tp["stage1_epochs"])
        summary["stage1"] = _train(model, tok, stage1_data, tr["objectives"], stage1, tr, cfg["seed"], out, tag="stage1")
        save_checkpoint(model, out / "single_frame.ckpt", tok, {"command": "train-temporal", "stage": 1})
    summary["single_frame"] = template_metrics(model, tok, test, cfg["eval"]["strategies"], cfg["eval"]["t_test"])
    attach_temporal(model, seed=derive_seeds(cfg["seed"] + 1)["init"], init_std=tp["init_std"])
    stage2 = dict(tr, epochs=tp["stage2_epochs"], peak_lr=tp["stage2_lr"], min_lr=tp["stage2_min_lr"])
    summary["stage2"] = _train(model, tok, train, tr["objectives"], stage2, tr, cfg["seed"] + 1, out,
                               frames_per_step=tp["frames_per_step"], tag="stage2",
                               lr_scales={"temporal.pos_table": tp["pos_table_lr_scale"]})
    save_checkpoint(model, out / "model.ckpt", tok, {"command": "train-temporal", "stage": 2})
    summary["temporal"] = template_metrics(model, tok, test, ["concat"], cfg["eval"]["t_test"])
    return summary


def cmd_eval_retrieval(cfg, out: Path, args) -> dict:
    model, tok, _ = _load(args)
    return _retrieval_metrics(model, tok, dataset(cfg, "test"), cfg)


def cmd_eval_qa(cfg, out: Path, args) -> dict:
    model, tok, _ = _load(args)
    test = dataset(cfg, "test")
    acc = evaluate_qa(model, tok, test, cfg["eval"]["t_test"], cfg["eval"]["allowed_answers"])
    return {"accuracy": acc, "n": len(test), "t_test": cfg["eval"]["t_test"]}


def cmd_compare(cfg, out: Path, args) -> dict:
    model, tok, _ = _load(args)
    ev = cfg["eval"]
    grid = compare_ensembles(model, tok, dataset(cfg, "test"), ev["frame_counts"], ev["strategies"],
                             out_dir=out, plot=ev["plot"])
    return {"grid": grid}


def cmd_gradcheck(cfg, out: Path) -> dict:
    g = cfg["gradcheck"]
    report = gradcheck_suite(cfg["seed"], g["step"], g["max_entries"])
    report.pop("seconds")  # wall-clock would break byte-identical reruns
    report["tolerance"] = g["tolerance"]
    report["passed"] = report["max_rel_error"] <= g["tolerance"]
    return report


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    epilog = "config file defaults (flags override):\n" + json.dumps(DEFAULTS, indent=2)
    p = _Parser(prog="singleframe", description="Single-frame video-language training and evaluation.",
                epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON config; see defaults below")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        sp.add_argument("--checkpoint", help="model checkpoint to start from or evaluate")
        sp.add_argument("--t-test", type=int, dest="t_test", help="frames sampled per video at inference")
        sp.add_argument("--strategy", choices=[s.value for s in EnsembleStrategy])
        sp.add_argument("--data", help="directory holding train.jsonl / test.jsonl manifests")
        if name == "build-ssv2":
            sp.add_argument("--input", help="SSv2 annotation JSON (default: bundled fixture)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args)
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg["seed"])
        write_json({"command": args.command, "argv": list(argv), "seed": cfg["seed"], "config": cfg,
                    "version": __version__, "torch": torch.__version__.split("+")[0]}, out / "run_meta.json")
        result = _dispatch(args, cfg, out)
        write_json(result, out / "metrics.json")
    except (UsageError, ConfigError, InputError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, RuntimeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    if args.command == "gradcheck" and not result["passed"]:
        print(f"gradient check failed: max relative error {result['max_rel_error']:.3g}", file=sys.stderr)
        return 2
    print(f"wrote {out / 'metrics.json'}")
    return 0


def _dispatch(args, cfg, out):
    c = args.command
    if c in ("eval-retrieval", "eval-qa", "compare-ensembles", "finetune"):
        _require_checkpoint(args)
    if c == "gen-static":
        return cmd_gen(cfg, out, "static")
    if c == "gen-temporal":
        return cmd_gen(cfg, out, "temporal")
    if c == "build-ssv2":
        return cmd_build_ssv2(cfg, out)
    if c == "pretrain":
        return cmd_pretrain(cfg, out)
    if c == "finetune":
        return cmd_finetune(cfg, out, args)
    if c == "train-temporal":
        return cmd_train_temporal(cfg, out, args)
    if c == "eval-retrieval":
        return cmd_eval_retrieval(cfg, out, args)
    if c == "eval-qa":
        return cmd_eval_qa(cfg, out, args)
    if c == "compare-ensembles":
        return cmd_compare(cfg, out, args)
    return cmd_gradcheck(cfg, out)


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
