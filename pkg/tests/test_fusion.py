import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from singleframe.errors import InputError
from singleframe.fusion import (EnsembleStrategy, aggregate_scores, predict, predict_early_fusion,
                                predict_late_fusion, sample_inference_frames, sample_train_clip,
                                sample_train_frame)

from conftest import random_frames


def test_sample_train_frame_single():
    assert all(sample_train_frame(1, s) == 0 for s in range(20))


def test_sample_train_frame_uniform():
    rng = np.random.default_rng(0)
    counts = np.bincount([sample_train_frame(10, rng) for _ in range(10000)], minlength=10)
    assert counts.min() >= 800 and counts.max() <= 1200


def test_sample_train_frame_seeded_and_errors():
    assert sample_train_frame(8, 42) == sample_train_frame(8, 42)
    with pytest.raises(InputError):
        sample_train_frame(0, 0)


def test_sample_train_clip_one_per_segment():
    rng = np.random.default_rng(1)
    for _ in range(200):
        idx = sample_train_clip(8, 4, rng)
        assert idx == sorted(idx)
        assert [i // 2 for i in idx] == [0, 1, 2, 3]
    assert sample_train_clip(4, 4, rng) == [0, 1, 2, 3]


@pytest.mark.parametrize("t,n,expected", [
    (8, 4, [1, 3, 5, 7]),
    (5, 5, [0, 1, 2, 3, 4]),
    (3, 12, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]),
    (8, 1, [4]),
])
def test_sample_inference_frames_examples(t, n, expected):
    assert sample_inference_frames(t, n) == expected


@given(st.integers(1, 60), st.integers(1, 40))
def test_sample_inference_frames_matches_midpoint_formula(t, n):
    idx = sample_inference_frames(t, n)
    assert idx == [math.floor((i + 0.5) * t / n) for i in range(n)] or all(
        abs(a - (i + 0.5) * t / n) < 1 for i, a in enumerate(idx))
    assert idx == sorted(idx) and 0 <= idx[0] and idx[-1] < t


@given(st.integers(3, 60), st.integers(3, 40))
def test_sample_inference_frames_covers_first_and_last_third(t, n):
    idx = sample_inference_frames(t, n)
    assert idx[0] < t / 3 and idx[-1] >= 2 * t / 3 - 1


@pytest.mark.parametrize("agg", ["lse", "max", "mean"])
def test_aggregate_constant_is_identity(agg):
    assert aggregate_scores([0.37] * 3, agg) == pytest.approx(0.37, abs=1e-12)


def test_aggregate_examples():
    assert aggregate_scores([0.1, 0.9, 0.3], "max") == pytest.approx(0.9)
    assert aggregate_scores([0.2, 0.4, 0.6], "mean") == pytest.approx(0.4)
    assert aggregate_scores([0.0, 1.0], "lse") == pytest.approx(math.log((1 + math.e) / 2), abs=1e-6)
    assert aggregate_scores([0.0, 1.0], "lse") == pytest.approx(0.620115, abs=1e-6)


def test_aggregate_errors():
    with pytest.raises(InputError):
        aggregate_scores([], "mean")
    with pytest.raises(InputError):
        aggregate_scores([0.0, float("nan")], "max")
    with pytest.raises(InputError):
        aggregate_scores([0.0, float("inf")], "lse")


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_aggregator_sandwich(xs):
    mean, lse, mx = (aggregate_scores(xs, a) for a in ("mean", "lse", "max"))
    assert mean <= lse + 1e-9 and lse <= mx + 1e-9
    if max(xs) - min(xs) > 1e-3:
        assert mean < lse < mx


def test_aggregate_batched_tensor_keeps_grad():
    x = torch.randn(5, 4, requires_grad=True)
    out = aggregate_scores(x, "lse")
    assert out.shape == (5,)
    out.sum().backward()
    assert torch.allclose(x.grad.sum(-1), torch.ones(5))


# ---------------------------------------------------------------- video scoring

def _setup(model, tok, n_frames=4, seed=0):
    text = model.encode_text(tok.encode_batch(["red square", "blue ring"], 16))
    encs = [model.encode_frame(random_frames(2, seed=seed + i)) for i in range(n_frames)]
    return text, encs


def test_early_fusion_single_frame_equals_fuse(model, tok):
    text, encs = _setup(model, tok, 1)
    direct = model.multimodal_fuse(text, encs[0]).match_logit
    assert (predict_early_fusion(model, text, encs) - direct).abs().max() <= 1e-6


def test_single_frame_collapse(model, tok):
    text, encs = _setup(model, tok, 1)
    scores = [predict(model, text, encs, s) for s in EnsembleStrategy]
    for s in scores[1:]:
        assert (s - scores[0]).abs().max() <= 1e-6


@pytest.mark.parametrize("strategy", list(EnsembleStrategy))
def test_frame_order_invariance(model, tok, strategy):
    text, encs = _setup(model, tok, 4)
    perm = [2, 0, 3, 1]
    a = predict(model, text, encs, strategy)
    b = predict(model, text, [encs[i] for i in perm], strategy)
    assert (a - b).abs().max() <= 1e-5


def test_late_fusion_matches_per_frame_loop(model, tok):
    text, encs = _setup(model, tok, 3)
    per = torch.stack([model.multimodal_fuse(text, e).match_logit for e in encs], dim=-1)
    for agg in ("lse", "max", "mean"):
        assert torch.allclose(predict_late_fusion(model, text, encs, agg), aggregate_scores(per, agg), atol=1e-6)


def test_empty_frame_list(model, tok):
    text, _ = _setup(model, tok, 1)
    with pytest.raises(InputError):
        predict_early_fusion(model, text, [])
    with pytest.raises(InputError):
        predict_late_fusion(model, text, [], "mean")
