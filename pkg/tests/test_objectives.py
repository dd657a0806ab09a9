import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from singleframe.errors import InputError
from singleframe.gradcheck import check_gradients
from singleframe.objectives import (IGNORE, apply_mlm_masking, mlm_loss, negative_weights, sample_hard_negatives,
                                    vtc_loss, vtm_loss)
from singleframe.tokenizer import CLS, MASK, PAD, SEP

from conftest import random_frames


def _unit(x):
    return x / x.norm(dim=-1, keepdim=True)


# ---------------------------------------------------------------- VTC

@pytest.mark.parametrize("n", [1, 2, 3, 7])
def test_vtc_symmetric_point(n):
    v = torch.ones(n, 4, dtype=torch.float64) / 2
    assert vtc_loss(v, v, 0.07).item() == pytest.approx(2 * n * math.log(n), abs=1e-6)


def test_vtc_identity_case():
    e = torch.eye(2, dtype=torch.float64)
    assert vtc_loss(e, e, 1.0).item() == pytest.approx(4 * math.log(1 + math.exp(-1)), abs=1e-6)
    assert vtc_loss(e, e, 1.0).item() == pytest.approx(1.253047, abs=1e-6)


def test_vtc_brute_force_formula():
    g = torch.Generator().manual_seed(0)
    v, t = _unit(torch.randn(5, 4, generator=g, dtype=torch.float64)), _unit(torch.randn(5, 4, generator=g, dtype=torch.float64))
    tau = 0.2
    s = (v @ t.T / tau).numpy()
    expected = 0.0
    for i in range(5):
        expected -= s[i, i] - np.log(np.exp(s[i]).sum())
        expected -= s[i, i] - np.log(np.exp(s[:, i]).sum())
    assert vtc_loss(v, t, tau).item() == pytest.approx(expected, rel=1e-12)
    assert vtc_loss(v, t, tau, "mean").item() == pytest.approx(expected / 5, rel=1e-12)


def test_vtc_identity_mask_matches_default():
    g = torch.Generator().manual_seed(1)
    v, t = _unit(torch.randn(4, 3, generator=g)), _unit(torch.randn(4, 3, generator=g))
    assert torch.allclose(vtc_loss(v, t, 0.1), vtc_loss(v, t, 0.1, positive_mask=torch.eye(4, dtype=torch.bool)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_vtc_pair_relabeling_invariance(n, seed):
    g = torch.Generator().manual_seed(seed)
    v, t = _unit(torch.randn(n, 4, generator=g, dtype=torch.float64)), _unit(torch.randn(n, 4, generator=g, dtype=torch.float64))
    perm = torch.randperm(n, generator=g)
    assert vtc_loss(v, t, 0.1).item() == pytest.approx(vtc_loss(v[perm], t[perm], 0.1).item(), rel=1e-10)
    assert vtc_loss(v, t, 0.1).item() >= 0


def test_vtc_decreases_with_diagonal():
    sim_off = 0.1
    losses = []
    for d in (0.1, 0.3, 0.6, 0.9):
        # construct projections whose similarity matrix has diagonal d and off-diagonal sim_off
        s = torch.full((3, 3), sim_off, dtype=torch.float64)
        s.fill_diagonal_(d)
        losses.append(vtc_loss(s, torch.eye(3, dtype=torch.float64), 0.1).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_vtc_rejects_nonpositive_tau():
    e = torch.eye(2)
    with pytest.raises(InputError):
        vtc_loss(e, e, 0.0)


def test_vtc_gradient_finite_differences():
    g = torch.Generator().manual_seed(2)
    v = torch.nn.Parameter(torch.randn(3, 4, generator=g, dtype=torch.float64))
    t = torch.nn.Parameter(torch.randn(3, 4, generator=g, dtype=torch.float64))
    mod = torch.nn.ParameterList([v, t])
    errs = check_gradients(lambda: vtc_loss(_unit(v), _unit(t), 0.1), mod)
    assert max(errs.values()) <= 1e-4


# ---------------------------------------------------------------- MLM

def _ids(n_words, length=16):
    ids = torch.full((length,), PAD)
    ids[0] = CLS
    ids[1:1 + n_words] = torch.arange(4, 4 + n_words)
    ids[1 + n_words] = SEP
    mask = ids != PAD
    return ids, mask


def test_mlm_selection_rate():
    ids, mask = _ids(10)
    rng = np.random.default_rng(0)
    counts = [int((apply_mlm_masking(ids, mask, 0.5, rng, 30).labels != IGNORE).sum()) for _ in range(10000)]
    assert 4.8 <= np.mean(counts) <= 5.2


def test_mlm_corruption_split():
    ids, mask = _ids(10)
    out = apply_mlm_masking(ids.repeat(4000, 1), mask.repeat(4000, 1), 0.5, 0, 30)
    sel = out.labels != IGNORE
    changed = out.input_ids[sel]
    orig = ids.repeat(4000, 1)[sel]
    frac_mask = (changed == MASK).float().mean().item()
    frac_same = (changed == orig).float().mean().item()
    assert abs(frac_mask - 0.8) < 0.02
    # 10% kept plus random draws that happen to hit the original word
    assert 0.08 < frac_same < 0.13
    assert changed.min() >= 3


@given(st.integers(0, 2**31 - 1))
def test_mlm_never_selects_special_or_pad(seed):
    ids, mask = _ids(5)
    out = apply_mlm_masking(ids, mask, 0.5, seed, 30)
    special = (ids == CLS) | (ids == SEP) | (ids == PAD)
    assert (out.labels[special] == IGNORE).all()
    assert torch.equal(out.input_ids[special], ids[special])
    # labels and corruption positions coincide
    corrupted = out.input_ids != ids
    assert not (corrupted & (out.labels == IGNORE)).any()


def test_mlm_seeded_determinism():
    ids, mask = _ids(8)
    a, b = apply_mlm_masking(ids, mask, 0.5, 7, 30), apply_mlm_masking(ids, mask, 0.5, 7, 30)
    assert torch.equal(a.input_ids, b.input_ids) and torch.equal(a.labels, b.labels)


def test_mlm_nothing_maskable():
    ids = torch.tensor([CLS, SEP, PAD])
    out = apply_mlm_masking(ids, ids != PAD, 0.5, 0, 30)
    assert torch.equal(out.input_ids, ids) and (out.labels == IGNORE).all()
    logits = torch.randn(3, 30, requires_grad=True)
    loss = mlm_loss(logits, out.labels)
    loss.backward()
    assert loss.item() == 0 and torch.all(logits.grad == 0)


def test_mlm_uniform_logits():
    labels = torch.tensor([[5, IGNORE, 9, 63]])
    assert mlm_loss(torch.zeros(1, 4, 64), labels).item() == pytest.approx(math.log(64), abs=1e-6)


def test_mlm_saturated_correct():
    labels = torch.tensor([[5, 9, IGNORE]])
    logits = 100 * F.one_hot(torch.tensor([[5, 9, 0]]), 64).float()
    assert mlm_loss(logits, labels).item() <= 1e-6


def test_mlm_ignores_unlabelled_positions():
    labels = torch.tensor([[5, IGNORE]])
    a = torch.zeros(1, 2, 16)
    b = a.clone()
    b[0, 1] = torch.randn(16)
    assert mlm_loss(a, labels) == mlm_loss(b, labels)


def test_mlm_gradient_finite_differences():
    g = torch.Generator().manual_seed(0)
    logits = torch.nn.Parameter(torch.randn(2, 5, 12, generator=g, dtype=torch.float64))
    labels = torch.tensor([[IGNORE, 4, 7, IGNORE, IGNORE], [5, IGNORE, IGNORE, 11, 6]])
    errs = check_gradients(lambda: mlm_loss(logits, labels), torch.nn.ParameterList([logits]))
    assert max(errs.values()) <= 1e-4


# ---------------------------------------------------------------- VTM

def test_negative_sampling_follows_softmax():
    sim = torch.tensor([[0.0, 10.0, -10.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    w = negative_weights(sim, 1.0)
    assert w[0, 0] == 0 and w[0, 1] >= 0.999
    rng = np.random.default_rng(0)
    hits = sum(sample_hard_negatives(sim, 1.0, rng)[0][0] == 1 for _ in range(2000))
    assert hits >= 1990


def test_negative_sampling_excludes_positives():
    sim = torch.zeros(4, 4)
    pos = torch.eye(4, dtype=torch.bool)
    pos[0, 1] = pos[1, 0] = True
    w = negative_weights(sim, 0.1, pos)
    assert w[0, 1] == 0 and w[0, 0] == 0
    assert torch.allclose(w.sum(1), torch.ones(4, dtype=w.dtype))


def test_vtm_needs_two_pairs(model, tok):
    text = model.encode_text(tok.encode_batch(["red square"], 16))
    vis = model.encode_frame(random_frames(1))
    with pytest.raises(InputError):
        vtm_loss(model, text, vis, torch.zeros(1, 1), 0)


def test_vtm_zero_logits_give_ln2(model, tok):
    with torch.no_grad():
        model.match_head.weight.zero_()
        model.match_head.bias.zero_()
    text = model.encode_text(tok.encode_batch(["red square", "blue ring", "green cross"], 16))
    vis = model.encode_frame(random_frames(3))
    loss = vtm_loss(model, text, vis, torch.zeros(3, 3), np.random.default_rng(0))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_vtm_gradient_finite_differences(tiny_double):
    m = tiny_double
    ids = torch.tensor([[CLS, 4, 5, SEP, PAD, PAD], [CLS, 6, SEP, PAD, PAD, PAD]])
    from singleframe.tokenizer import TokenSequence
    tokens = TokenSequence(ids, ids != PAD)
    f = random_frames(2, size=8, seed=4, dtype=torch.float64)

    def loss():
        return vtm_loss(m, m.encode_text(tokens), m.encode_frame(f), None, None, negatives=([1, 0], [1, 0]))

    errs = check_gradients(loss, m, max_entries=6)
    assert max(errs.values()) <= 1e-4
