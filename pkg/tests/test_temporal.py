import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from singleframe.errors import ConfigError, InputError
from singleframe.gradcheck import check_gradients
from singleframe.temporal import attach_temporal, interpolate_temporal_encoding, predict_temporal, temporal_visual

from conftest import random_frames


def test_interpolation_identity():
    table = torch.randn(4, 6)
    assert interpolate_temporal_encoding(table, 4) is table


def test_interpolation_midpoint():
    table = torch.tensor([[1.0, -2.0], [3.0, 6.0]])
    out = interpolate_temporal_encoding(table, 3)
    assert torch.equal(out, torch.tensor([[1.0, -2.0], [2.0, 2.0], [3.0, 6.0]]))


@pytest.mark.parametrize("t_test", [1, 2, 3, 7, 16])
def test_interpolation_zero_table(t_test):
    assert torch.equal(interpolate_temporal_encoding(torch.zeros(4, 5), t_test), torch.zeros(t_test, 5))


def test_interpolation_endpoints_and_single_frame():
    table = torch.randn(4, 3, dtype=torch.float64)
    out = interpolate_temporal_encoding(table, 10)
    assert torch.equal(out[0], table[0]) and torch.allclose(out[-1], table[-1])
    assert torch.equal(interpolate_temporal_encoding(table, 1), table[:1])


def test_interpolation_reads_source_coordinate():
    table = torch.arange(4, dtype=torch.float64)[:, None]
    out = interpolate_temporal_encoding(table, 7)[:, 0]
    assert torch.allclose(out, torch.arange(7, dtype=torch.float64) * 3 / 6)


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(1, 12), st.floats(-5, 5), st.integers(0, 1000))
def test_interpolation_is_linear(t_train, t_test, alpha, seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(t_train, 3, generator=g, dtype=torch.float64), torch.randn(t_train, 3, generator=g, dtype=torch.float64)
    lhs = interpolate_temporal_encoding(alpha * a + b, t_test)
    rhs = alpha * interpolate_temporal_encoding(a, t_test) + interpolate_temporal_encoding(b, t_test)
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_interpolation_errors():
    with pytest.raises(ConfigError):
        interpolate_temporal_encoding(torch.zeros(0, 4), 2)
    with pytest.raises(InputError):
        interpolate_temporal_encoding(torch.zeros(4, 4), 0)


def _encs(model, n_frames, batch=2):
    return [model.encode_frame(random_frames(batch, seed=10 + i)) for i in range(n_frames)]


def test_fresh_table_is_zero_and_order_invariant(model, tok):
    attach_temporal(model, seed=3)
    assert torch.equal(model.temporal.pos_table, torch.zeros(4, model.cfg.hidden_dim))
    model.eval()
    text = model.encode_text(tok.encode_batch(["red square", "blue ring"], 16))
    encs = _encs(model, 4)
    a = predict_temporal(model, text, encs)
    b = predict_temporal(model, text, [encs[i] for i in (3, 1, 0, 2)])
    assert (a - b).abs().max() <= 1e-5


def test_nonzero_table_breaks_order_invariance(model, tok):
    attach_temporal(model, seed=3)
    model.eval()
    with torch.no_grad():
        model.temporal.pos_table.normal_(0, 1.0, generator=torch.Generator().manual_seed(0))
    text = model.encode_text(tok.encode_batch(["red square", "blue ring"], 16))
    encs = _encs(model, 4)
    a = predict_temporal(model, text, encs)
    b = predict_temporal(model, text, encs[::-1])
    assert (a - b).abs().max() > 1e-4


def test_sequence_length_68(model):
    attach_temporal(model)
    vis = temporal_visual(model, _encs(model, 4))
    assert vis.states.shape == (2, 68, model.cfg.hidden_dim)
    assert vis.mask.all() and vis.pooled.shape == (2, model.cfg.hidden_dim)


def test_extended_frame_count_uses_interpolation(model, tok):
    attach_temporal(model)
    text = model.encode_text(tok.encode_batch(["red square", "blue ring"], 16))
    assert predict_temporal(model, text, _encs(model, 8)).shape == (2,)


def test_explicit_table_length_mismatch(model, tok):
    attach_temporal(model)
    text = model.encode_text(tok.encode_batch(["red square", "blue ring"], 16))
    with pytest.raises(InputError):
        predict_temporal(model, text, _encs(model, 3), temporal_table=torch.zeros(4, model.cfg.hidden_dim))


def test_missing_encoder_and_empty_frames(model, tok):
    with pytest.raises(ConfigError):
        temporal_visual(model, _encs(model, 2))
    attach_temporal(model)
    with pytest.raises(InputError):
        temporal_visual(model, [])


def _block_weight_std(model):
    w = [p for p in model.temporal.blocks.parameters() if p.dim() == 2]
    return torch.cat([p.flatten() for p in w]).std().item(), max(p.abs().max().item() for p in w)


def test_init_std_controls_block_weights(model):
    attach_temporal(model, seed=0, init_std=0.02)
    small, small_max = _block_weight_std(model)
    attach_temporal(model, seed=0)
    std, big_max = _block_weight_std(model)
    # truncation at 2 std shrinks the spread to about 0.88 std
    assert small == pytest.approx(0.02 * 0.88, rel=0.05) and small_max <= 0.04 + 1e-7
    assert std == pytest.approx(0.15 * 0.88, rel=0.05) and big_max <= 0.3 + 1e-6
    with pytest.raises(ConfigError):
        attach_temporal(model, init_std=0.0)


def test_table_gradient_finite_differences(tiny_double):
    m = tiny_double
    attach_temporal(m, seed=1)
    m.double()
    with torch.no_grad():
        m.temporal.pos_table.normal_(0, 0.3, generator=torch.Generator().manual_seed(1))
    from singleframe.tokenizer import TokenSequence
    ids = torch.tensor([[1, 4, 5, 2, 0, 0], [1, 6, 2, 0, 0, 0]])
    text_tokens = TokenSequence(ids, ids != 0)
    frames = [random_frames(2, size=8, seed=20 + i, dtype=torch.float64) for i in range(3)]

    def score():
        return predict_temporal(m, m.encode_text(text_tokens), [m.encode_frame(f) for f in frames]).sum()

    errs = check_gradients(score, m.temporal, max_entries=12)
    assert errs["pos_table"] <= 1e-4
    assert max(errs.values()) <= 1e-4
