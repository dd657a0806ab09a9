import json

import numpy as np
import pytest
import torch

from singleframe.checkpoint import FORMAT, META_KEY, load_checkpoint, read_meta, save_checkpoint
from singleframe.qa import attach_decoder
from singleframe.temporal import attach_temporal

from conftest import random_frames


def test_roundtrip_preserves_outputs(model, tok, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt", tok, {"epoch": 3})
    assert path.name == "m.ckpt"
    loaded, tok2, meta = load_checkpoint(path)
    assert tok2.to_list() == tok.to_list() and meta["extra"] == {"epoch": 3}
    loaded.eval()
    f = random_frames(2)
    assert torch.equal(model.encode_frame(f).states, loaded.encode_frame(f).states)
    for (n, a), (m, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n == m and torch.equal(a, b)


def test_temporal_and_decoder_are_restored(model, tok, tmp_path):
    attach_temporal(model)
    attach_decoder(model)
    with torch.no_grad():
        model.temporal.pos_table.fill_(0.25)
    loaded, _, meta = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt", tok))
    assert meta["has_temporal"] and meta["has_decoder"]
    assert torch.equal(loaded.temporal.pos_table, model.temporal.pos_table)
    assert set(loaded.state_dict()) == set(model.state_dict())


def test_archive_layout(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    with np.load(path) as z:
        assert META_KEY in z.files and "log_tau" in z.files
        meta = json.loads(bytes(z[META_KEY]).decode())
    assert meta["format"] == FORMAT and meta["version"] == 1 and meta["vocab"] is None
    assert meta["config"]["hidden_dim"] == 64
    assert load_checkpoint(path)[1] is None


def test_double_precision_roundtrip(tiny_double, tmp_path):
    loaded, _, _ = load_checkpoint(save_checkpoint(tiny_double, tmp_path / "d.ckpt"))
    assert loaded.dtype == torch.float64
    assert torch.equal(loaded.log_tau, tiny_double.log_tau)


def test_rejects_foreign_and_newer_files(model, tmp_path):
    p = tmp_path / "x.npz"
    np.savez(p, **{META_KEY: np.frombuffer(b'{"format": "other", "version": 1}', dtype=np.uint8)})
    with pytest.raises(ValueError, match="not a"):
        read_meta(p)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays[META_KEY]).decode())
    meta["version"] = 99
    arrays[META_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    with pytest.raises(ValueError, match="newer"):
        load_checkpoint(path)
