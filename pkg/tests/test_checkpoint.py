import numpy as np
import pytest

from crystalpretrain.checkpoint import (BadMagic, TruncatedPayload,
                                        VersionMismatch, checkpoint_from_params,
                                        load_checkpoint, save_checkpoint)
from crystalpretrain.model import ModelConfig, init_params


CFG = ModelConfig(hidden_dim=6, n_conv=2, embed_dim=4, head_hidden=4)


def make_checkpoint(seed=0, with_opt=False):
    params = init_params(CFG, seed=seed)
    opt = None
    if with_opt:
        opt = {f"m.{n}": np.zeros(t.shape, dtype=np.float32)
               for n, t in params.items()}
    return checkpoint_from_params(params, CFG, {"phase": "pretrain", "epoch": 3,
                                                "loss_kind": "sup-bt",
                                                "surrogate_label_name": "surrogate_label"},
                                  optimizer_state=opt)


def test_round_trip_bit_exact(tmp_path):
    ckpt = make_checkpoint()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert set(loaded.tensors) == set(ckpt.tensors)
    for name in ckpt.tensors:
        assert loaded.tensors[name].tobytes() == ckpt.tensors[name].tobytes()
    assert loaded.metadata == ckpt.metadata
    assert loaded.model_config == CFG


def test_round_trip_with_optimizer_state(tmp_path):
    ckpt = make_checkpoint(with_opt=True)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert set(loaded.optimizer_state) == set(ckpt.optimizer_state)


def test_save_load_save_is_stable(tmp_path):
    ckpt = make_checkpoint()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, ckpt)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_checkpoint())
    data = bytearray(path.read_bytes())
    data[:8] = b"NOTMAGIC"
    path.write_bytes(bytes(data))
    with pytest.raises(BadMagic):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_checkpoint())
    data = bytearray(path.read_bytes())
    data[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatch) as err:
        load_checkpoint(path)
    assert err.value.found == 99


def test_truncated_payload(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_checkpoint())
    data = path.read_bytes()
    path.write_bytes(data[:-40])
    with pytest.raises(TruncatedPayload):
        load_checkpoint(path)


def test_to_params_upconverts():
    ckpt = make_checkpoint()
    params = ckpt.to_params()
    for name, tensor in params.items():
        assert tensor.values.dtype == np.float64
        assert tensor.requires_grad
        assert np.array_equal(tensor.values,
                              ckpt.tensors[name].astype(np.float64))
