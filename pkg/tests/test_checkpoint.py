"""Checkpoint format: bit-exact round trips, byte determinism, error handling."""

import pytest
import torch

from lipadapt.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from lipadapt.model import ModelConfig, build_model


@pytest.fixture()
def model():
    m = build_model(ModelConfig(n_classes=4, d_id=8, verifier_channels=(2, 4),
                                frontend_channels=4, block_channels=(4, 4, 8, 8),
                                backend_hidden=4, head_seed_channels=2), seed=1)
    m.enh_active = True
    return m


def test_round_trip_bit_exact(model, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, extra={"stage": "2", "run_id": "abc"})
    loaded, header = load_checkpoint(path)
    orig = model.state_dict()
    for name, tensor in loaded.state_dict().items():
        assert torch.equal(tensor, orig[name]), name
    assert loaded.enh_active is True and loaded.sup_active is False
    assert header["extra"]["stage"] == "2"
    assert loaded.cfg == model.cfg


def test_save_is_byte_deterministic(model, tmp_path):
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(p1, model, extra={"k": 1})
    save_checkpoint(p2, model, extra={"k": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_round_trip_then_save_identical(model, tmp_path):
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(p1, model, extra={})
    loaded, _ = load_checkpoint(p1)
    save_checkpoint(p2, loaded, extra={})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_header_readable_without_tensors(model, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, extra={"run_id": "xyz"})
    header = read_header(path)
    assert header["model"]["n_classes"] == 4
    assert {t["name"] for t in header["tensors"]} == set(model.state_dict())


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "junk.ckpt")
    with open(path, "wb") as fh:
        fh.write(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_file_rejected(model, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, extra={})
    blob = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(blob + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
