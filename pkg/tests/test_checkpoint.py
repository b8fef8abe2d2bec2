import struct

import pytest
import torch

from cacdn.checkpoint import (CheckpointCorruptError, CheckpointFormatError, CheckpointTruncatedError, CheckpointVersionError,
                              ConfigHashMismatch, first_difference, load_checkpoint, save_checkpoint,
                              stable_hash)
from cacdn.core_types import Variant
from cacdn.network import CACDN, ModelConfig
from cacdn.trainer import make_optimizer, make_plateau, model_checkpoint, TrainSchedule


@pytest.fixture
def saved(tmp_path):
    model = CACDN(ModelConfig(Variant.SMALL, width=0.0625))
    opt = make_optimizer(model.parameters(), TrainSchedule())
    loss = sum(p.sum() for p in model.parameters())
    loss.backward()
    opt.step()
    plateau = make_plateau(opt, TrainSchedule())
    plateau.step(1.0)
    ckpt = model_checkpoint(model, 3, opt, plateau, [{"epoch": 0, "val_loss": 1.0}], seed=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    return model, ckpt, path


def test_round_trip_bitwise(saved):
    model, ckpt, path = saved
    back = load_checkpoint(path, model.cfg.to_dict())
    assert back.epoch == 3 and back.phase == "end_to_end"
    assert back.history == ckpt.history and back.extra == {"seed": 2}
    for k, v in ckpt.weights.items():
        assert back.weights[k].dtype == v.dtype
        assert torch.equal(back.weights[k], v), k
    assert torch.equal(back.rng_state, ckpt.rng_state)
    opt = make_optimizer(CACDN(model.cfg).parameters(), TrainSchedule())
    opt.load_state_dict(back.optimizer)
    for idx, st in ckpt.optimizer["state"].items():
        for key, value in st.items():
            assert torch.equal(back.optimizer["state"][idx][key], value)
    assert back.scheduler == ckpt.scheduler and back.scheduler["num_bad_epochs"] == 0
    assert path.read_bytes()[:4] == b"CKPT"


def test_save_is_stable(saved, tmp_path):
    _, ckpt, path = saved
    save_checkpoint(ckpt, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_version_error(saved):
    _, _, path = saved
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_format_error(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "missing.ckpt")


@pytest.mark.parametrize("keep", [10, 200, -100])
def test_truncated(saved, keep):
    _, _, path = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:keep] if keep > 0 else raw[:keep])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_corrupt_payload(saved):
    _, _, path = saved
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_hash_mismatch_names_field(saved):
    model, _, path = saved
    wrong = ModelConfig(Variant.SMALL, width=0.0625, use_s2_pre=False).to_dict()
    with pytest.raises(ConfigHashMismatch) as err:
        load_checkpoint(path, wrong)
    assert err.value.field_path == "use_s2_pre"


def test_first_difference():
    assert first_difference({"a": {"b": [1, 2]}}, {"a": {"b": [1, 3]}}) == "a.b[1]"
    assert first_difference({"a": 1}, {"a": 1, "c": 2}) == "c"
    assert first_difference({"a": 1}, {"a": 1}) is None
    assert stable_hash({"a": 1, "b": 2}) == stable_hash({"b": 2, "a": 1})
