import struct

import numpy as np
import pytest
import torch

from invmark.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, load_checkpoint, read_manifest, save_checkpoint
from invmark.errors import CheckpointError
from invmark.extractor import Extractor
from invmark.tensor_core import ModelConfig, init_parameters


def make(cfg, seed=0):
    ext = Extractor(cfg)
    init_parameters(ext, torch.Generator().manual_seed(seed))
    return ext


def test_round_trip_bit_exact(tmp_path, small_cfg):
    ext = make(small_cfg)
    ckpt = Checkpoint(small_cfg, "stage1", rng_state={"numpy": {"a": 1}}, metrics={"psnr": 30.5}, meta={"x": [1, 2]})
    ckpt.put_module("extractor", ext)
    ckpt.tensors["rng.torch"] = torch.Generator().manual_seed(3).get_state().numpy()
    path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(path)
    assert back.stage == "stage1" and back.model_config == small_cfg
    assert back.metrics == ckpt.metrics and back.rng_state == ckpt.rng_state and back.meta == ckpt.meta
    assert set(back.tensors) == set(ckpt.tensors)
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        assert back.tensors[k].tobytes() == v.tobytes()
    other = make(small_cfg, seed=9)
    back.load_module("extractor", other)
    for (_, a), (_, b) in zip(ext.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_version_and_magic_checked(tmp_path, small_cfg):
    path = save_checkpoint(Checkpoint(small_cfg, "init"), tmp_path / "a.ckpt")
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"garbage!" + bytes(raw[8:]))
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    assert path.read_bytes().startswith(MAGIC)


def test_truncated(tmp_path, small_cfg):
    ckpt = Checkpoint(small_cfg, "init")
    ckpt.put_module("extractor", make(small_cfg))
    path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_architecture_mismatch(tmp_path, small_cfg):
    ckpt = Checkpoint(small_cfg, "init")
    ckpt.put_module("extractor", make(small_cfg))
    bigger = ModelConfig(**{**small_cfg.to_dict(), "extractor_fc": 12})
    with pytest.raises(CheckpointError):
        ckpt.load_module("extractor", Extractor(bigger))
    with pytest.raises(CheckpointError):
        ckpt.load_module("encoder", Extractor(small_cfg))


def test_bad_stage(small_cfg):
    with pytest.raises(CheckpointError):
        Checkpoint(small_cfg, "stage9")
