import struct

import numpy as np
import pytest
import torch

from conftest import toy_config
from voldiff.checkpoint import (
    MAGIC,
    blob_digest,
    load_into_module,
    parameter_digest,
    read_checkpoint,
    save_module,
    write_checkpoint,
)
from voldiff.config import ScheduleConfig
from voldiff.controlnet import init_adapter
from voldiff.errors import (
    CheckpointBadMagic,
    CheckpointError,
    CheckpointTensorMismatch,
    CheckpointTruncated,
)
from voldiff.persist import ROLE_DIFFUSION, load_adapter, load_model, save_adapter, save_model
from voldiff.unet import build_unet


@pytest.fixture
def ckpt_path(tmp_path):
    return tmp_path / "net.ckpt"


class TestContainer:
    def test_round_trip_bit_exact(self, toy_net, ckpt_path):
        save_module(ckpt_path, toy_net, "unet", {"arch": toy_net.config.to_dict()})
        kind, config, extra, tensors = read_checkpoint(ckpt_path)
        assert kind == "unet"
        assert config["arch"] == toy_net.config.to_dict()
        for name, t in toy_net.state_dict().items():
            assert np.array_equal(tensors[name], t.numpy())

    def test_bad_magic(self, toy_net, ckpt_path):
        save_module(ckpt_path, toy_net, "unet", {})
        blob = bytearray(ckpt_path.read_bytes())
        blob[:4] = b"XXXX"
        ckpt_path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointBadMagic):
            read_checkpoint(ckpt_path)

    def test_truncated_manifest(self, ckpt_path):
        ckpt_path.write_bytes(MAGIC + struct.pack("<Q", 999) + b"{}")
        with pytest.raises(CheckpointTruncated):
            read_checkpoint(ckpt_path)

    def test_truncated_payload(self, toy_net, ckpt_path):
        save_module(ckpt_path, toy_net, "unet", {})
        blob = ckpt_path.read_bytes()
        ckpt_path.write_bytes(blob[:-16])
        with pytest.raises(CheckpointTruncated):
            read_checkpoint(ckpt_path)

    def test_malformed_manifest(self, ckpt_path):
        body = b"not json"
        ckpt_path.write_bytes(MAGIC + struct.pack("<Q", len(body)) + body)
        with pytest.raises(CheckpointError):
            read_checkpoint(ckpt_path)

    def test_tensor_name_mismatch(self, toy_net, ckpt_path):
        write_checkpoint(ckpt_path, "unet", {}, [("wrong.name", torch.zeros(2))])
        _, _, _, tensors = read_checkpoint(ckpt_path)
        with pytest.raises(CheckpointTensorMismatch):
            load_into_module(toy_net, tensors)

    def test_tensor_shape_mismatch(self, toy_net, ckpt_path):
        tensors = [(n, torch.zeros(1)) for n, _ in toy_net.state_dict().items()]
        write_checkpoint(ckpt_path, "unet", {}, tensors)
        _, _, _, read = read_checkpoint(ckpt_path)
        with pytest.raises(CheckpointTensorMismatch):
            load_into_module(toy_net, read)

    def test_fixed_little_endian_layout(self, ckpt_path):
        # a known value must appear as little-endian float32 bytes on disk
        value = np.float32(1.5)
        write_checkpoint(ckpt_path, "unet", {}, [("w", torch.tensor([1.5]))])
        blob = ckpt_path.read_bytes()
        assert value.astype("<f4").tobytes() in blob
        _, _, _, tensors = read_checkpoint(ckpt_path)
        assert tensors["w"][0] == value

    def test_atomic_write_leaves_no_temp(self, toy_net, tmp_path):
        path = tmp_path / "x.ckpt"
        save_module(path, toy_net, "unet", {})
        leftovers = [p for p in tmp_path.iterdir() if p.name != "x.ckpt"]
        assert leftovers == []


class TestModelPersistence:
    def test_model_round_trip(self, toy_net, ckpt_path):
        sched = ScheduleConfig(T=10, beta_start=0.1, beta_end=0.2)
        save_model(ckpt_path, toy_net, ROLE_DIFFUSION, sched, extra={"step": 5})
        net, sched2, extra, _ = load_model(ckpt_path, expected_role=ROLE_DIFFUSION)
        assert sched2 == sched
        assert extra["step"] == 5
        assert parameter_digest(net) == parameter_digest(toy_net)

    def test_role_mismatch(self, toy_net, ckpt_path):
        save_model(ckpt_path, toy_net, "unet", ScheduleConfig())
        with pytest.raises(CheckpointError):
            load_model(ckpt_path, expected_role=ROLE_DIFFUSION)

    def test_adapter_round_trip_and_base_pinning(self, ckpt_path, tmp_path):
        base = build_unet(toy_config(), seed=0)
        adapter = init_adapter(base)
        with torch.no_grad():
            adapter.z_in.weight.add_(0.25)
        save_adapter(ckpt_path, adapter, ScheduleConfig())
        loaded, _, _, _ = load_adapter(ckpt_path, base)
        assert parameter_digest(loaded) == parameter_digest(adapter)

        other_base = build_unet(toy_config(), seed=99)
        other_base.freeze()
        with pytest.raises(CheckpointTensorMismatch):
            load_adapter(ckpt_path, other_base)

    def test_adapter_architecture_mismatch(self, ckpt_path):
        base = build_unet(toy_config(), seed=0)
        adapter = init_adapter(base)
        save_adapter(ckpt_path, adapter, ScheduleConfig())
        bigger = build_unet(toy_config(base_channels=8), seed=0)
        with pytest.raises(CheckpointTensorMismatch):
            load_adapter(ckpt_path, bigger)


class TestDigests:
    def test_parameter_digest_tracks_changes(self, toy_net):
        before = parameter_digest(toy_net)
        assert before == parameter_digest(toy_net)
        with torch.no_grad():
            next(toy_net.parameters()).add_(1e-3)
        assert parameter_digest(toy_net) != before

    def test_blob_digest_matches_git(self, tmp_path):
        # sha1("blob 12\0hello world\n") is a fixed, externally known value
        path = tmp_path / "f.txt"
        path.write_bytes(b"hello world\n")
        assert blob_digest(path) == "3b18e512dba79e4c8300dd08aeb37f8e728b8dad"
