"""
Test suite for sectioned checkpoints
"""

import struct

import numpy as np
import pytest

from looped_vlm.checkpoint import MAGIC, load_into, load_model, read_checkpoint, save_checkpoint
from looped_vlm.errors import CheckpointError, DataError, ShapeError
from looped_vlm.model import SECTIONS, MultimodalModel
from looped_vlm.training import AdamW

from test_config import TestConfig


@pytest.mark.unit
class TestCheckpoint:
    """Test cases for save_checkpoint / read_checkpoint"""

    def setup_method(self):
        """Set up test fixtures"""
        self.cfg = TestConfig.tiny_config()
        self.model = MultimodalModel(self.cfg)

    def test_save_and_load_restores_weights(self, temp_dir):
        """Test that a loaded model has identical parameters and config"""
        path = save_checkpoint(temp_dir / "m.ckpt", self.model, stage=2, step=7)
        restored = load_model(path)
        assert restored.cfg.to_dict() == self.cfg.to_dict()
        for (name, a), (_, b) in zip(self.model.named_parameters(), restored.named_parameters()):
            assert np.array_equal(a.data, b.data), name
        data = read_checkpoint(path)
        assert (data.stage, data.step) == (2, 7)
        assert data.header["sections"] == list(SECTIONS)

    def test_section_checksums_survive(self, temp_dir):
        """Test per-section fingerprints after a round trip"""
        path = save_checkpoint(temp_dir / "m.ckpt", self.model, 1, 0)
        other = MultimodalModel(TestConfig.tiny_config(seed=99))
        assert other.section_checksums() != self.model.section_checksums()
        load_into(other, read_checkpoint(path))
        assert other.section_checksums() == self.model.section_checksums()

    def test_optimizer_state(self, temp_dir):
        """Test that optimizer moments and counters are stored"""
        self.model.freeze_except("aligner")
        params = [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]
        opt = AdamW(params)
        for _, p in params:
            p.grad = np.ones_like(p.data)
        opt.step(0.01)
        path = save_checkpoint(temp_dir / "p.ckpt", self.model, 1, 1, optimizer_state=opt.state_dict())
        data = read_checkpoint(path)
        assert data.header["optimizer"] == {"t": 1, "skipped": 0}
        name = params[0][0]
        assert np.array_equal(data.optimizer["m"][name], opt.m[name])

    def test_missing_and_corrupt(self, temp_dir):
        """Test the errors for missing, foreign, truncated and padded files"""
        with pytest.raises(CheckpointError):
            read_checkpoint(temp_dir / "absent.ckpt")
        foreign = temp_dir / "foreign.ckpt"
        foreign.write_bytes(b"PK\x03\x04 zip file")
        with pytest.raises(CheckpointError):
            read_checkpoint(foreign)
        good = save_checkpoint(temp_dir / "m.ckpt", self.model, 1, 0).read_bytes()
        truncated = temp_dir / "truncated.ckpt"
        truncated.write_bytes(good[:len(good) // 2])
        with pytest.raises(CheckpointError):
            read_checkpoint(truncated)
        padded = temp_dir / "padded.ckpt"
        padded.write_bytes(good + b"\x00\x00")
        with pytest.raises(CheckpointError):
            read_checkpoint(padded)
        assert issubclass(CheckpointError, DataError)

    def test_header_layout(self, temp_dir):
        """Test the magic bytes and the header length prefix"""
        buffer = save_checkpoint(temp_dir / "m.ckpt", self.model, 1, 0).read_bytes()
        assert buffer.startswith(MAGIC)
        (length,) = struct.unpack_from("<I", buffer, len(MAGIC))
        assert buffer[len(MAGIC) + 4:len(MAGIC) + 4 + length].startswith(b"{")

    def test_shape_mismatch(self, temp_dir):
        """Test that weights for another width cannot be loaded"""
        path = save_checkpoint(temp_dir / "m.ckpt", self.model, 1, 0)
        wider = MultimodalModel(TestConfig.tiny_config(**{"model.hidden": 32}))
        with pytest.raises(ShapeError):
            load_into(wider, read_checkpoint(path))
