import json
import struct

import pytest
import torch

from mmdiff.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture
def sample(tmp_path):
    gen = torch.Generator().manual_seed(0)
    tensors = {
        "unet.conv.weight": torch.randn(4, 3, 3, 3, generator=gen),
        "embedder.tok": torch.randn(16, 8, generator=gen),
        "scalar": torch.randn((), generator=gen),
    }
    config = {"T": 1000, "kind": "scaled_linear", "nested": {"a": [1, 2]}}
    path = tmp_path / "model.ckpt"
    save_checkpoint(config, tensors, path)
    return config, tensors, path


class TestRoundtrip:
    def test_config_and_tensors_survive(self, sample):
        config, tensors, path = sample
        loaded_config, loaded = load_checkpoint(path)
        assert loaded_config == config
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert torch.equal(loaded[name], tensors[name])
            assert loaded[name].dtype == torch.float32

    def test_save_load_save_is_byte_identical(self, sample, tmp_path):
        _, _, path = sample
        config, tensors = load_checkpoint(path)
        path2 = tmp_path / "again.ckpt"
        save_checkpoint(config, tensors, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_insertion_order_does_not_matter(self, sample, tmp_path):
        config, tensors, path = sample
        reordered = dict(reversed(list(tensors.items())))
        path2 = tmp_path / "reordered.ckpt"
        save_checkpoint(config, reordered, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_magic_and_version_prefix(self, sample):
        _, _, path = sample
        head = path.read_bytes()[:8]
        assert head[:4] == MAGIC
        assert struct.unpack("<I", head[4:])[0] == VERSION

    def test_no_temp_file_left_behind(self, sample):
        _, _, path = sample
        leftovers = [p for p in path.parent.iterdir() if p.suffix != ".ckpt"]
        assert leftovers == []


class TestValidation:
    def test_non_float32_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="float32"):
            save_checkpoint({}, {"w": torch.ones(2, dtype=torch.float64)}, tmp_path / "x.ckpt")

    def test_failed_save_leaves_no_file(self, tmp_path):
        target = tmp_path / "partial.ckpt"
        with pytest.raises(ValueError):
            save_checkpoint({}, {"a": torch.ones(2), "b": torch.ones(2).long()}, target)
        assert not target.exists()


class TestCorruption:
    def test_flipped_payload_byte_names_tensor(self, sample):
        _, _, path = sample
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF  # payload region ends the file; sorted order puts 'unet.*' last
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointIntegrityError, match="unet.conv.weight"):
            load_checkpoint(path)

    def test_bad_magic(self, sample):
        _, _, path = sample
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_names_both(self, sample):
        _, _, path = sample
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError) as err:
            load_checkpoint(path)
        assert "9" in str(err.value) and "1" in str(err.value)

    def test_truncated_file(self, sample):
        _, _, path = sample
        blob = path.read_bytes()
        for frac in (0.5, 0.05):  # cut inside the payload and inside the header
            path.write_bytes(blob[: int(len(blob) * frac)])
            with pytest.raises(CheckpointIntegrityError, match="truncated|extends past"):
                load_checkpoint(path)

    def test_corrupt_config_json(self, sample):
        _, _, path = sample
        blob = bytearray(path.read_bytes())
        # config blob starts at byte 12; stomp its first character
        blob[12] = ord("?")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_errors_share_base_class(self):
        assert issubclass(CheckpointFormatError, CheckpointError)
        assert issubclass(CheckpointVersionError, CheckpointError)
        assert issubclass(CheckpointIntegrityError, CheckpointError)

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "absent.ckpt")
