import numpy as np
import pytest

from saliency_backdoor import (
    ArchitectureMismatchError,
    CorruptCheckpointError,
    VersionMismatchError,
    build_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from saliency_backdoor.checkpoint import MAGIC


@pytest.fixture
def model():
    return build_model("tiny-cnn", (3, 32, 32), 10, seed=11)


def test_round_trip_parameters_bit_identical(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path, {"seed": 11, "epoch": 0})
    loaded = load_checkpoint(path)
    orig = model.get_parameters()
    back = loaded.get_parameters()
    assert set(orig) == set(back)
    for k in orig:
        assert np.array_equal(orig[k], back[k]), k


def test_round_trip_forward_identical(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    rng = np.random.default_rng(0)
    import torch

    for _ in range(10):
        x = torch.from_numpy(rng.random((1, 3, 32, 32), dtype=np.float32))
        assert np.array_equal(model.logits(x).numpy(), loaded.logits(x).numpy())


def test_metadata_survives_round_trip(model, tmp_path):
    path = tmp_path / "model.ssnr"
    meta = {"seed": 11, "epoch": 3, "config_digest": "ab" * 32}
    save_checkpoint(model, path, meta)
    assert read_checkpoint(path).metadata == meta


def test_file_starts_with_magic_and_version(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path)
    head = path.read_bytes()[:9]
    assert head.startswith(MAGIC)
    assert int.from_bytes(head[5:9], "little") == 1


def test_truncated_file_rejected(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_bad_magic_rejected(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_flipped_payload_byte_rejected(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_version_mismatch_rejected(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[5] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_architecture_mismatch_rejected(model, tmp_path):
    path = tmp_path / "model.ssnr"
    save_checkpoint(model, path)
    with pytest.raises(ArchitectureMismatchError):
        load_checkpoint(path, expected_architecture_id="mlp")


def test_mlp_round_trip(tmp_path):
    mlp = build_model("mlp", (23,), 2, seed=5)
    path = tmp_path / "mlp.ssnr"
    save_checkpoint(mlp, path)
    loaded = load_checkpoint(path, expected_architecture_id="mlp")
    orig, back = mlp.get_parameters(), loaded.get_parameters()
    assert all(np.array_equal(orig[k], back[k]) for k in orig)
