import io
import struct

import pytest
import torch

from madformer.errors import CheckpointError, NotFoundError
from madformer.infrastructure.checkpoint_store import (
    MAGIC,
    LocalCheckpointStore,
    read_checkpoint,
    write_checkpoint,
)
from madformer.ports import Checkpoint

DIGEST = "ab" * 32


@pytest.fixture
def checkpoint() -> Checkpoint:
    generator = torch.Generator().manual_seed(0)
    return Checkpoint(
        step=7,
        config_digest=DIGEST,
        metadata={"rows": 7, "note": "warm"},
        tensors={
            "model": {
                "layers.0.weight": torch.randn(3, 4, generator=generator),
                "scale": torch.tensor(2.5),
            },
            "ema": {"layers.0.weight": torch.randn(3, 4, generator=generator)},
        },
    )


def _encoded(checkpoint: Checkpoint) -> bytes:
    stream = io.BytesIO()
    write_checkpoint(stream, checkpoint)
    return stream.getvalue()


def test_save_and_load_restores_every_tensor(tmp_path, checkpoint):
    store = LocalCheckpointStore(tmp_path / "ckpt")

    store.save("step-000007", checkpoint)
    loaded = store.load("step-000007")

    assert loaded.step == 7
    assert loaded.config_digest == DIGEST
    assert loaded.metadata == checkpoint.metadata
    for group, table in checkpoint.tensors.items():
        for name, tensor in table.items():
            assert torch.equal(loaded.tensors[group][name], tensor)
    assert loaded.tensors["model"]["scale"].shape == ()


def test_header_starts_with_magic_and_version(checkpoint):
    data = _encoded(checkpoint)

    assert data[:4] == MAGIC == b"MADF"
    assert struct.unpack("<I", data[4:8]) == (1,)
    assert data[8:72].decode("ascii") == DIGEST
    assert struct.unpack("<Q", data[72:80]) == (7,)


def test_labels_are_sorted_and_latest_picks_the_last_step(tmp_path, checkpoint):
    store = LocalCheckpointStore(tmp_path)
    for label in ("step-000010", "nonfinite-step-000011", "step-000002"):
        store.save(label, checkpoint)

    assert store.labels() == ["nonfinite-step-000011", "step-000002", "step-000010"]
    assert store.latest() == "step-000010"


def test_empty_store_has_no_labels(tmp_path):
    store = LocalCheckpointStore(tmp_path / "missing")

    assert store.labels() == []
    assert store.latest() is None


def test_missing_label_is_not_found(tmp_path):
    with pytest.raises(NotFoundError):
        LocalCheckpointStore(tmp_path).load("step-000001")


def test_wrong_magic_is_rejected(checkpoint):
    data = b"NOPE" + _encoded(checkpoint)[4:]

    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(io.BytesIO(data))


@pytest.mark.parametrize("cut", [3, 40, 90, -1])
def test_truncated_file_is_rejected(checkpoint, cut):
    data = _encoded(checkpoint)[:cut]

    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(data))


def test_short_digest_cannot_be_written(checkpoint):
    checkpoint.config_digest = "abc"

    with pytest.raises(CheckpointError):
        _encoded(checkpoint)


def test_non_ascii_digest_is_rejected(checkpoint):
    data = bytearray(_encoded(checkpoint))
    data[8] = 0xFF

    with pytest.raises(CheckpointError, match="digest"):
        read_checkpoint(io.BytesIO(bytes(data)))


def test_undecodable_tensor_name_is_rejected(checkpoint):
    data = bytearray(_encoded(checkpoint))
    (meta_len,) = struct.unpack("<I", data[80:84])
    # u32 tensor count, then u16 name length, then the first name byte
    data[84 + meta_len + 4 + 2] = 0xFF

    with pytest.raises(CheckpointError, match="tensor name"):
        read_checkpoint(io.BytesIO(bytes(data)))


def test_delete_removes_one_label(tmp_path, checkpoint):
    store = LocalCheckpointStore(tmp_path)
    store.save("step-000002", checkpoint)
    store.save("step-000004", checkpoint)

    store.delete("step-000002")

    assert store.labels() == ["step-000004"]


def test_deleting_a_missing_label_is_not_an_error(tmp_path):
    store = LocalCheckpointStore(tmp_path / "missing")

    store.delete("step-000001")

    assert store.labels() == []
