import json
import struct

import numpy as np
import pytest

from src.storage import (FORMAT_VERSION, MAGIC, CheckpointCorruptError, CheckpointIncompatibleError,
                         CheckpointVersionError, MetricsWriter, array_checksum, array_text,
                         checkpoint_path, load_checkpoint, read_metrics, save_checkpoint, text_array)


def sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "ac.actor.l0.W": rng.normal(size=(4, 3)).astype(np.float32),
        "counter": np.array(7, dtype=np.int64),
        "flags": np.array([True, False]),
        "config": text_array("num_envs = 8\nseed = 3\n"),
    }


def test_roundtrip(tmp_path):
    arrays = sample_arrays()
    path = save_checkpoint(checkpoint_path(tmp_path, 3), arrays)
    assert path.name == "ckpt_3.bin"
    loaded = load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for name, value in arrays.items():
        assert loaded[name].dtype == value.dtype, name
        assert np.array_equal(loaded[name], value), name
    assert array_text(loaded["config"]) == "num_envs = 8\nseed = 3\n"
    assert not list(tmp_path.glob("*.tmp"))


def test_same_arrays_same_bytes(tmp_path):
    a = save_checkpoint(tmp_path / "a.bin", sample_arrays())
    b = save_checkpoint(tmp_path / "b.bin", sample_arrays())
    assert a.read_bytes() == b.read_bytes()


def test_checksum_covers_dtype_and_shape():
    x = np.arange(6, dtype=np.float64)
    assert array_checksum(x) == array_checksum(x.copy())
    assert array_checksum(x) != array_checksum(x.reshape(2, 3))
    assert array_checksum(x) != array_checksum(x.astype(np.float32))
    assert len(array_checksum(x)) == 64


def test_version_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.bin", sample_arrays())
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, len(MAGIC), FORMAT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError, match="format version"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint at all, just text")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [4, 30, -1])
def test_truncated_file(tmp_path, keep):
    path = save_checkpoint(tmp_path / "ckpt.bin", sample_arrays())
    data = path.read_bytes()
    path.write_bytes(data[:keep])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_flipped_data_byte(tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.bin", {"w": np.ones(16)})
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointCorruptError, match="checksum mismatch for array 'w'"):
        load_checkpoint(path)


def test_flipped_directory_byte(tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.bin", {"w": np.ones(2)})
    data = bytearray(path.read_bytes())
    _, _, dir_len = struct.unpack_from("<8sIQ", data, 0)
    directory = json.loads(bytes(data[20:20 + dir_len]))
    assert directory[0]["name"] == "w"
    data[25] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointCorruptError, match="directory"):
        load_checkpoint(path)


def test_metrics_writer_and_reader(tmp_path):
    path = tmp_path / "metrics.csv"
    writer = MetricsWriter(path, ["iteration", "reward", "aborted"])
    writer.write({"iteration": 0, "reward": 0.5, "aborted": False})
    writer.write({"iteration": 1, "reward": float("nan"), "aborted": True})
    assert path.read_text().splitlines() == ["iteration,reward,aborted", "0,0.5,0", "1,nan,1"]
    rows = read_metrics(path)
    assert rows[0] == {"iteration": 0.0, "reward": 0.5, "aborted": 0.0}
    assert np.isnan(rows[1]["reward"])


def test_metrics_resume_drops_later_rows(tmp_path):
    path = tmp_path / "metrics.csv"
    writer = MetricsWriter(path, ["iteration", "reward"])
    for i in range(5):
        writer.write({"iteration": i, "reward": float(i)})
    resumed = MetricsWriter(path, ["iteration", "reward"], resume_iteration=2)
    resumed.write({"iteration": 3, "reward": 30.0})
    assert [row["iteration"] for row in read_metrics(path)] == [0.0, 1.0, 2.0, 3.0]
    assert read_metrics(path)[-1]["reward"] == 30.0


def test_metrics_resume_rejects_other_columns(tmp_path):
    path = tmp_path / "metrics.csv"
    MetricsWriter(path, ["iteration", "reward"]).write({"iteration": 0, "reward": 1.0})
    with pytest.raises(CheckpointIncompatibleError):
        MetricsWriter(path, ["iteration", "reward", "wall_time"], resume_iteration=0)


def test_fresh_writer_truncates(tmp_path):
    path = tmp_path / "metrics.csv"
    MetricsWriter(path, ["iteration"]).write({"iteration": 0})
    MetricsWriter(path, ["iteration"])
    assert path.read_text() == "iteration\n"
