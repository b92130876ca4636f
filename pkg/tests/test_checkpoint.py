import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from scvae import checkpoint, container
from scvae.checkpoint import ArchitectureMismatchError
from scvae.container import BadMagicError, ChecksumError, LayoutError, TruncatedError, VersionError
from scvae.models import build, param_count
from scvae.vae import score_windows


@pytest.fixture(scope="module")
def model():
    m = build("SCVAE", 8, 5, latent_dim=6, seed=11)
    rng = np.random.default_rng(0)
    for s in m.bn.values():
        s.running_mean = rng.standard_normal(s.running_mean.shape)
        s.running_var = np.exp(rng.standard_normal(s.running_var.shape))
    return m


def test_layout_header(model):
    data = checkpoint.to_bytes(model)
    assert data[:4] == b"SCVZ"
    assert struct.unpack("<H", data[4:6])[0] == 1
    (n,) = struct.unpack("<I", data[6:10])
    assert data[10 : 10 + n].decode() == model.arch.describe()
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_size_is_deterministic_and_counts_floats(model):
    a, b = checkpoint.to_bytes(model), checkpoint.to_bytes(model)
    assert a == b
    n_floats = param_count(model) + sum(v.size for v in model.buffers().values())
    assert len(a) > 4 * n_floats
    assert checkpoint.serialized_size(model) == len(a)


def test_round_trip_scores_bit_identical(model, tmp_path):
    path = tmp_path / "m.scvz"
    checkpoint.save_checkpoint(model, path)
    loaded = checkpoint.load_checkpoint(path, expected="SCVAE")
    w = np.random.default_rng(1).standard_normal((12, 8, 5))
    # scoring runs at float32, the storage precision, so nothing is lost
    assert score_windows(loaded, w).tobytes() == score_windows(model, w).tobytes()
    # and at float64 the loaded model equals the float32-rounded original
    rounded = model.copy()
    rounded.params = {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()}
    for s in rounded.bn.values():
        s.running_mean = s.running_mean.astype(np.float32).astype(np.float64)
        s.running_var = s.running_var.astype(np.float32).astype(np.float64)
    a = score_windows(loaded, w, dtype=np.float64)
    assert a.tobytes() == score_windows(rounded, w, dtype=np.float64).tobytes()
    # a second round trip is exact
    again = checkpoint.from_bytes(checkpoint.to_bytes(loaded))
    assert score_windows(again, w).tobytes() == score_windows(loaded, w).tobytes()
    assert checkpoint.to_bytes(again) == path.read_bytes()


def test_corrupted_payload_byte_rejected(model):
    data = bytearray(checkpoint.to_bytes(model))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        checkpoint.from_bytes(bytes(data))


def test_bad_magic(model):
    data = b"XXXX" + checkpoint.to_bytes(model)[4:]
    with pytest.raises(BadMagicError):
        checkpoint.from_bytes(data)


def test_bad_version(model):
    data = bytearray(checkpoint.to_bytes(model))
    data[4:6] = struct.pack("<H", 7)
    with pytest.raises(VersionError):
        checkpoint.from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [3, 9, 40, -1, -5])
def test_truncated(model, cut):
    data = checkpoint.to_bytes(model)
    with pytest.raises(TruncatedError):
        checkpoint.from_bytes(data[:cut])


def test_trailing_garbage(model):
    with pytest.raises(LayoutError):
        checkpoint.from_bytes(checkpoint.to_bytes(model) + b"\0")


def test_architecture_mismatch(tmp_path):
    cnn = build("CNN_VAE", 4, 3, latent_dim=2)
    path = tmp_path / "c.scvz"
    checkpoint.save_checkpoint(cnn, path)
    with pytest.raises(ArchitectureMismatchError, match="expected SCVAE"):
        checkpoint.load_checkpoint(path, expected="SCVAE")


def test_descriptor_tensor_inconsistency(model):
    # a valid container whose tensor table disagrees with the descriptor
    tensors = [(k, v.astype(np.float32)) for k, v in model.params.items()][:-1]
    data = container.pack(b"SCVZ", 1, model.arch.describe(), tensors)
    with pytest.raises(ArchitectureMismatchError, match="missing"):
        checkpoint.from_bytes(data)
    bad_desc = model.arch.describe().replace("outputs=16", "outputs=15", 1)
    data = container.pack(b"SCVZ", 1, bad_desc, [(k, v.astype(np.float32)) for k, v in model.params.items()])
    with pytest.raises(ArchitectureMismatchError, match="layer listing"):
        checkpoint.from_bytes(data)


@given(
    tensors=st.lists(
        st.tuples(
            st.text(min_size=1, max_size=8),
            arrays(st.sampled_from([np.float32, np.float64, np.uint8, np.int64]),
                   st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple)),
        ),
        max_size=4,
        unique_by=lambda t: t[0],
    ),
    descriptor=st.text(max_size=40),
)
def test_container_round_trip(tensors, descriptor):
    data = container.pack(b"TEST", 3, descriptor, tensors)
    text, out = container.unpack(data, b"TEST", 3)
    assert text == descriptor
    assert list(out) == [n for n, _ in tensors]
    for name, arr in tensors:
        assert out[name].dtype == arr.dtype and out[name].shape == arr.shape
        assert out[name].tobytes() == arr.tobytes()


def test_container_rejects_unsupported_dtype():
    with pytest.raises(container.ContainerError):
        container.pack(b"TEST", 1, "", [("c", np.zeros(2, dtype=np.complex128))])
