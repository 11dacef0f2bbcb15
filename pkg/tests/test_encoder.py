import struct

import numpy as np
import pytest

from envspoof.encoder import (EncoderSpec, IndexedStacks, LayerStack, StubEncoder, encode,
                              encode_stub, read_index, read_layerstack, write_layerstack)
from envspoof.errors import DimensionError, FormatError, ParameterError
from envspoof.features import MelSpec, NormStats

SPEC = EncoderSpec(dim=16, seed=3)


def _mel(seed=0):
    return MelSpec(np.random.default_rng(seed).normal(size=(1024, 128)), normalized=True)


def test_stub_shapes_and_determinism():
    mel = _mel()
    a, b = encode_stub(SPEC, mel), encode_stub(SPEC, mel)
    assert a.layers.shape == (12, 512, 16)
    assert a.layers.dtype == np.float32
    np.testing.assert_array_equal(a.layers, b.layers)
    assert np.all(np.abs(a.layers) < 1)


def test_stub_zero_input_propagates():
    out = encode_stub(SPEC, MelSpec(np.zeros((1024, 128)), True))
    assert not out.layers.any()


def test_stub_sensitivity_and_seed():
    mel = _mel()
    other = MelSpec(mel.frames.copy(), True)
    other.frames[100] += 1.0
    assert not np.array_equal(encode_stub(SPEC, mel).layers, encode_stub(SPEC, other).layers)
    reseeded = EncoderSpec(dim=16, seed=4)
    assert not np.array_equal(encode_stub(SPEC, mel).layers, encode_stub(reseeded, mel).layers)


def test_stub_layers_differ():
    layers = encode_stub(SPEC, _mel()).layers
    for i in range(11):
        assert not np.allclose(layers[i], layers[i + 1])


def test_stub_wrong_shape():
    with pytest.raises(DimensionError):
        StubEncoder(SPEC)(MelSpec(np.zeros((998, 128)), True))


def test_layer_indexing():
    stack = encode_stub(SPEC, _mel())
    np.testing.assert_array_equal(stack.layer(1), stack.layers[0])
    np.testing.assert_array_equal(stack.layer(12), stack.layers[11])
    with pytest.raises(ParameterError):
        stack.layer(0)


def test_layerstack_round_trip(tmp_path):
    stack = encode_stub(SPEC, _mel())
    write_layerstack(stack, tmp_path / "a.lstk")
    back = read_layerstack(tmp_path / "a.lstk")
    assert back.layers.tobytes() == stack.layers.tobytes()
    raw = (tmp_path / "a.lstk").read_bytes()
    assert raw[:4] == b"LSTK"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 12, 512, 16)
    assert len(raw) == 20 + 12 * 512 * 16 * 4


def test_layerstack_corruption(tmp_path):
    stack = LayerStack(np.ones((12, 4, 3), np.float32))
    path = tmp_path / "a.lstk"
    write_layerstack(stack, path)
    raw = path.read_bytes()
    (tmp_path / "magic.lstk").write_bytes(b"XSTK" + raw[4:])
    with pytest.raises(FormatError):
        read_layerstack(tmp_path / "magic.lstk")
    (tmp_path / "ver.lstk").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError):
        read_layerstack(tmp_path / "ver.lstk")
    (tmp_path / "huge.lstk").write_bytes(raw[:8] + struct.pack("<III", 2 ** 31, 2 ** 31, 2 ** 31))
    with pytest.raises(FormatError):
        read_layerstack(tmp_path / "huge.lstk")
    # header says 12 layers, payload holds 11
    (tmp_path / "short.lstk").write_bytes(raw[: 20 + 11 * 4 * 3 * 4])
    with pytest.raises(OSError):
        read_layerstack(tmp_path / "short.lstk")


def _features(tmp_path, ids):
    paths = {}
    for i, t in enumerate(ids):
        p = tmp_path / f"{t}.npy"
        np.save(p, np.random.default_rng(i).normal(size=(998, 128)))
        paths[t] = p
    return paths


def test_encode_writes_index(tmp_path):
    ids = ["a", "b", "c"]
    feats = _features(tmp_path, ids)
    stats = NormStats(0.0, 1.0)
    index = encode(ids, SPEC, tmp_path / "emb", features=feats, stats=stats)
    rows = read_index(index)
    assert list(rows) == ids
    first = {p.name: p.read_bytes() for p in (tmp_path / "emb").iterdir()}
    assert len(first) == 4
    encode(ids, SPEC, tmp_path / "emb", features=feats, stats=stats, threads=2)
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "emb").iterdir()}
    src = IndexedStacks(index)
    assert src("b").layers.shape == (12, 512, 16)


def test_encode_empty_and_missing(tmp_path):
    index = encode([], SPEC, tmp_path / "e", features={}, stats=NormStats(0.0, 1.0))
    assert index.read_text() == ""
    with pytest.raises(OSError, match="zz"):
        encode(["zz"], SPEC, tmp_path / "e", features={}, stats=NormStats(0.0, 1.0))


def test_encode_from_external_files(tmp_path):
    ext = tmp_path / "ext"
    ext.mkdir()
    write_layerstack(LayerStack(np.ones((12, 5, 4), np.float32)), ext / "t1.lstk")
    index = encode(["t1"], EncoderSpec(kind="file"), tmp_path / "out", source_dir=ext)
    assert IndexedStacks(index)("t1").layers.shape == (12, 5, 4)
    with pytest.raises(OSError):
        encode(["t2"], EncoderSpec(kind="file"), tmp_path / "out", source_dir=ext)
