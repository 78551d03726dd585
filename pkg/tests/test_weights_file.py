"""Tests for the VITW weight file codec."""

import struct

import numpy as np
import pytest

from vit_runtime import ModelWeights
from weights_file import (
    HEADER,
    MagicError,
    TruncatedError,
    VersionError,
    WeightShapeError,
    decode_weights,
    encode_weights,
    load_weights,
    save_weights,
)


def _hand_built_blob():
    """1 layer, H=1, d=2, D_mlp=1, grid 1x2, every tensor filled with a distinct constant."""
    dim, mlp = 2, 1
    sizes = [dim, dim, 3 * dim * dim, 3 * dim, dim * dim, dim, dim, dim, mlp * dim, mlp, dim * mlp, dim]
    header = struct.pack("<4s7I", b"VITW", 1, 1, 1, 2, mlp, 1, 2)
    body = b"".join(np.full(n, float(i + 1), dtype="<f4").tobytes() for i, n in enumerate(sizes))
    return header + body


class TestDecode:
    def test_hand_built_file(self):
        w = decode_weights(_hand_built_blob())
        assert (w.num_layers, w.heads, w.head_dim, w.mlp_dim, w.grid) == (1, 1, 2, 1, (1, 2))
        layer = w.layers[0]
        np.testing.assert_array_equal(layer.ln1_gamma, [1.0, 1.0])
        np.testing.assert_array_equal(layer.ln1_beta, [2.0, 2.0])
        np.testing.assert_array_equal(layer.attn.q_weight, np.full((1, 2, 2), 3.0))
        np.testing.assert_array_equal(layer.attn.v_bias, np.full((1, 2), 4.0))
        np.testing.assert_array_equal(layer.attn.o_weight, np.full((1, 2, 2), 5.0))
        np.testing.assert_array_equal(layer.attn.o_bias, [6.0, 6.0])
        np.testing.assert_array_equal(layer.ln2_beta, [8.0, 8.0])
        np.testing.assert_array_equal(layer.fc2_bias, [12.0, 12.0])

    def test_bad_magic(self):
        blob = bytearray(_hand_built_blob())
        blob[:4] = b"VITX"
        with pytest.raises(MagicError):
            decode_weights(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(_hand_built_blob())
        struct.pack_into("<I", blob, 4, 2)
        with pytest.raises(VersionError):
            decode_weights(bytes(blob))

    def test_truncated_body(self):
        with pytest.raises(TruncatedError):
            decode_weights(_hand_built_blob()[:-4])

    def test_truncated_header(self):
        with pytest.raises(TruncatedError):
            decode_weights(b"VITW\x01\x00")

    def test_trailing_bytes(self):
        with pytest.raises(WeightShapeError):
            decode_weights(_hand_built_blob() + b"\x00" * 4)

    def test_zero_dims(self):
        blob = bytearray(_hand_built_blob())
        struct.pack_into("<I", blob, 8, 0)
        with pytest.raises(WeightShapeError):
            decode_weights(bytes(blob))

    def test_half_grid(self):
        blob = bytearray(_hand_built_blob())
        struct.pack_into("<I", blob, HEADER.size - 4, 0)
        with pytest.raises(WeightShapeError):
            decode_weights(bytes(blob))


class TestRoundTrip:
    def test_blob_and_values_identical(self, tmp_path):
        w = ModelWeights.random(num_layers=2, heads=2, head_dim=3, mlp_dim=5, seed=4, grid=(2, 3))
        path = tmp_path / "model.vitw"
        written = save_weights(w, path)
        blob = path.read_bytes()
        assert written == len(blob)
        loaded = load_weights(path)
        assert encode_weights(loaded) == blob
        for a, b in zip(w.layers, loaded.layers):
            np.testing.assert_array_equal(a.attn.k_weight, b.attn.k_weight)
            np.testing.assert_array_equal(a.fc1_weight, b.fc1_weight)
        assert loaded.grid == (2, 3)
