"""
weights_file.py - VITW weight file codec.

Layout (little-endian, no padding):
  "VITW" | u32 version=1 | u32 L, H, d, D_mlp, g_h, g_w
  then per layer:
    LN1 gamma (D), beta (D)
    fused QKV weight (3D x D) row-major, bias (3D)
    out-proj weight (D x D), bias (D)
    LN2 gamma (D), beta (D)
    fc1 weight (D_mlp x D), bias (D_mlp)
    fc2 weight (D x D_mlp), bias (D)
  all float32. g_h = g_w = 0 means no patch grid.
"""

import logging
import struct

import numpy as np

from attention import AttentionParams
from vit_runtime import LayerWeights, ModelWeights

logger = logging.getLogger(__name__)

MAGIC = b"VITW"
VERSION = 1
HEADER = struct.Struct("<4s7I")
FLOAT = np.dtype("<f4")


class WeightFileError(ValueError):
    """Base class for unreadable VITW files."""


class MagicError(WeightFileError):
    """File does not start with b'VITW'."""


class VersionError(WeightFileError):
    """Unsupported format version."""


class TruncatedError(WeightFileError):
    """File ends before the declared tensors do."""


class WeightShapeError(WeightFileError):
    """Header dims are inconsistent, or bytes follow the last tensor."""


def _layer_shapes(dim, mlp_dim):
    return [
        ("ln1_gamma", (dim,)), ("ln1_beta", (dim,)),
        ("qkv_weight", (3 * dim, dim)), ("qkv_bias", (3 * dim,)),
        ("out_weight", (dim, dim)), ("out_bias", (dim,)),
        ("ln2_gamma", (dim,)), ("ln2_beta", (dim,)),
        ("fc1_weight", (mlp_dim, dim)), ("fc1_bias", (mlp_dim,)),
        ("fc2_weight", (dim, mlp_dim)), ("fc2_bias", (dim,)),
    ]


def encode_weights(w):
    """Serialize ModelWeights to VITW bytes."""
    g_h, g_w = w.grid if w.grid is not None else (0, 0)
    parts = [HEADER.pack(MAGIC, VERSION, w.num_layers, w.heads, w.head_dim, w.mlp_dim, g_h, g_w)]
    for lw in w.layers:
        qkv_weight, qkv_bias, out_weight, out_bias = lw.attn.fused()
        tensors = {
            "ln1_gamma": lw.ln1_gamma, "ln1_beta": lw.ln1_beta,
            "qkv_weight": qkv_weight, "qkv_bias": qkv_bias,
            "out_weight": out_weight, "out_bias": out_bias,
            "ln2_gamma": lw.ln2_gamma, "ln2_beta": lw.ln2_beta,
            "fc1_weight": lw.fc1_weight, "fc1_bias": lw.fc1_bias,
            "fc2_weight": lw.fc2_weight, "fc2_bias": lw.fc2_bias,
        }
        for name, _ in _layer_shapes(w.model_dim, w.mlp_dim):
            parts.append(np.ascontiguousarray(tensors[name], dtype=FLOAT).tobytes())
    return b"".join(parts)


def decode_weights(blob):
    """
    Parse VITW bytes into ModelWeights.

    Raises:
        MagicError, VersionError, TruncatedError, WeightShapeError
    """
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise MagicError(f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}")
    if len(blob) < HEADER.size:
        raise TruncatedError(f"header needs {HEADER.size} bytes, file has {len(blob)}")
    _, version, num_layers, heads, head_dim, mlp_dim, g_h, g_w = HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionError(f"unsupported VITW version {version} (expected {VERSION})")
    if min(num_layers, heads, head_dim, mlp_dim) == 0:
        raise WeightShapeError(
            f"L, H, d, D_mlp must be positive, got {num_layers}, {heads}, {head_dim}, {mlp_dim}")
    if (g_h == 0) != (g_w == 0):
        raise WeightShapeError(f"grid dims must both be zero or both positive, got {g_h}x{g_w}")

    dim = heads * head_dim
    shapes = _layer_shapes(dim, mlp_dim)
    per_layer = sum(int(np.prod(shape)) for _, shape in shapes)
    expected = HEADER.size + num_layers * per_layer * FLOAT.itemsize
    if len(blob) < expected:
        raise TruncatedError(f"file has {len(blob)} bytes, header declares {expected}")
    if len(blob) > expected:
        raise WeightShapeError(f"{len(blob) - expected} trailing bytes after the last layer")

    values = np.frombuffer(blob, dtype=FLOAT, offset=HEADER.size).astype(np.float32)
    offset = 0
    layers = []
    for _ in range(num_layers):
        t = {}
        for name, shape in shapes:
            count = int(np.prod(shape))
            t[name] = values[offset:offset + count].reshape(shape)
            offset += count
        attn = AttentionParams.from_fused(
            t["qkv_weight"], t["qkv_bias"], t["out_weight"], t["out_bias"], heads)
        layers.append(LayerWeights(
            t["ln1_gamma"], t["ln1_beta"], attn, t["ln2_gamma"], t["ln2_beta"],
            t["fc1_weight"], t["fc1_bias"], t["fc2_weight"], t["fc2_bias"]))
    grid = (g_h, g_w) if g_h else None
    return ModelWeights(tuple(layers), grid)


def load_weights(path):
    """Read a VITW file from disk."""
    with open(path, "rb") as f:
        blob = f.read()
    w = decode_weights(blob)
    logger.info("Loaded %s: L=%d H=%d d=%d D_mlp=%d grid=%s",
                path, w.num_layers, w.heads, w.head_dim, w.mlp_dim, w.grid)
    return w


def save_weights(w, path):
    """Write ModelWeights to disk as VITW; returns the byte count."""
    blob = encode_weights(w)
    with open(path, "wb") as f:
        f.write(blob)
    logger.info("Saved %d bytes of weights to %s", len(blob), path)
    return len(blob)
