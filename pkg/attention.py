"""
attention.py - Exact multi-head self-attention plus masked / sunk variants.

Per head h the block computes softmax(Q_h K_h^T / sqrt(d)) V_h O_h^T and the
heads are summed in head order before the shared output bias is added.
LayerNorm is the caller's job (vit_runtime applies LN1 first).
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

import accountant
from tensor_core import (
    ShapeError,
    as_matrix,
    masked_softmax64,
    matmul64,
    softmax64,
    sunk_softmax64,
)

logger = logging.getLogger(__name__)


class PatternKind(Enum):
    TYPE_I = "type1"
    TYPE_II = "type2"
    CUSTOM = "custom"


class PatternMode(Enum):
    MASK = "mask"   # renormalize over surviving keys
    SINK = "sink"   # zero the masked probabilities, no renormalization


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """
    Per-head projections of one attention block.

    Weights follow the y = x W^T + b convention:
      q_weight, k_weight, v_weight: (H, d, D); biases: (H, d)
      o_weight: (H, D, d), the per-head column block of the output projection
      o_bias: (D,)
    """
    q_weight: np.ndarray
    q_bias: np.ndarray
    k_weight: np.ndarray
    k_bias: np.ndarray
    v_weight: np.ndarray
    v_bias: np.ndarray
    o_weight: np.ndarray
    o_bias: np.ndarray

    def __post_init__(self):
        for name in ("q_weight", "q_bias", "k_weight", "k_bias", "v_weight",
                     "v_bias", "o_weight", "o_bias"):
            value = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            object.__setattr__(self, name, value)
        if self.q_weight.ndim != 3:
            raise ShapeError(f"q_weight must be (H, d, D), got {self.q_weight.shape}")
        heads, head_dim, model_dim = self.q_weight.shape
        if heads * head_dim != model_dim:
            raise ShapeError(f"H*d = {heads}*{head_dim} does not equal D = {model_dim}")
        expected = {
            "q_bias": (heads, head_dim),
            "k_weight": (heads, head_dim, model_dim),
            "k_bias": (heads, head_dim),
            "v_weight": (heads, head_dim, model_dim),
            "v_bias": (heads, head_dim),
            "o_weight": (heads, model_dim, head_dim),
            "o_bias": (model_dim,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} must be {shape}, got {getattr(self, name).shape}")

    @property
    def heads(self):
        return self.q_weight.shape[0]

    @property
    def head_dim(self):
        return self.q_weight.shape[1]

    @property
    def model_dim(self):
        return self.q_weight.shape[2]

    @classmethod
    def from_fused(cls, qkv_weight, qkv_bias, out_weight, out_bias, heads):
        """
        Split a fused (3D x D) QKV projection and a (D x D) output projection.

        Head h of Q occupies rows [h*d, (h+1)*d) of the Q block; the output
        projection is split by column blocks the same way.
        """
        qkv_weight = np.asarray(qkv_weight, dtype=np.float32)
        qkv_bias = np.asarray(qkv_bias, dtype=np.float32)
        out_weight = np.asarray(out_weight, dtype=np.float32)
        model_dim = qkv_weight.shape[1]
        if model_dim % heads:
            raise ShapeError(f"D = {model_dim} is not divisible by H = {heads}")
        head_dim = model_dim // heads
        if qkv_weight.shape != (3 * model_dim, model_dim) or qkv_bias.shape != (3 * model_dim,):
            raise ShapeError(f"fused QKV must be ({3 * model_dim}, {model_dim})")
        if out_weight.shape != (model_dim, model_dim):
            raise ShapeError(f"out projection must be ({model_dim}, {model_dim})")
        w = qkv_weight.reshape(3, heads, head_dim, model_dim)
        b = qkv_bias.reshape(3, heads, head_dim)
        o = out_weight.reshape(model_dim, heads, head_dim).transpose(1, 0, 2)
        return cls(w[0], b[0], w[1], b[1], w[2], b[2], o, out_bias)

    def fused(self):
        """Inverse of from_fused: (qkv_weight, qkv_bias, out_weight, out_bias)."""
        dim = self.model_dim
        qkv_weight = np.concatenate(
            [self.q_weight.reshape(dim, dim), self.k_weight.reshape(dim, dim),
             self.v_weight.reshape(dim, dim)])
        qkv_bias = np.concatenate(
            [self.q_bias.reshape(dim), self.k_bias.reshape(dim), self.v_bias.reshape(dim)])
        out_weight = self.o_weight.transpose(1, 0, 2).reshape(dim, dim)
        return qkv_weight, qkv_bias, np.ascontiguousarray(out_weight), self.o_bias.copy()

    @classmethod
    def random(cls, heads, head_dim, seed, scale=None):
        """Gaussian weights with std `scale` (default 1/sqrt(D)), zero biases on q/k."""
        dim = heads * head_dim
        scale = 1.0 / math.sqrt(dim) if scale is None else scale
        rng = np.random.Generator(np.random.Philox(seed))

        def draw(*shape):
            return rng.standard_normal(shape) * scale

        return cls(
            draw(heads, head_dim, dim), np.zeros((heads, head_dim)),
            draw(heads, head_dim, dim), np.zeros((heads, head_dim)),
            draw(heads, head_dim, dim), draw(heads, head_dim),
            draw(heads, dim, head_dim), draw(dim),
        )


@dataclass(frozen=True, eq=False)
class MaskPattern:
    """
    (N+1) x (N+1) key-visibility pattern over an interest set T.

    TYPE_I:  bits[i][j] = j not in T            (nobody attends to T)
    TYPE_II: bits[i][j] = i == j or j not in T  (only t attends to t)
    CUSTOM:  explicit bits
    """
    kind: PatternKind
    size: int
    interest: frozenset = field(default_factory=frozenset)
    custom_bits: np.ndarray = None

    def __post_init__(self):
        interest = frozenset(int(t) for t in self.interest)
        object.__setattr__(self, "interest", interest)
        if 0 in interest:
            raise ValueError("CLS (index 0) cannot be in the interest set")
        bad = [t for t in interest if not 0 < t < self.size]
        if bad:
            raise ValueError(f"interest indices {sorted(bad)} outside [1, {self.size - 1}]")
        if self.kind is PatternKind.CUSTOM:
            bits = np.asarray(self.custom_bits, dtype=bool)
            if bits.shape != (self.size, self.size):
                raise ShapeError(f"custom bits must be {self.size}x{self.size}, got {bits.shape}")
            object.__setattr__(self, "custom_bits", bits)

    @classmethod
    def type_one(cls, interest, size):
        return cls(PatternKind.TYPE_I, size, frozenset(interest))

    @classmethod
    def type_two(cls, interest, size):
        return cls(PatternKind.TYPE_II, size, frozenset(interest))

    @classmethod
    def custom(cls, bits, interest=()):
        bits = np.asarray(bits, dtype=bool)
        return cls(PatternKind.CUSTOM, bits.shape[0], frozenset(interest), bits)

    @classmethod
    def full(cls, size):
        """All-true pattern (Type I over the empty set)."""
        return cls.type_one((), size)

    @property
    def bits(self):
        if self.kind is PatternKind.CUSTOM:
            return self.custom_bits.copy()
        hidden = np.zeros(self.size, dtype=bool)
        hidden[list(self.interest)] = True
        bits = np.broadcast_to(~hidden, (self.size, self.size)).copy()
        if self.kind is PatternKind.TYPE_II:
            np.fill_diagonal(bits, True)
        return bits

    def complement(self):
        """CUSTOM pattern with every bit flipped."""
        return MaskPattern.custom(~self.bits)


# =============================================================================
# PIPELINE
# =============================================================================

def _check_input(x, p):
    x = as_matrix(x, "x")
    if x.shape[1] != p.model_dim:
        raise ShapeError(f"x has {x.shape[1]} columns, attention expects D = {p.model_dim}")
    return x.astype(np.float64)


def project(x64, weight, bias):
    """x W^T + b for one head's (d, D) weight, in float64."""
    return matmul64(x64, weight.T) + bias


def _logits(x64, p, h, buf):
    q = buf.hold(project(x64, p.q_weight[h], p.q_bias[h]))
    q *= 1.0 / math.sqrt(p.head_dim)
    k = buf.hold(project(x64, p.k_weight[h], p.k_bias[h]))
    return buf.hold(matmul64(q, k.T))


def _weights_fn(pattern, mode, size):
    if pattern is None:
        return lambda logits: softmax64(logits, inplace=True)
    if pattern.size != size:
        raise ShapeError(f"pattern size {pattern.size} does not match {size} tokens")
    bits = pattern.bits
    if mode is PatternMode.MASK:
        return lambda logits: masked_softmax64(logits, bits)
    if mode is PatternMode.SINK:
        return lambda logits: sunk_softmax64(logits, bits)
    raise ValueError(f"unknown pattern mode {mode!r}")


def _multi_head(x, p, weights_fn):
    x64 = _check_input(x, p)
    out = np.zeros((x64.shape[0], p.model_dim))
    for h in range(p.heads):
        with accountant.scratch() as buf:
            logits = _logits(x64, p, h, buf)
            probs = weights_fn(logits)
            if probs is not logits:
                buf.hold(probs)
            v = buf.hold(project(x64, p.v_weight[h], p.v_bias[h]))
            head = buf.hold(matmul64(probs, v))
            out += matmul64(head, p.o_weight[h].T)
    out += p.o_bias
    return out


def exact_mha(x, p):
    """
    Exact multi-head self-attention.

    Args:
        x: (N+1, D) layer-normed token matrix, CLS in row 0
        p: AttentionParams

    Returns:
        (N+1, D) float32 matrix O_bias + sum_h softmax(Q_h K_h^T/sqrt(d)) V_h O_h^T
    """
    return _multi_head(x, p, _weights_fn(None, None, None)).astype(np.float32)


def mha_with_pattern(x, p, pattern, mode):
    """
    exact_mha with the softmax swapped for masking (renormalized) or sinking.

    Raises:
        ShapeError: pattern size differs from the token count
        DegenerateMaskError: a mask-mode row has no visible key
    """
    x = as_matrix(x, "x")
    fn = _weights_fn(pattern, PatternMode(mode), x.shape[0])
    return _multi_head(x, p, fn).astype(np.float32)


def attention_probs64(x, p, h, pattern=None, mode=PatternMode.MASK):
    """Head h's attention matrix in float64."""
    x64 = _check_input(x, p)
    with accountant.scratch() as buf:
        logits = _logits(x64, p, h, buf)
        return _weights_fn(pattern, PatternMode(mode), x64.shape[0])(logits)


def mean_attention_matrix(x, p, pattern=None, mode=PatternMode.MASK):
    """
    Mean over heads of the attention matrices (rows sum to 1 without a pattern
    or in mask mode).
    """
    x = as_matrix(x, "x")
    total = np.zeros((x.shape[0], x.shape[0]))
    for h in range(p.heads):
        total += attention_probs64(x, p, h, pattern, mode)
    return (total / p.heads).astype(np.float32)
