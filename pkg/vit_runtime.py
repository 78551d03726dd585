"""
vit_runtime.py - Minimal pre-LN vision transformer over token embeddings.

Each layer computes
    Emb^(l+1/2) = Emb^(l) + Attn(LN1(Emb^(l)))
    Emb^(l+1)   = Emb^(l+1/2) + MLP(LN2(Emb^(l+1/2)))
with MLP = fc2(gelu(fc1(.))). CLS is row 0. Individual layers can swap the
attention sub-block for FNA, a masked / sunk pattern, or nothing at all.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from attention import AttentionParams, PatternMode, exact_mha, mean_attention_matrix, mha_with_pattern
from nystrom import LandmarkKind, SamplerSpec, fna_attention, sample_landmarks
from tensor_core import ShapeError, as_matrix, gelu64, layer_norm, layer_norm64, matmul64, row_norms

logger = logging.getLogger(__name__)


class OverrideError(ValueError):
    """A layer override is out of range, duplicated, or cannot be satisfied."""


# =============================================================================
# WEIGHTS
# =============================================================================

def _f32(value):
    return np.ascontiguousarray(value, dtype=np.float32)


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """LN1, attention, LN2 and MLP parameters of one block."""
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn: AttentionParams
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1_weight: np.ndarray   # (D_mlp, D)
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray   # (D, D_mlp)
    fc2_bias: np.ndarray

    def __post_init__(self):
        for name in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
                     "fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias"):
            object.__setattr__(self, name, _f32(getattr(self, name)))
        dim = self.attn.model_dim
        mlp_dim = self.fc1_weight.shape[0]
        expected = {
            "ln1_gamma": (dim,), "ln1_beta": (dim,),
            "ln2_gamma": (dim,), "ln2_beta": (dim,),
            "fc1_weight": (mlp_dim, dim), "fc1_bias": (mlp_dim,),
            "fc2_weight": (dim, mlp_dim), "fc2_bias": (dim,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} must be {shape}, got {getattr(self, name).shape}")

    @property
    def mlp_dim(self):
        return self.fc1_weight.shape[0]


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """All layers of a model plus the optional patch grid (g_h, g_w)."""
    layers: tuple
    grid: tuple = None

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ShapeError("a model needs at least one layer")
        first = layers[0]
        dims = (first.attn.heads, first.attn.head_dim, first.mlp_dim)
        for i, layer in enumerate(layers):
            if (layer.attn.heads, layer.attn.head_dim, layer.mlp_dim) != dims:
                raise ShapeError(f"layer {i} dims disagree with layer 0 {dims}")
        if self.grid is not None:
            g_h, g_w = (int(v) for v in self.grid)
            if g_h <= 0 or g_w <= 0:
                raise ShapeError(f"grid dims must be positive, got {self.grid}")
            object.__setattr__(self, "grid", (g_h, g_w))

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def heads(self):
        return self.layers[0].attn.heads

    @property
    def head_dim(self):
        return self.layers[0].attn.head_dim

    @property
    def model_dim(self):
        return self.layers[0].attn.model_dim

    @property
    def mlp_dim(self):
        return self.layers[0].mlp_dim

    @classmethod
    def random(cls, num_layers, heads, head_dim, mlp_dim, seed, grid=None):
        """Gaussian weights scaled by 1/sqrt(fan_in); LN starts at identity."""
        rng = np.random.Generator(np.random.Philox(seed))
        dim = heads * head_dim
        layers = []
        for i in range(num_layers):
            layers.append(LayerWeights(
                ln1_gamma=1.0 + 0.1 * rng.standard_normal(dim),
                ln1_beta=0.1 * rng.standard_normal(dim),
                attn=AttentionParams.random(heads, head_dim, seed=int(rng.integers(2 ** 32))),
                ln2_gamma=1.0 + 0.1 * rng.standard_normal(dim),
                ln2_beta=0.1 * rng.standard_normal(dim),
                fc1_weight=rng.standard_normal((mlp_dim, dim)) / np.sqrt(dim),
                fc1_bias=0.1 * rng.standard_normal(mlp_dim),
                fc2_weight=rng.standard_normal((dim, mlp_dim)) / np.sqrt(mlp_dim),
                fc2_bias=0.1 * rng.standard_normal(dim),
            ))
        return cls(tuple(layers), grid)


# =============================================================================
# OVERRIDES
# =============================================================================

class OverrideKind(Enum):
    STANDARD = "standard"
    FNA = "fna"
    MASKED = "masked"
    SKIP_ATTENTION = "skip"


@dataclass(frozen=True, eq=False)
class LayerOverride:
    """
    Replacement for one layer's attention sub-block.

    An FNA override with neither `sampler` nor `landmarks` reuses the index
    landmarks of the most recent FNA layer in the same pass.
    """
    layer: int
    kind: OverrideKind = OverrideKind.STANDARD
    sampler: SamplerSpec = None
    landmarks: object = None
    pattern: object = None
    mode: PatternMode = PatternMode.MASK
    massive: frozenset = frozenset()
    artifact: frozenset = frozenset()

    @classmethod
    def standard(cls, layer):
        return cls(layer)

    @classmethod
    def fna(cls, layer, sampler=None, landmarks=None, massive=(), artifact=()):
        return cls(layer, OverrideKind.FNA, sampler=sampler, landmarks=landmarks,
                   massive=frozenset(massive), artifact=frozenset(artifact))

    @classmethod
    def masked(cls, layer, pattern, mode=PatternMode.MASK):
        return cls(layer, OverrideKind.MASKED, pattern=pattern, mode=PatternMode(mode))

    @classmethod
    def skip(cls, layer):
        return cls(layer, OverrideKind.SKIP_ATTENTION)

    @property
    def reuses_landmarks(self):
        return self.kind is OverrideKind.FNA and self.sampler is None and self.landmarks is None


def fna_overrides(w, spec, start_layer, resample=False, massive=(), artifact=()):
    """
    FNA on every layer from start_layer on. Without resample, landmarks are
    sampled once at start_layer and reused by index in later layers.
    """
    overrides = []
    for layer in range(start_layer, w.num_layers):
        if resample or layer == start_layer:
            overrides.append(LayerOverride.fna(layer, sampler=spec, massive=massive, artifact=artifact))
        else:
            overrides.append(LayerOverride.fna(layer))
    return overrides


def masked_overrides(layers, pattern, mode=PatternMode.MASK):
    """The same pattern applied to each layer in `layers`."""
    return [LayerOverride.masked(layer, pattern, mode) for layer in layers]


# =============================================================================
# TRACE
# =============================================================================

@dataclass(frozen=True)
class TraceOptions:
    block_outputs: bool = True
    mid_outputs: bool = False
    attention_layers: frozenset = frozenset()


@dataclass
class RunTrace:
    """
    Per-layer record keyed by layer index: block_outputs[l] is the output of
    layer l, mid_outputs[l] the post-attention residual, attention[l] the mean
    attention matrix, norms[l] the row norms of block_outputs[l].
    """
    block_outputs: dict = field(default_factory=dict)
    mid_outputs: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    landmarks: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "norms": {str(k): v.tolist() for k, v in sorted(self.norms.items())},
            "attention": {str(k): v.tolist() for k, v in sorted(self.attention.items())},
            "landmarks": {str(k): v.to_dict() for k, v in sorted(self.landmarks.items())},
        }


# =============================================================================
# FORWARD
# =============================================================================

def _index_overrides(overrides, num_layers):
    by_layer = {}
    for ov in overrides:
        if not 0 <= ov.layer < num_layers:
            raise OverrideError(f"override layer {ov.layer} outside [0, {num_layers})")
        if ov.layer in by_layer:
            raise OverrideError(f"more than one override for layer {ov.layer}")
        by_layer[ov.layer] = ov
    return by_layer


def _fna_landmarks(ov, x, h, layer, carried):
    if ov.sampler is not None:
        feats = h if ov.sampler.strategy.aggregates else x
        return sample_landmarks(feats, ov.sampler, ov.massive, ov.artifact, source_layer=layer)
    if ov.landmarks is not None:
        return ov.landmarks
    if carried is None:
        raise OverrideError(f"layer {layer}: no earlier landmarks to reuse")
    if carried.kind is not LandmarkKind.INDICES:
        raise OverrideError(f"layer {layer}: aggregate landmarks must be recomputed per layer")
    return carried


def _mlp(x_mid, lw):
    h = layer_norm64(x_mid, lw.ln2_gamma, lw.ln2_beta)
    hidden = gelu64(matmul64(h, lw.fc1_weight.T) + lw.fc1_bias)
    return (matmul64(hidden, lw.fc2_weight.T) + lw.fc2_bias).astype(np.float32)


def forward(x0, w, overrides=(), capture=None, start_layer=0, stop_layer=None):
    """
    Run layers [start_layer, stop_layer) over the token matrix.

    Args:
        x0: (N+1, D) input to start_layer (Emb^(start_layer))
        w: ModelWeights
        overrides: LayerOverride list, at most one per layer
        capture: TraceOptions (defaults to block outputs only)
        start_layer, stop_layer: layer range, default the whole model

    Returns:
        (final (N+1, D) float32 matrix, RunTrace)

    Raises:
        OverrideError: an override is out of range, duplicated, or reuses
            landmarks that do not exist
    """
    capture = capture or TraceOptions()
    stop_layer = w.num_layers if stop_layer is None else stop_layer
    if not 0 <= start_layer <= stop_layer <= w.num_layers:
        raise OverrideError(f"layer range [{start_layer}, {stop_layer}) outside [0, {w.num_layers}]")
    by_layer = _index_overrides(overrides, w.num_layers)
    x = as_matrix(x0, "x0")
    if x.shape[1] != w.model_dim:
        raise ShapeError(f"x0 has {x.shape[1]} columns, model expects D = {w.model_dim}")

    trace = RunTrace()
    carried = None
    for layer in range(start_layer, stop_layer):
        lw = w.layers[layer]
        ov = by_layer.get(layer, LayerOverride.standard(layer))
        h = layer_norm(x, lw.ln1_gamma, lw.ln1_beta)

        pattern = ov.pattern if ov.kind is OverrideKind.MASKED else None
        if ov.kind is OverrideKind.SKIP_ATTENTION:
            x_mid = x
        else:
            if ov.kind is OverrideKind.FNA:
                lm = _fna_landmarks(ov, x, h, layer, carried)
                carried = lm
                trace.landmarks[layer] = lm
                attn = fna_attention(h, lw.attn, lm)
            elif ov.kind is OverrideKind.MASKED:
                attn = mha_with_pattern(h, lw.attn, ov.pattern, ov.mode)
            else:
                attn = exact_mha(h, lw.attn)
            x_mid = x + attn
            if layer in capture.attention_layers:
                trace.attention[layer] = mean_attention_matrix(h, lw.attn, pattern, ov.mode)

        x = x_mid + _mlp(x_mid, lw)
        if capture.mid_outputs:
            trace.mid_outputs[layer] = x_mid
        if capture.block_outputs:
            trace.block_outputs[layer] = x
        trace.norms[layer] = row_norms(x)
        logger.debug("layer %d (%s) done", layer, ov.kind.value)
    return x, trace
