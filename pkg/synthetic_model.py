"""
synthetic_model.py - Hand-wired model + input with planted attention sinks.

Pretrained ViT weights are not available at desk scale, so this builds a
small model whose sink behaviour is known in closed form:

  layer lm      suppression: every token attends to the highest-potential
                unmasked token u and loses SUPPRESSION * p_u of its mass;
                CLS attends only to itself.
  layer ld      detection: CLS scores token j by its mass, CLS itself by a
                fixed threshold; the MLP grows tokens above the threshold
                into massive tokens.
  layers > ld   read-out: non-CLS tokens pull their attention toward massive
                tokens, CLS attends near-uniformly.
  other layers  pure residual passthrough.

Planted token i (0-based rank) starts with potential and mass DECAY**i, so
without masking only the first planted token crosses the threshold; masking
it lets the next one through, and so on. With reveal = k the ranks are
grouped k at a time and a whole group crosses together.

Every signal lives in a channel pair (+v, -v) and is read back as half the
pair difference of the LayerNorm output, which cancels the row mean. The
remaining carrier channels hold +/-CARRIER and keep each row's std close to
a known constant.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

import config
from attention import AttentionParams
from tensor_core import ShapeError
from vit_runtime import LayerWeights, ModelWeights

logger = logging.getLogger(__name__)

CLS_PAIR = (0, 1)
POTENTIAL_PAIR = (2, 3)
MASS_PAIR = (4, 5)
GROWTH_PAIR = (6, 7)
READ_PAIR = (8, 9)
FIRST_CARRIER = 10


@dataclass(frozen=True)
class SyntheticSpec:
    num_layers: int = 5
    heads: int = 2
    head_dim: int = 8
    mlp_dim: int = 8
    num_tokens: int = 16          # N, excluding CLS
    planted: tuple = (5, 9, 2)    # priority order
    seed: int = 0
    lm: int = 1
    ld: int = 2
    grid: tuple = None
    reveal: int = 1               # planted tokens that cross the threshold together

    def __post_init__(self):
        object.__setattr__(self, "planted", tuple(int(t) for t in self.planted))
        object.__setattr__(self, "reveal", int(self.reveal))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        dim = self.heads * self.head_dim
        if dim < config.SYNTH_MIN_MODEL_DIM or self.head_dim < 2 or self.mlp_dim < 1:
            raise ShapeError(
                f"synthetic model needs D >= {config.SYNTH_MIN_MODEL_DIM}, d >= 2, "
                f"D_mlp >= 1 (got D={dim}, d={self.head_dim}, D_mlp={self.mlp_dim})")
        if len(self.planted) > self.num_tokens:
            raise ValueError(
                f"priority list of {len(self.planted)} is longer than N={self.num_tokens}")
        if len(self.planted) > config.SYNTH_MAX_PLANTED:
            raise ValueError(f"at most {config.SYNTH_MAX_PLANTED} planted sinks are supported")
        if self.reveal < 1:
            raise ValueError(f"reveal must be >= 1, got {self.reveal}")
        if len(set(self.planted)) != len(self.planted):
            raise ValueError(f"planted tokens repeat: {self.planted}")
        if any(not 1 <= t <= self.num_tokens for t in self.planted):
            raise ValueError(f"planted tokens must lie in [1, {self.num_tokens}]")
        if not 0 <= self.lm < self.ld < self.num_layers:
            raise ValueError(f"need 0 <= lm < ld < L, got lm={self.lm} ld={self.ld} L={self.num_layers}")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.num_tokens:
            raise ValueError(f"grid {self.grid} does not cover N={self.num_tokens} tokens")

    @property
    def model_dim(self):
        return self.heads * self.head_dim

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "planted" in data:
            data["planted"] = tuple(data["planted"])
        if data.get("grid") is not None:
            data["grid"] = tuple(data["grid"])
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["planted"] = list(self.planted)
        out["grid"] = list(self.grid) if self.grid is not None else None
        return out


def potentials(count, reveal=1):
    """
    Potential of each planted rank.

    Ranks come in tiers of `reveal` tokens. Tier g starts at DECAY**g and
    each later member of the tier sits TIER_SPREAD lower (relative).
    """
    return [config.SYNTH_PRIORITY_DECAY ** (i // reveal) * (1.0 - config.SYNTH_TIER_SPREAD * (i % reveal))
            for i in range(count)]


def threshold(count, reveal=1):
    """
    Mass level that separates the current tier from everyone else.

    Every tier member keeps at least (1 - SUPPRESSION - spread) * top of its
    tier, where spread covers the weakest member; the best token of the next
    tier keeps at most DECAY - SUPPRESSION * (1 - spread). The threshold sits
    halfway between the two.
    """
    keep = 1.0 - config.SYNTH_SUPPRESSION
    if count == 0:
        return keep / 2.0
    size = min(reveal, count)
    spread = config.SYNTH_TIER_SPREAD * (size - 1)
    tiers = -(-count // size)
    winner_min = (keep - spread) * config.SYNTH_PRIORITY_DECAY ** (tiers - 1)
    runner_up_max = 0.0
    if tiers > 1:
        runner_up_max = max(config.SYNTH_PRIORITY_DECAY - config.SYNTH_SUPPRESSION * (1.0 - spread), 0.0)
    return (winner_min + runner_up_max) / 2.0



def _row_std(dim):
    carriers = dim - FIRST_CARRIER
    return config.SYNTH_CARRIER * math.sqrt(carriers / dim)


def _pair_reader(dim, pair, scale):
    # Dotted with a LayerNorm output, returns scale * (x_a - x_b) / (2 * row std).
    v = np.zeros(dim)
    v[pair[0]] = scale / 2.0
    v[pair[1]] = -scale / 2.0
    return v


def _pair_writer(dim, pair, scale):
    v = np.zeros(dim)
    v[pair[0]] = scale
    v[pair[1]] = -scale
    return v


class _Blank:
    """Zeroed parameter arrays for one layer, filled in by the builders."""

    def __init__(self, spec):
        h, d, dim, mlp = spec.heads, spec.head_dim, spec.model_dim, spec.mlp_dim
        self.q_w = np.zeros((h, d, dim))
        self.q_b = np.zeros((h, d))
        self.k_w = np.zeros((h, d, dim))
        self.k_b = np.zeros((h, d))
        self.v_w = np.zeros((h, d, dim))
        self.v_b = np.zeros((h, d))
        self.o_w = np.zeros((h, dim, d))
        self.o_b = np.zeros(dim)
        self.fc1_w = np.zeros((mlp, dim))
        self.fc1_b = np.zeros(mlp)
        self.fc2_w = np.zeros((dim, mlp))
        self.fc2_b = np.zeros(dim)
        self.dim = dim

    def build(self):
        ones, zeros = np.ones(self.dim), np.zeros(self.dim)
        attn = AttentionParams(self.q_w, self.q_b, self.k_w, self.k_b,
                               self.v_w, self.v_b, self.o_w, self.o_b)
        return LayerWeights(ones, zeros, attn, ones, zeros,
                            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b)


def _suppression_layer(spec):
    layer = _Blank(spec)
    dim, sigma = spec.model_dim, _row_std(spec.model_dim)
    gain = config.SYNTH_WINNER_SHARPNESS * math.sqrt(spec.head_dim)
    cls = _pair_reader(dim, CLS_PAIR, sigma)
    # query = gain * [1 - cls, cls]; key = [potential, cls]
    layer.q_w[0, 0] = -gain * cls
    layer.q_b[0, 0] = gain
    layer.q_w[0, 1] = gain * cls
    layer.k_w[0, 0] = _pair_reader(dim, POTENTIAL_PAIR, sigma)
    layer.k_w[0, 1] = cls
    layer.v_w[0, 0] = _pair_reader(dim, POTENTIAL_PAIR, sigma)
    layer.o_w[0, :, 0] = _pair_writer(dim, MASS_PAIR, -config.SYNTH_SUPPRESSION)
    return layer.build()


def _detection_layer(spec):
    layer = _Blank(spec)
    dim, sigma = spec.model_dim, _row_std(spec.model_dim)
    gain = config.SYNTH_DETECT_SHARPNESS * math.sqrt(spec.head_dim)
    theta = threshold(len(spec.planted), spec.reveal)
    cls = _pair_reader(dim, CLS_PAIR, sigma)
    # CLS query = gain * [1, 1]; key = [mass, theta * cls]
    layer.q_w[0, 0] = gain * cls
    layer.q_w[0, 1] = gain * cls
    layer.k_w[0, 0] = _pair_reader(dim, MASS_PAIR, sigma)
    layer.k_w[0, 1] = theta * cls
    # growth unit: gelu(GAIN * (mass - theta)) written to the growth pair
    layer.fc1_w[0] = _pair_reader(dim, MASS_PAIR, sigma) * config.SYNTH_GROWTH_GAIN
    layer.fc1_b[0] = -config.SYNTH_GROWTH_GAIN * theta
    layer.fc2_w[:, 0] = _pair_writer(dim, GROWTH_PAIR, config.SYNTH_GROWTH_SCALE)
    return layer.build()


def _readout_layer(spec):
    layer = _Blank(spec)
    dim, sigma = spec.model_dim, _row_std(spec.model_dim)
    gain = config.SYNTH_READ_SHARPNESS * math.sqrt(spec.head_dim)
    cls = _pair_reader(dim, CLS_PAIR, sigma)
    growth = _pair_reader(dim, GROWTH_PAIR, 1.0)
    layer.q_w[0, 0] = -gain * cls
    layer.q_b[0, 0] = gain
    layer.k_w[0, 0] = growth
    layer.v_w[0, 0] = growth
    layer.o_w[0, :, 0] = _pair_writer(dim, READ_PAIR, 1.0)
    return layer.build()


def make_synthetic_model(spec):
    """
    Build ModelWeights whose detection layer ld ranks the planted tokens.

    Args:
        spec: SyntheticSpec

    Returns:
        ModelWeights (deterministic; the seed only affects the input)
    """
    layers = []
    for i in range(spec.num_layers):
        if i == spec.lm:
            layers.append(_suppression_layer(spec))
        elif i == spec.ld:
            layers.append(_detection_layer(spec))
        elif i > spec.ld:
            layers.append(_readout_layer(spec))
        else:
            layers.append(_Blank(spec).build())
    logger.debug("synthetic model: L=%d D=%d planted=%s lm=%d ld=%d",
                 spec.num_layers, spec.model_dim, spec.planted, spec.lm, spec.ld)
    return ModelWeights(tuple(layers), spec.grid)


def make_synthetic_input(spec):
    """
    (N+1, D) float32 token matrix matching make_synthetic_model(spec).

    CLS carries the CLS pair, planted rank i carries potential and mass
    potentials(len(planted), reveal)[i], and every row carries the seeded
    +/- carrier.
    """
    dim, n = spec.model_dim, spec.num_tokens + 1
    rng = np.random.Generator(np.random.Philox(spec.seed))
    x = np.zeros((n, dim))
    carriers = dim - FIRST_CARRIER
    signs = np.where(np.arange(carriers) % 2 == 0, 1.0, -1.0)
    x[:, FIRST_CARRIER:] = config.SYNTH_CARRIER * signs + config.SYNTH_NOISE * rng.standard_normal((n, carriers))
    x[0] += _pair_writer(dim, CLS_PAIR, 1.0)
    for token, p in zip(spec.planted, potentials(len(spec.planted), spec.reveal)):
        x[token] += _pair_writer(dim, POTENTIAL_PAIR, p) + _pair_writer(dim, MASS_PAIR, p)
    return x.astype(np.float32)
