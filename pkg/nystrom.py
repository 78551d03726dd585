"""
nystrom.py - Fast Nystrom Attention: landmark sampling and the three-factor
low-rank attention evaluation.

Per head, softmax(Q K^T / sqrt(d)) is replaced by F1 F2^+ F3 with
    F1 = softmax(Q k~^T / sqrt(d))      (N+1) x s
    F2 = softmax(q~ k~^T / sqrt(d))     s x s
    F3 = softmax(q~ K^T / sqrt(d))      s x (N+1)
where q~, k~ are the layer's projections of the landmark rows. The product is
evaluated right to left against V, so no (N+1) x (N+1) buffer ever exists.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType

import numpy as np

import accountant
import config
from attention import project
from tensor_core import (
    ShapeError,
    as_matrix,
    matmul64,
    pinv64,
    row_norms,
    softmax64,
)

logger = logging.getLogger(__name__)

CLS_INDEX = 0


class CapacityError(ValueError):
    """More samples requested than the pool holds."""


class SamplerSpecError(ValueError):
    """Guarantee / exclusion sets or the sample count are inconsistent."""


class EmptyLandmarkError(ValueError):
    """fna_attention needs at least one landmark."""


class Strategy(Enum):
    FPS = "fps"
    UNIFORM = "uniform"
    SEGMENT_MEANS = "segment-means"
    KMEANS = "kmeans"

    @property
    def aggregates(self):
        """True when landmarks are aggregate feature rows rather than token indices."""
        return self in (Strategy.SEGMENT_MEANS, Strategy.KMEANS)


class Role(Enum):
    CLS = "cls"
    MASSIVE = "massive"
    ARTIFACT = "artifact"


class RoleAction(Enum):
    GUARANTEE = "guarantee"
    EXCLUDE = "exclude"
    IGNORE = "ignore"


DEFAULT_ROLE_POLICY = MappingProxyType({
    Role.CLS: RoleAction.GUARANTEE,
    Role.MASSIVE: RoleAction.IGNORE,
    Role.ARTIFACT: RoleAction.IGNORE,
})


def _rng(seed):
    # Philox is counter-based: the stream depends only on the seed.
    return np.random.Generator(np.random.Philox(int(seed)))


def policy_label(policy):
    """Stable text form of a role policy, e.g. 'cls=guarantee;massive=ignore;artifact=ignore'."""
    return ";".join(f"{role.value}={policy[role].value}" for role in Role)


@dataclass(frozen=True)
class SamplerSpec:
    """Landmark sampling policy: S = G  U  Sample([N]_0 minus (G U E), s - |G|)."""
    strategy: Strategy = Strategy.FPS
    s: int = config.DEFAULT_SAMPLE_COUNT
    guarantee: frozenset = frozenset()
    exclude: frozenset = frozenset()
    seed: int = 0
    role_policy: dict = field(default_factory=lambda: dict(DEFAULT_ROLE_POLICY))
    kmeans_iters: int = config.KMEANS_ITERS

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "guarantee", frozenset(int(i) for i in self.guarantee))
        object.__setattr__(self, "exclude", frozenset(int(i) for i in self.exclude))
        policy = {Role(r): RoleAction(a) for r, a in dict(self.role_policy).items()}
        for role in Role:
            policy.setdefault(role, RoleAction.IGNORE)
        object.__setattr__(self, "role_policy", policy)
        if self.s < 1:
            raise SamplerSpecError(f"sample count must be >= 1, got {self.s}")
        if self.guarantee & self.exclude:
            raise SamplerSpecError(
                f"guarantee and exclusion sets overlap: {sorted(self.guarantee & self.exclude)}")

    def resolve(self, massive=(), artifact=()):
        """
        Merge the explicit sets with the role policy.

        Args:
            massive: indices of massive tokens (used only if the policy names them)
            artifact: indices of artifact tokens

        Returns:
            (G, E) frozensets

        Raises:
            SamplerSpecError: the merged sets intersect
        """
        members = {
            Role.CLS: {CLS_INDEX},
            Role.MASSIVE: {int(i) for i in massive},
            Role.ARTIFACT: {int(i) for i in artifact},
        }
        g, e = set(self.guarantee), set(self.exclude)
        for role, action in self.role_policy.items():
            if action is RoleAction.GUARANTEE:
                g |= members[role]
            elif action is RoleAction.EXCLUDE:
                e |= members[role]
        if g & e:
            raise SamplerSpecError(f"policy puts {sorted(g & e)} in both G and E")
        return frozenset(g), frozenset(e)


class LandmarkKind(Enum):
    INDICES = "indices"
    FEATURES = "features"


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Sampled token indices, or aggregate feature rows, recorded with their layer."""
    kind: LandmarkKind
    indices: tuple = ()
    features: np.ndarray = None
    source_layer: int = 0

    def __post_init__(self):
        if self.kind is LandmarkKind.INDICES:
            indices = tuple(int(i) for i in self.indices)
            if len(set(indices)) != len(indices):
                raise ValueError(f"landmark indices are not distinct: {indices}")
            object.__setattr__(self, "indices", indices)
        else:
            object.__setattr__(self, "features", as_matrix(self.features, "landmark features"))

    def __len__(self):
        if self.kind is LandmarkKind.INDICES:
            return len(self.indices)
        return self.features.shape[0]

    def rows(self, x):
        """Landmark rows drawn from (or supplied alongside) the token matrix x."""
        if self.kind is LandmarkKind.INDICES:
            idx = np.asarray(self.indices, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
                raise ShapeError(f"landmark indices out of range for {x.shape[0]} tokens")
            return x[idx]
        if self.features.shape[1] != x.shape[1]:
            raise ShapeError(
                f"landmark features have {self.features.shape[1]} columns, tokens have {x.shape[1]}")
        return self.features

    def to_dict(self):
        out = {"kind": self.kind.value, "source_layer": self.source_layer, "count": len(self)}
        if self.kind is LandmarkKind.INDICES:
            out["indices"] = list(self.indices)
        return out


# =============================================================================
# SAMPLERS
# =============================================================================

def _check_pool(pool, n):
    pool = sorted({int(i) for i in pool})
    if pool and (pool[0] < 0 or pool[-1] >= n):
        raise ShapeError(f"pool indices out of range for {n} tokens")
    return pool


def fps_sample(features, pool, k, seed=0):
    """
    Greedy farthest point sampling under Euclidean distance.

    Starts from the pool element with the largest norm, then repeatedly takes
    the point whose distance to the chosen set is largest. Ties go to the
    lowest token index. The start rule is deterministic, so `seed` does not
    change the result; it is accepted for a uniform sampler signature.

    Args:
        features: (N+1, D) rows to sample from
        pool: candidate token indices
        k: number of points to select

    Returns:
        list of k distinct indices from pool, in selection order

    Raises:
        CapacityError: k > |pool|
    """
    features = as_matrix(features, "features")
    pool = _check_pool(pool, features.shape[0])
    if k > len(pool):
        raise CapacityError(f"cannot sample {k} points from a pool of {len(pool)}")
    if k <= 0:
        return []
    with accountant.scratch() as buf:
        pts = buf.hold(features[pool].astype(np.float64))
        first = int(np.argmax(row_norms(pts)))
        chosen = [first]
        min_dist = buf.hold(row_norms(pts - pts[first]))
        min_dist[first] = -np.inf
        for _ in range(k - 1):
            nxt = int(np.argmax(min_dist))
            chosen.append(nxt)
            np.minimum(min_dist, row_norms(pts - pts[nxt]), out=min_dist)
            min_dist[chosen] = -np.inf
    return [pool[i] for i in chosen]


def uniform_sample(pool, s, seed, source_layer=0):
    """s distinct indices drawn without replacement from pool by a seeded generator."""
    pool = sorted({int(i) for i in pool})
    if s > len(pool):
        raise CapacityError(f"cannot draw {s} indices from a pool of {len(pool)}")
    picks = _rng(seed).choice(np.asarray(pool, dtype=np.int64), size=s, replace=False)
    return LandmarkSet(LandmarkKind.INDICES, tuple(int(i) for i in picks), source_layer=source_layer)


def segment_means(features, s, source_layer=0):
    """
    Means of s contiguous token segments (sizes differ by at most one,
    longer segments first).
    """
    features = as_matrix(features, "features")
    n = features.shape[0]
    if not 1 <= s <= n:
        raise CapacityError(f"cannot form {s} segments from {n} tokens")
    x = features.astype(np.float64)
    means = np.stack([x[seg].mean(axis=0) for seg in np.array_split(np.arange(n), s)])
    return LandmarkSet(LandmarkKind.FEATURES, features=means, source_layer=source_layer)


def kmeans_landmarks(features, s, iters=config.KMEANS_ITERS, seed=0, source_layer=0):
    """
    Lloyd's k-means with a seeded uniform initialization and a fixed number
    of iterations. An empty cluster is re-seeded at the point farthest from
    its assigned center.
    """
    features = as_matrix(features, "features")
    n = features.shape[0]
    if not 1 <= s <= n:
        raise CapacityError(f"cannot form {s} clusters from {n} tokens")
    x = features.astype(np.float64)
    sq = (x * x).sum(axis=1)
    centers = x[_rng(seed).choice(n, size=s, replace=False)]
    for it in range(iters):
        d2 = sq[:, None] - 2.0 * matmul64(x, centers.T) + (centers * centers).sum(axis=1)[None, :]
        labels = np.argmin(d2, axis=1)
        spread = d2[np.arange(n), labels]
        counts = np.bincount(labels, minlength=s)
        updated = np.empty_like(centers)
        for j in range(s):
            if counts[j]:
                updated[j] = x[labels == j].mean(axis=0)
            else:
                far = int(np.argmax(spread))
                updated[j] = x[far]
                spread[far] = -np.inf
                logger.debug("k-means iter %d: cluster %d empty, re-seeded at token %d", it, j, far)
        centers = updated
    return LandmarkSet(LandmarkKind.FEATURES, features=centers, source_layer=source_layer)


def sample_landmarks(features, spec, massive=(), artifact=(), source_layer=0):
    """
    Sample s landmarks according to spec.

    Index strategies return S = G + Sample(pool, s - |G|) with
    pool = [N]_0 minus (G U E). Aggregate strategies return s - |G| aggregate
    rows over all tokens followed by the G rows verbatim.

    Args:
        features: (N+1, D) rows to sample / aggregate
        spec: SamplerSpec
        massive, artifact: role members for spec.role_policy
        source_layer: layer index recorded on the result

    Raises:
        SamplerSpecError: |G| <= s <= N+1-|E| is violated, or indices are out of range
    """
    features = as_matrix(features, "features")
    n = features.shape[0]
    g, e = spec.resolve(massive, artifact)
    outside = sorted(i for i in g | e if not 0 <= i < n)
    if outside:
        raise SamplerSpecError(f"indices {outside} outside [0, {n - 1}]")
    if not len(g) <= spec.s <= n - len(e):
        raise SamplerSpecError(
            f"need |G|={len(g)} <= s={spec.s} <= N+1-|E|={n - len(e)}")
    guaranteed = sorted(g)
    quota = spec.s - len(g)
    if quota == 0:
        return LandmarkSet(LandmarkKind.INDICES, tuple(guaranteed), source_layer=source_layer)

    if spec.strategy.aggregates:
        if spec.strategy is Strategy.SEGMENT_MEANS:
            agg = segment_means(features, quota)
        else:
            agg = kmeans_landmarks(features, quota, spec.kmeans_iters, spec.seed)
        rows = np.vstack([agg.features, features[guaranteed]])
        return LandmarkSet(LandmarkKind.FEATURES, features=rows, source_layer=source_layer)

    pool = sorted(set(range(n)) - g - e)
    if spec.strategy is Strategy.FPS:
        picks = fps_sample(features, pool, quota, spec.seed)
    else:
        picks = list(uniform_sample(pool, quota, spec.seed).indices)
    logger.debug("layer %d: %s sampled %d landmarks (|G|=%d, |E|=%d)",
                 source_layer, spec.strategy.value, spec.s, len(g), len(e))
    return LandmarkSet(LandmarkKind.INDICES, tuple(guaranteed + picks), source_layer=source_layer)


# =============================================================================
# ATTENTION
# =============================================================================

def _factors(x64, rows64, p, h, buf):
    scale = 1.0 / math.sqrt(p.head_dim)
    q = buf.hold(project(x64, p.q_weight[h], p.q_bias[h]))
    q *= scale
    k = buf.hold(project(x64, p.k_weight[h], p.k_bias[h]))
    q_lm = buf.hold(project(rows64, p.q_weight[h], p.q_bias[h]))
    q_lm *= scale
    k_lm = buf.hold(project(rows64, p.k_weight[h], p.k_bias[h]))
    f1 = buf.hold(softmax64(matmul64(q, k_lm.T), inplace=True))
    f2 = buf.hold(softmax64(matmul64(q_lm, k_lm.T), inplace=True))
    f3 = buf.hold(softmax64(matmul64(q_lm, k.T), inplace=True))
    return f1, f2, f3


def _prepare(x, p, lm):
    x = as_matrix(x, "x")
    if x.shape[1] != p.model_dim:
        raise ShapeError(f"x has {x.shape[1]} columns, attention expects D = {p.model_dim}")
    if len(lm) == 0:
        raise EmptyLandmarkError("landmark set is empty")
    x64 = x.astype(np.float64)
    return x64, np.asarray(lm.rows(x), dtype=np.float64)


def _middle_tol(x64, rows64):
    # Full coverage reproduces exact attention only with the strict cutoff; a
    # partial set keeps F2^+ bounded by dropping its small singular values.
    if rows64.shape[0] >= x64.shape[0]:
        return config.PINV_REL_TOL
    return config.FNA_PINV_REL_TOL


def fna_attention(x, p, lm):
    """
    Fast Nystrom approximation of exact_mha.

    Args:
        x: (N+1, D) layer-normed token matrix
        p: AttentionParams
        lm: LandmarkSet; index landmarks take their rows from x

    Returns:
        (N+1, D) float32 matrix O_bias + sum_h F1 F2^+ (F3 V_h) O_h^T

    Raises:
        EmptyLandmarkError: lm has no entries
    """
    x64, rows64 = _prepare(x, p, lm)
    out = np.zeros((x64.shape[0], p.model_dim))
    for h in range(p.heads):
        with accountant.scratch() as buf:
            f1, f2, f3 = _factors(x64, rows64, p, h, buf)
            v = buf.hold(project(x64, p.v_weight[h], p.v_bias[h]))
            f2_pinv = buf.hold(pinv64(f2, _middle_tol(x64, rows64)))
            mixed = buf.hold(matmul64(f3, v))
            mixed = buf.hold(matmul64(f2_pinv, mixed))
            head = buf.hold(matmul64(f1, mixed))
            out += matmul64(head, p.o_weight[h].T)
    out += p.o_bias
    return out.astype(np.float32)


def nystrom_attention_matrix(x, p, lm):
    """
    Dense mean-over-heads Nystrom attention matrix, float64.

    Materializes (N+1) x (N+1); meant for error analysis, not inference.
    """
    x64, rows64 = _prepare(x, p, lm)
    total = np.zeros((x64.shape[0], x64.shape[0]))
    for h in range(p.heads):
        with accountant.scratch() as buf:
            f1, f2, f3 = _factors(x64, rows64, p, h, buf)
            total += matmul64(matmul64(f1, pinv64(f2, _middle_tol(x64, rows64))), f3)
    return total / p.heads


# =============================================================================
# POLICY GRID
# =============================================================================

def config_grid():
    """
    All 27 role policies: every {guarantee, exclude, ignore} assignment to
    (CLS, massive, artifact), in lexicographic order of that action order.
    """
    return [dict(zip(Role, actions))
            for actions in itertools.product(RoleAction, repeat=len(Role))]
