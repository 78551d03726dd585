"""
sink_analysis.py - Attention-sink detection, replacement, and diagnostics.

Detection follows the CLS threshold rule: token t is a sink at layer ld when
CLS attends to t at least as much as to itself. The iterative variant masks
every sink found so far over layers [lm, ld] and looks again, which exposes
the lower-priority sinks hidden behind the dominant ones.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import config
from attention import MaskPattern, PatternMode, project
from tensor_core import ShapeError, as_matrix, row_norms
from vit_runtime import TraceOptions, forward, masked_overrides

logger = logging.getLogger(__name__)


class MalformedAttentionError(ValueError):
    """Attention matrix is not square or its rows do not sum to 1."""


class NoNormalTokenError(ValueError):
    """Every non-CLS token is a sink, so there is nothing to copy from."""


class ZeroNormError(ValueError):
    """An embedding row has zero norm and cannot be normalized."""


# =============================================================================
# REPORTS
# =============================================================================

@dataclass
class SinkReport:
    """
    Result of iterative detection.

    sinks lists tokens in the order they were found. additions[i] holds the
    tokens appended by iteration i, cls_rows[i] the CLS attention row read at
    ld, and ld_norms[i] the block-output norms at ld.
    """
    sinks: list = field(default_factory=list)
    cls_rows: list = field(default_factory=list)
    additions: list = field(default_factory=list)
    ld_norms: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    lm: int = config.DETECTION_LM
    ld: int = config.DETECTION_LD
    mode: PatternMode = PatternMode.MASK

    @property
    def massive(self):
        """Tokens found by the first iteration."""
        return list(self.additions[0]) if self.additions else []

    @property
    def artifacts(self):
        """Tokens that only surfaced once earlier sinks were masked."""
        return [t for added in self.additions[1:] for t in added]

    def to_dict(self):
        return {
            "sinks": list(self.sinks),
            "massive": self.massive,
            "artifacts": self.artifacts,
            "iterations": self.iterations,
            "converged": self.converged,
            "lm": self.lm,
            "ld": self.ld,
            "mode": self.mode.value,
            "additions": [list(a) for a in self.additions],
            "cls_rows": [row.tolist() for row in self.cls_rows],
            "ld_norms": [n.tolist() for n in self.ld_norms],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True, eq=False)
class SuppressionMatrix:
    """P[i][j] < 0 means token j's value output pushes against token i."""
    P: np.ndarray
    layer: int = 0
    value_norms: np.ndarray = None   # (1/H) sum_h ||u_{h,j}|| per column j

    def bound(self):
        """Per-entry Cauchy-Schwarz bound, broadcast to P's shape."""
        return np.broadcast_to(self.value_norms, self.P.shape)


@dataclass(frozen=True)
class ReplacementRecord:
    from_layer: int
    drift: float


# =============================================================================
# DETECTION
# =============================================================================

def _crossers(cls_row, skip=()):
    """Tokens t >= 1 with row[t] >= row[0], by descending attention then index."""
    row = np.asarray(cls_row)
    hits = [t for t in range(1, row.shape[0]) if t not in skip and row[t] >= row[0]]
    return sorted(hits, key=lambda t: (-row[t], t))


def detect_sinks_onepass(A, tol=config.ROW_SUM_TOL):
    """
    Sinks of a mean attention matrix: {t >= 1 : A[0][t] >= A[0][0]}.

    Raises:
        MalformedAttentionError: A is not square or a row sum is off by more than tol
    """
    a = np.asarray(A, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise MalformedAttentionError(f"attention matrix must be square, got {a.shape}")
    sums = a.sum(axis=1)
    worst = int(np.argmax(np.abs(sums - 1.0)))
    if not np.isfinite(sums).all() or abs(sums[worst] - 1.0) > tol:
        raise MalformedAttentionError(f"row {worst} sums to {sums[worst]:.6f}, expected 1")
    return frozenset(_crossers(a[0]))


def detect_sinks_iterative(x0, w, lm=config.DETECTION_LM, ld=config.DETECTION_LD,
                           max_iters=config.DETECTION_MAX_ITERS, mode=PatternMode.MASK):
    """
    Iterative sink detection by removal.

    Runs layers [0, lm) once, then repeatedly reruns [lm, ld] with every sink
    found so far hidden by a Type I pattern and appends the tokens that cross
    the CLS threshold at ld. Stops once an iteration adds nothing.

    Args:
        x0: (N+1, D) model input
        w: ModelWeights
        lm, ld: first masked layer and detection layer
        max_iters: iteration cap; hitting it yields converged=False
        mode: MASK renormalizes the surviving keys, SINK only zeroes hidden ones

    Returns:
        SinkReport
    """
    mode = PatternMode(mode)
    if not 0 <= lm <= ld < w.num_layers:
        raise ValueError(f"need 0 <= lm <= ld < L, got lm={lm} ld={ld} L={w.num_layers}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")

    prefix, _ = forward(x0, w, capture=TraceOptions(block_outputs=False), stop_layer=lm)
    size = prefix.shape[0]
    capture = TraceOptions(block_outputs=False, attention_layers=frozenset({ld}))
    report = SinkReport(lm=lm, ld=ld, mode=mode)

    for it in range(max_iters):
        overrides = []
        if report.sinks:
            pattern = MaskPattern.type_one(report.sinks, size)
            overrides = masked_overrides(range(lm, ld + 1), pattern, mode)
        _, trace = forward(prefix, w, overrides, capture, start_layer=lm, stop_layer=ld + 1)
        row = trace.attention[ld][0]
        added = _crossers(row, skip=set(report.sinks))

        report.cls_rows.append(np.asarray(row, dtype=np.float32))
        report.ld_norms.append(trace.norms[ld])
        report.additions.append(added)
        report.iterations = it + 1
        logger.info("Detection iteration %d: +%s (total %d)", it + 1, added, len(report.sinks) + len(added))
        if not added:
            report.converged = True
            break
        report.sinks.extend(added)

    if not report.converged:
        logger.warning("Detection stopped after %d iterations without converging", max_iters)
    return report


# =============================================================================
# REPLACEMENT
# =============================================================================

def _nearest_on_grid(t, normal, grid):
    g_w = grid[1]
    r, c = divmod(t - 1, g_w)

    def key(j):
        rj, cj = divmod(j - 1, g_w)
        return (abs(rj - r) + abs(cj - c), rj, cj)

    return min(normal, key=key)


def _nearest_in_features(t, normal, emb64):
    dist = np.linalg.norm(emb64[normal] - emb64[t], axis=1)
    return normal[int(np.argmin(dist))]


def replace_sinks(emb, T, grid=None):
    """
    Overwrite each sink row with its nearest normal token.

    With a patch grid, token t sits at (row, col) = divmod(t - 1, g_w) and
    distance is Manhattan (ties: smaller row, then smaller column). Without
    one, distance is Euclidean in feature space (ties: lowest index).

    Raises:
        NoNormalTokenError: every non-CLS token is in T
    """
    emb = as_matrix(emb, "emb")
    n = emb.shape[0]
    sinks = sorted({int(t) for t in T})
    if any(not 1 <= t < n for t in sinks):
        raise ValueError(f"sink indices must lie in [1, {n - 1}], got {sinks}")
    out = emb.copy()
    if not sinks:
        return out
    normal = [j for j in range(1, n) if j not in set(sinks)]
    if not normal:
        raise NoNormalTokenError("all non-CLS tokens are sinks")
    if grid is not None and grid[0] * grid[1] != n - 1:
        raise ShapeError(f"grid {tuple(grid)} does not cover {n - 1} patch tokens")

    emb64 = emb.astype(np.float64)
    for t in sinks:
        j = _nearest_on_grid(t, normal, grid) if grid is not None else _nearest_in_features(t, normal, emb64)
        out[t] = emb[j]
    return out


def forward_with_replacement(x0, w, T, from_layer, grid=None):
    """Replace sinks in Emb^(from_layer), then run the remaining layers."""
    grid = grid if grid is not None else w.grid
    x, _ = forward(x0, w, capture=TraceOptions(block_outputs=False), stop_layer=from_layer)
    x = replace_sinks(x, T, grid)
    return forward(x, w, start_layer=from_layer)


def replacement_ablation(x0, w, T, layers=None, grid=None):
    """
    Max-abs drift of the final embeddings when sinks are replaced at each
    start layer in `layers` (default every layer boundary 0..L).
    """
    reference, _ = forward(x0, w, capture=TraceOptions(block_outputs=False))
    layers = range(w.num_layers + 1) if layers is None else layers
    records = []
    for layer in layers:
        out, _ = forward_with_replacement(x0, w, T, layer, grid)
        drift = float(np.max(np.abs(out.astype(np.float64) - reference)))
        records.append(ReplacementRecord(int(layer), drift))
        logger.info("Replacement from layer %d: drift %.4g", layer, drift)
    return records


# =============================================================================
# DIAGNOSTICS
# =============================================================================

def suppression_projection(emb, p, value_input=None, layer=0):
    """
    Mean normalized projection of token i onto token j's value output.

    Each head's value vector is lifted to model space through that head's
    output projection, u_{h,j} = V_h(emb'_j) O_h^T, so that it can be compared
    with emb_i:

        P[i][j] = < emb_i / ||emb_i||, (1/H) sum_h u_{h,j} >

    Args:
        emb: (N+1, D) embeddings whose directions are tested
        p: AttentionParams of the layer
        value_input: features fed to the value projections (default emb);
            pass the LN1 output to match what attention sees
        layer: recorded on the result

    Raises:
        ZeroNormError: some row of emb is all zeros
    """
    emb64 = as_matrix(emb, "emb").astype(np.float64)
    feats = emb64 if value_input is None else as_matrix(value_input, "value_input").astype(np.float64)
    if feats.shape != emb64.shape:
        raise ShapeError(f"value_input {feats.shape} does not match emb {emb64.shape}")
    if feats.shape[1] != p.model_dim:
        raise ShapeError(f"emb has {feats.shape[1]} columns, attention expects D = {p.model_dim}")
    norms = np.linalg.norm(emb64, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroNormError(f"rows {zero.tolist()} have zero norm")

    lifted = np.zeros_like(feats)
    value_norms = np.zeros(feats.shape[0])
    for h in range(p.heads):
        u = project(feats, p.v_weight[h], p.v_bias[h]) @ p.o_weight[h].T.astype(np.float64)
        lifted += u
        value_norms += np.linalg.norm(u, axis=1)
    lifted /= p.heads
    value_norms /= p.heads
    P = (emb64 / norms[:, None]) @ lifted.T
    return SuppressionMatrix(P, layer, value_norms)


def norm_trace(trace):
    """
    Token norms per layer, recomputed from the trace's block outputs.

    Returns:
        dict layer -> (N+1,) float64 vector
    """
    if not trace.block_outputs:
        raise ValueError("trace has no block outputs; run forward with block_outputs=True")
    return {layer: row_norms(x) for layer, x in sorted(trace.block_outputs.items())}


def norm_frame(norms):
    """Long-format DataFrame (layer, token, norm) for CSV export."""
    rows = [
        {"layer": layer, "token": token, "norm": float(value)}
        for layer, vec in sorted(norms.items())
        for token, value in enumerate(vec)
    ]
    return pd.DataFrame(rows, columns=["layer", "token", "norm"])
