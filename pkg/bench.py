"""
bench.py - Scaling benchmarks, approximation-error sweeps and the role-policy grid.

Timing regions run with a single numba thread. Memory is the peak of the
allocation accountant, i.e. the scratch buffers the kernels register, not
process RSS.
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

import config
from accountant import AllocationAccountant
from attention import AttentionParams, MaskPattern, PatternMode, attention_probs64, exact_mha, mha_with_pattern
from nystrom import (
    CapacityError,
    Role,
    SamplerSpec,
    SamplerSpecError,
    Strategy,
    config_grid,
    fna_attention,
    nystrom_attention_matrix,
    policy_label,
    sample_landmarks,
)
from sink_analysis import detect_sinks_iterative
from tensor_core import ShapeError, single_thread
from vit_runtime import TraceOptions, fna_overrides, forward

logger = logging.getLogger(__name__)


# =============================================================================
# RECORDS
# =============================================================================

@dataclass(frozen=True)
class BenchRecord:
    impl: str
    n: int
    batch: int
    time_ms: float        # median over trials; NaN when skipped
    scratch_bytes: int    # accountant peak; the estimate when skipped
    trials: int
    skipped: bool = False


@dataclass(frozen=True)
class ErrorRecord:
    s: int
    seed: int
    frob_err: float
    maxabs_err: float


@dataclass(frozen=True)
class GridRecord:
    policy: str
    cls: str
    massive: str
    artifact: str
    s: int
    drift: float          # max-abs vs the exact final embeddings; NaN when invalid
    valid: bool
    error: str = ""


@dataclass(frozen=True)
class BenchImpl:
    """Parsed --impls entry: 'exact', 'masked' or 'fna:<s>'."""
    kind: str
    s: int = None

    @property
    def label(self):
        return f"fna:{self.s}" if self.kind == "fna" else self.kind

    @property
    def quadratic(self):
        return self.kind != "fna"


def parse_impl(text):
    """
    Parse one implementation name.

    Raises:
        ValueError: unknown name or a non-positive sample count
    """
    name, _, arg = text.strip().partition(":")
    name = name.lower()
    if name in ("exact", "masked"):
        if arg:
            raise ValueError(f"{name} takes no parameter, got {text!r}")
        return BenchImpl(name)
    if name == "fna":
        s = int(arg) if arg else config.DEFAULT_SAMPLE_COUNT
        if s < 1:
            raise ValueError(f"fna sample count must be >= 1, got {s}")
        return BenchImpl("fna", s)
    raise ValueError(f"unknown implementation {text!r} (exact, masked, fna:<s>)")


# =============================================================================
# SCALING BENCHMARK
# =============================================================================

def quadratic_scratch_estimate(n, head_dim):
    """Bytes a dense attention head holds at once: logits plus q, k, v and the head output."""
    return 8 * (n * n + 4 * n * head_dim)


def _runner(impl, p, n):
    if impl.kind == "exact":
        return lambda x: exact_mha(x, p)
    if impl.kind == "masked":
        pattern = MaskPattern.type_one({1}, n)
        return lambda x: mha_with_pattern(x, p, pattern, PatternMode.MASK)
    spec = SamplerSpec(Strategy.FPS, min(impl.s, n))

    def run(x):
        return fna_attention(x, p, sample_landmarks(x, spec))

    return run


def _time_one(fn, inputs, trials, warmups):
    with AllocationAccountant() as acct:
        fn(inputs[0])
    with single_thread():
        for _ in range(warmups):
            for x in inputs:
                fn(x)
        samples = []
        for _ in range(trials):
            start = time.perf_counter()
            for x in inputs:
                fn(x)
            samples.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(samples)), acct.peak


def bench_attention(lengths, batch=1, impls=("exact", "fna:64"), seed=0,
                    heads=config.BENCH_HEADS, head_dim=config.BENCH_HEAD_DIM,
                    trials=config.BENCH_TRIALS, warmups=config.BENCH_WARMUPS,
                    memory_cap=config.EXACT_MEMORY_CAP_BYTES):
    """
    Time each implementation over each sequence length.

    Args:
        lengths: token counts N (each >= 2)
        batch: inputs per timed call group
        impls: names accepted by parse_impl, or BenchImpl values
        seed: seeds both the weights and the Gaussian inputs

    Returns:
        list of BenchRecord in (length, impl) order

    Raises:
        ShapeError: lengths is empty or contains a value below 2
    """
    lengths = [int(n) for n in lengths]
    if not lengths:
        raise ShapeError("no sequence lengths given")
    if min(lengths) < 2:
        raise ShapeError(f"every length must be >= 2, got {lengths}")
    if batch < 1 or trials < 1 or warmups < 0:
        raise ValueError("batch and trials must be >= 1, warmups >= 0")
    impls = [i if isinstance(i, BenchImpl) else parse_impl(i) for i in impls]
    p = AttentionParams.random(heads, head_dim, seed)
    rng = np.random.Generator(np.random.Philox(seed))

    records = []
    for n in lengths:
        inputs = [rng.standard_normal((n, heads * head_dim)).astype(np.float32) for _ in range(batch)]
        for impl in impls:
            if impl.quadratic:
                estimate = quadratic_scratch_estimate(n, head_dim)
                if estimate > memory_cap:
                    logger.warning("Skipping %s at N=%d: ~%d bytes exceeds cap %d",
                                   impl.label, n, estimate, memory_cap)
                    records.append(BenchRecord(impl.label, n, batch, math.nan, estimate, 0, True))
                    continue
            median_ms, peak = _time_one(_runner(impl, p, n), inputs, trials, warmups)
            logger.info("%s N=%d batch=%d: %.3f ms, peak %d bytes", impl.label, n, batch, median_ms, peak)
            records.append(BenchRecord(impl.label, n, batch, median_ms, peak, trials))
    return records


# =============================================================================
# ERROR SWEEP
# =============================================================================

def error_sweep(n, d, heads, s_values, seeds, strategy=Strategy.FPS):
    """
    Approximation error of fna_attention against exact attention.

    Each seed draws fresh weights and an (n+1, heads*d) Gaussian input; CLS
    (row 0) is always a landmark.

    Returns:
        list of ErrorRecord, one per (s, seed)

    Raises:
        ShapeError: some s lies outside [1, n+1]
    """
    size = n + 1
    s_values = [int(s) for s in s_values]
    bad = [s for s in s_values if not 1 <= s <= size]
    if bad:
        raise ShapeError(f"sample counts {bad} outside [1, {size}]")

    records = []
    for seed in seeds:
        seed = int(seed)
        p = AttentionParams.random(heads, d, seed)
        rng = np.random.Generator(np.random.Philox(seed))
        x = rng.standard_normal((size, heads * d)).astype(np.float32)
        exact_out = exact_mha(x, p).astype(np.float64)
        exact_attn = sum(attention_probs64(x, p, h) for h in range(heads)) / heads
        for s in s_values:
            lm = sample_landmarks(x, SamplerSpec(strategy, s, seed=seed))
            approx_attn = nystrom_attention_matrix(x, p, lm)
            approx_out = fna_attention(x, p, lm).astype(np.float64)
            records.append(ErrorRecord(
                s, seed,
                float(np.linalg.norm(exact_attn - approx_attn)),
                float(np.max(np.abs(exact_out - approx_out))),
            ))
        logger.debug("error sweep seed %d done", seed)
    logger.info("Error sweep: %d records over %d seeds", len(records), len(seeds))
    return records


# =============================================================================
# POLICY GRID
# =============================================================================

def grid_sweep(x0, w, s, report=None, from_layer=None, lm=config.DETECTION_LM,
               ld=config.DETECTION_LD, strategy=Strategy.FPS, seed=0):
    """
    Final-output drift of no-resample FNA under each of the 27 role policies.

    Massive tokens are the first detection iteration's sinks, artifacts the
    later ones. FNA covers layers [from_layer, L), default ld + 1.

    Args:
        x0: (N+1, D) model input
        w: ModelWeights
        s: landmark count
        report: SinkReport to reuse (detection runs when omitted)

    Returns:
        list of 27 GridRecord; policies that cannot be satisfied have valid=False
    """
    if report is None:
        report = detect_sinks_iterative(x0, w, lm, ld)
    start = report.ld + 1 if from_layer is None else int(from_layer)
    if not 0 <= start < w.num_layers:
        raise ValueError(f"FNA start layer {start} outside [0, {w.num_layers})")
    massive, artifact = report.massive, report.artifacts
    logger.info("Grid sweep: s=%d from layer %d, massive=%s artifact=%s", s, start, massive, artifact)

    capture = TraceOptions(block_outputs=False)
    reference, _ = forward(x0, w, capture=capture)
    reference = reference.astype(np.float64)

    records = []
    for policy in config_grid():
        label = policy_label(policy)
        actions = {role: policy[role].value for role in Role}
        try:
            spec = SamplerSpec(strategy, s, seed=seed, role_policy=policy)
            overrides = fna_overrides(w, spec, start, massive=massive, artifact=artifact)
            out, _ = forward(x0, w, overrides, capture)
        except (SamplerSpecError, CapacityError) as e:
            logger.info("Policy %s invalid: %s", label, e)
            records.append(GridRecord(label, actions[Role.CLS], actions[Role.MASSIVE],
                                      actions[Role.ARTIFACT], s, math.nan, False, str(e)))
            continue
        drift = float(np.max(np.abs(out.astype(np.float64) - reference)))
        logger.info("Policy %s: drift %.4g", label, drift)
        records.append(GridRecord(label, actions[Role.CLS], actions[Role.MASSIVE],
                                  actions[Role.ARTIFACT], s, drift, True))
    return records
