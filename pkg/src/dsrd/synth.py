"""Seeded synthetic event-stream generators and the scaling benchmark."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .core import RetentiveCore
from .events import EventStream
from .params import init_params

PATTERNS = ("periodic", "bursty", "chain", "uniform")


@dataclass
class SynthSpec:
    pattern: str = "periodic"
    num_nodes: int = 100
    num_events: int = 1000
    period: float = 1.0
    jitter: float = 0.02
    burst_size: int = 8
    bipartite: bool = False
    seed: int = 0
    feature_dims: tuple = (16, 0)
    label_frac: float = 0.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.num_events < 1 or self.num_nodes < 2:
            raise ValueError("need at least 2 nodes and 1 event")


def _node_features(spec, rng):
    d_x = spec.feature_dims[0]
    if d_x == 0:
        return None
    return rng.standard_normal((spec.num_nodes, d_x))


def _edge_features(spec, rng, n):
    m = spec.feature_dims[1]
    return rng.standard_normal((n, m)) if m else np.zeros((n, 0))


def _labels(spec, rng, src):
    labels = np.full(len(src), -1, dtype=np.int8)
    if spec.label_frac > 0:
        hot = rng.random(spec.num_nodes) < 0.5
        pick = rng.random(len(src)) < spec.label_frac
        noise = rng.random(len(src)) < 0.05
        labels[pick] = (hot[src[pick]] ^ noise[pick]).astype(np.int8)
    return labels


def _pairing(spec, rng):
    """Disjoint recurring pairs; bipartite streams pair across the halves."""
    if spec.bipartite:
        half = spec.num_nodes // 2
        left = rng.permutation(half)
        right = half + rng.permutation(spec.num_nodes - half)[:half]
        return np.stack([left, right[:len(left)]], axis=1)
    perm = rng.permutation(spec.num_nodes)
    k = len(perm) // 2
    return np.stack([perm[:k], perm[k:2 * k]], axis=1)


def generate(spec: SynthSpec) -> EventStream:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5F]))
    if spec.pattern == "chain":
        n = spec.num_nodes
        src = np.arange(n - 1)
        dst = np.arange(1, n)
        tt = np.arange(1.0, n, 1.0)
    elif spec.pattern == "periodic":
        pairs = _pairing(spec, rng)
        p = len(pairs)
        reps = int(np.ceil(spec.num_events / p))
        rep_i, pair_i = np.divmod(np.arange(reps * p), p)
        tt = (rep_i + pair_i / p) * spec.period \
            + spec.jitter * spec.period * rng.random(reps * p)
        src = pairs[pair_i, 0]
        dst = pairs[pair_i, 1]
        order = np.argsort(tt, kind="stable")[:spec.num_events]
        src, dst, tt = src[order], dst[order], tt[order]
    elif spec.pattern == "bursty":
        src_l, dst_l, tt_l = [], [], []
        t = 0.0
        while len(src_l) < spec.num_events:
            t += float(rng.exponential(1.0))
            u, v = _random_pair(spec, rng)
            size = 1 + int(rng.poisson(spec.burst_size - 1))
            for j in range(size):
                src_l.append(u)
                dst_l.append(v)
                tt_l.append(t + 0.001 * (j + 1) * (1.0 + rng.random()))
        src = np.array(src_l[:spec.num_events])
        dst = np.array(dst_l[:spec.num_events])
        tt = np.array(tt_l[:spec.num_events])
    else:  # uniform
        src = np.empty(spec.num_events, dtype=np.int64)
        dst = np.empty(spec.num_events, dtype=np.int64)
        for i in range(spec.num_events):
            src[i], dst[i] = _random_pair(spec, rng)
        tt = np.sort(rng.random(spec.num_events) * spec.num_events * 0.1)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    return EventStream(src, dst, tt, _edge_features(spec, rng, len(src)),
                       _labels(spec, rng, src), spec.num_nodes,
                       _node_features(spec, rng))


def _random_pair(spec, rng):
    if spec.bipartite:
        half = spec.num_nodes // 2
        return int(rng.integers(half)), int(half + rng.integers(spec.num_nodes - half))
    u = int(rng.integers(spec.num_nodes))
    v = int(rng.integers(spec.num_nodes - 1))
    return u, v + (v >= u)


# ---------------------------------------------------------------------------
# scaling benchmark


@dataclass
class BenchRow:
    events: int
    nodes: int
    forward_ms: float
    backward_ms: float
    mem_mb: float


def _bench_stream(stream, params, batch_size, seed):
    """One timed pass: per batch, traced forward loss, backward, commit.

    Forward time includes the state commits (both are per-event work);
    backward is the adjoint sweep alone.
    """
    core = RetentiveCore(stream, params.config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB3]))
    pool = stream.dst_pool
    fwd = bwd = 0.0
    n = len(stream)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        src, dst, tt = stream.src[idx], stream.dst[idx], stream.time[idx]
        neg = pool[rng.integers(len(pool), size=len(idx))]
        t0 = time.perf_counter()
        tape = ad.Tape()
        leaves = M.wrap_params(params, tape)
        loss, _ = M.link_batch_loss(core, leaves, src, dst, neg, tt)
        t1 = time.perf_counter()
        ad.backward(tape, loss)
        t2 = time.perf_counter()
        core.process_events(params, idx)
        t3 = time.perf_counter()
        fwd += (t1 - t0) + (t3 - t2)
        bwd += t2 - t1
    state_bytes = core._S.nbytes + sum(v.nbytes for v in params.tensors.values())
    return 1000.0 * fwd, 1000.0 * bwd, state_bytes / 1e6


def scaling_suite(sizes, model_config, repeats=3, seed=0, num_nodes=None,
                  batch_size=200):
    """Median forward/backward wall time per stream size.

    The first (warm-up) run of each size is discarded; timings use a
    monotonic clock. Node count defaults to a tenth of the event count.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rows = []
    for size in sizes:
        nodes = num_nodes or max(64, size // 10)
        spec = SynthSpec(pattern="uniform", num_nodes=nodes, num_events=size,
                         seed=seed, feature_dims=(0, 0))
        stream = generate(spec)
        params = init_params(model_config, stream.feature_dims, seed=seed)
        fs, bs, mem = [], [], 0.0
        for rep in range(repeats + 1):
            f, b, mem = _bench_stream(stream, params, batch_size, seed + rep)
            if rep == 0:
                continue  # warm-up discarded
            fs.append(f)
            bs.append(b)
        rows.append(BenchRow(size, nodes, float(np.median(fs)),
                             float(np.median(bs)), mem))
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("events,nodes,forward_ms,backward_ms\n")
        for r in rows:
            f.write(f"{r.events},{r.nodes},{r.forward_ms:.3f},{r.backward_ms:.3f}\n")


def fit_power_law(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
