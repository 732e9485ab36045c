"""Optimization loop: negative-sampled BCE, Adam, early stopping."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .config import TrainConfig
from .core import RetentiveCore
from .evaluation import evaluate_link, evaluate_node
from .params import ModelParams


def bce_loss(p: float, y: int) -> float:
    """Binary cross-entropy with the probability clamped away from {0, 1}."""
    p = min(max(float(p), M.PROB_EPS), 1.0 - M.PROB_EPS)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: dict, opt: OptimizerState, lr: float):
    """Standard bias-corrected Adam update, applied in place."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name in sorted(params.tensors):
        g = grads.get(name)
        if g is None:
            continue
        if np.any(np.isnan(g)):
            raise FloatingPointError(f"NaN gradient for {name}")
        g = g.astype(params.tensors[name].dtype, copy=False)
        m = opt.m.setdefault(name, np.zeros_like(params.tensors[name]))
        v = opt.v.setdefault(name, np.zeros_like(params.tensors[name]))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def _draw_negatives(rng, pool, true_dst):
    out = np.empty(len(true_dst), dtype=np.int64)
    n = len(pool)
    for i, v in enumerate(true_dst):
        cand = int(pool[int(rng.integers(n))])
        while cand == v and n > 1:
            cand = int(pool[int(rng.integers(n))])
        out[i] = cand
    return out


def _batch_grads(tape, leaves, loss):
    gset = ad.backward(tape, loss)
    return {name: gset.of(node) for name, node in leaves.items()}


def train_epoch(stream, train_idx, params, config: TrainConfig, opt,
                epoch: int, core: RetentiveCore | None = None) -> float:
    """One pass over the training slice: score each batch against the
    pre-batch state, apply Adam, then commit the batch's events."""
    if len(train_idx) == 0:
        raise ValueError("empty training slice")
    if core is None:
        core = RetentiveCore(stream, params.config)
    seed_seq = np.random.SeedSequence([config.seed, epoch, 0x7A])
    rng_neg, rng_drop = (np.random.default_rng(s) for s in seed_seq.spawn(2))
    pool = stream.dst_pool
    losses, weights = [], []
    for start in range(0, len(train_idx), config.batch_size):
        idx = train_idx[start:start + config.batch_size]
        tape = ad.Tape()
        leaves = M.wrap_params(params, tape)
        if config.task == "link_prediction":
            src, dst, tt = stream.src[idx], stream.dst[idx], stream.time[idx]
            neg = _draw_negatives(rng_neg, pool, dst)
            loss, _ = M.link_batch_loss(core, leaves, src, dst, neg, tt,
                                        training=True,
                                        dropout_rate=config.dropout,
                                        rng=rng_drop)
            n_scored = 2 * len(idx)
        else:
            labeled = idx[stream.labels[idx] >= 0]
            if len(labeled) == 0:
                core.process_events(params, idx)
                continue
            loss, _ = M.node_batch_loss(core, leaves, stream.src[labeled],
                                        stream.time[labeled],
                                        stream.labels[labeled],
                                        training=True,
                                        dropout_rate=config.dropout,
                                        rng=rng_drop)
            n_scored = len(labeled)
        grads = _batch_grads(tape, leaves, loss)
        if config.lr > 0:
            adam_step(params, grads, opt, config.lr)
        losses.append(float(ad.val(loss)))
        weights.append(n_scored)
        core.process_events(params, idx)
    if not losses:
        raise ValueError("no labeled events in the training slice")
    return float(np.average(losses, weights=weights))


@dataclass
class FitResult:
    best_params: ModelParams
    history: list
    best_epoch: int
    best_metric: float


def fit(stream, split, params, config: TrainConfig) -> FitResult:
    """Train with early stopping on the validation metric (AP for link
    prediction, ROC-AUC for node labels); returns the best checkpoint."""
    from .events import subset_stream

    opt = OptimizerState()
    if split.new_node_set:
        # withheld nodes must be invisible to training, including through
        # the temporal-neighbor window: train on a filtered view
        train_view = subset_stream(stream, split.train_indices(stream))
        view_idx = np.arange(len(train_view))
    else:
        train_view = stream
        view_idx = split.train_indices(stream)
    best = (-np.inf, 0, params.copy())
    history = []
    bad = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        mean_loss = train_epoch(train_view, view_idx, params, config, opt,
                                epoch)
        if config.task == "link_prediction":
            report = evaluate_link(params, stream, split, part="val",
                                   strategy="random", seed=config.seed,
                                   batch_size=config.batch_size,
                                   setting="transductive")
            metric = report.ap
        else:
            report = evaluate_node(params, stream, split, part="val",
                                   batch_size=config.batch_size)
            metric = report.roc_auc
        wall_ms = 1000.0 * (time.perf_counter() - t0)
        history.append({"epoch": epoch, "train_loss": mean_loss,
                        "val_ap": report.ap, "val_auc": report.roc_auc,
                        "wall_ms": wall_ms})
        if metric > best[0]:
            best = (metric, epoch, params.copy())
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    if config.max_epochs == 0:
        return FitResult(params.copy(), history, 0, -np.inf)
    return FitResult(best[2], history, best[1], best[0])
