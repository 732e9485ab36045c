"""Batch-level forward/backward entry points and the central-difference
verifier for every trainable tensor group."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .core import RetentiveCore
from .params import ModelParams


@dataclass
class Batch:
    """One training batch: scored events plus their corrupted destinations."""

    indices: np.ndarray
    negatives: np.ndarray | None = None
    task: str = "link_prediction"

    @classmethod
    def from_stream(cls, stream, indices, seed=0, task="link_prediction"):
        indices = np.asarray(indices, dtype=np.int64)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA]))
        pool = stream.dst_pool
        negs = pool[rng.integers(len(pool), size=len(indices))]
        return cls(indices, negs, task)


def batch_loss(core: RetentiveCore, tensors, batch: Batch):
    """Loss of one batch against the pre-batch persisted state."""
    stream = core.stream
    idx = batch.indices
    pieces = []
    if batch.task in ("link_prediction", "both"):
        loss, _ = M.link_batch_loss(core, tensors, stream.src[idx],
                                    stream.dst[idx], batch.negatives,
                                    stream.time[idx])
        pieces.append(loss)
    if batch.task in ("node_classification", "both"):
        labeled = idx[stream.labels[idx] >= 0]
        if len(labeled):
            loss, _ = M.node_batch_loss(core, tensors, stream.src[labeled],
                                        stream.time[labeled],
                                        stream.labels[labeled])
            pieces.append(loss)
    total = pieces[0]
    for p in pieces[1:]:
        total = ad.add(total, p)
    return total


def forward_with_tape(core: RetentiveCore, params: ModelParams, batch: Batch):
    """Traced forward; the returned loss Node anchors the tape."""
    if not all(np.all(np.isfinite(v)) for v in params.tensors.values()):
        raise FloatingPointError("non-finite parameter tensor")
    tape = ad.Tape()
    leaves = M.wrap_params(params, tape)
    loss = batch_loss(core, leaves, batch)
    if not np.isfinite(ad.val(loss)):
        raise FloatingPointError("non-finite loss")
    return loss, tape, leaves


def backward(tape, loss, leaves) -> dict:
    """Adjoints for every raw parameter tensor, keyed by tensor name."""
    gset = ad.backward(tape, loss)
    grads = {name: gset.of(node) for name, node in leaves.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    return grads


def _select_scalars(size, limit):
    if size <= limit:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, limit).astype(np.int64))


def finite_diff_check(core: RetentiveCore, params: ModelParams, batch: Batch,
                      eps: float = 1e-5, which=None, per_tensor: int = 4):
    """Central differences against the reverse-mode adjoints.

    The pre-batch state inside `core` is held fixed throughout, matching the
    cross-batch truncation rule. Returns {group label: max relative error}
    with the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps out of the supported range")
    loss, tape, leaves = forward_with_tape(core, params, batch)
    grads = backward(tape, loss, leaves)

    def loss_at():
        return float(ad.val(batch_loss(core, dict(params.tensors), batch)))

    report = {}
    for name in sorted(params.tensors):
        group = params.group_of(name)
        if which is not None and group not in which and name not in which:
            continue
        arr = params.tensors[name]
        flat = arr.reshape(-1)
        g_flat = grads[name].reshape(-1)
        worst = report.get(group, 0.0)
        for j in _select_scalars(flat.size, per_tensor):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_at()
            flat[j] = orig - eps
            dn = loss_at()
            flat[j] = orig
            numeric = (up - dn) / (2.0 * eps)
            analytic = float(g_flat[j])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric),
                                                1e-8)
            worst = max(worst, rel)
        report[group] = worst
    return report
