"""Negative-sampling strategies and the chronological evaluation sweeps."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import RetentiveCore
from .metrics import average_precision, roc_auc
from . import model as M

STRATEGIES = ("random", "historical", "inductive")


class _Pool:
    """Append-only deduplicated candidate pool with stable order."""

    __slots__ = ("items", "seen")

    def __init__(self):
        self.items = []
        self.seen = set()

    def add(self, x):
        if x not in self.seen:
            self.seen.add(x)
            self.items.append(x)

    def __len__(self):
        return len(self.items)


class NegativeSampler:
    """Draws a corrupted destination for each positive pair.

    random     — uniform over the stream's destination side, excluding the
                 true destination;
    historical — destinations previously paired with the same source, then
                 any previously seen destination, then random;
    inductive  — destinations from pairs first observed during the sweep and
                 absent from training, same-source first, then random.

    Draws are deterministic given (seed, call sequence). `observe` must be
    called for each positive after its negative is drawn.
    """

    def __init__(self, strategy, stream, seed, train_pairs=None):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E6]))
        self.pool = stream.dst_pool
        self.train_pairs = frozenset(train_pairs or ())
        self.by_src = {}
        self.global_dst = _Pool()
        self.new_by_src = {}
        self.new_global = _Pool()

    def observe(self, u, v):
        self.by_src.setdefault(u, _Pool()).add(v)
        self.global_dst.add(v)
        if self.strategy == "inductive" and (u, v) not in self.train_pairs:
            self.new_by_src.setdefault(u, _Pool()).add(v)
            self.new_global.add(v)

    def _draw(self, items, exclude):
        """Uniform draw from `items` minus {exclude}; None when exhausted."""
        if isinstance(items, _Pool):
            seq, has = items.items, exclude in items.seen
        else:  # sorted ndarray
            seq = items
            pos = np.searchsorted(seq, exclude)
            has = pos < len(seq) and seq[pos] == exclude
        n = len(seq)
        if n - (1 if has else 0) <= 0:
            return None
        while True:
            cand = seq[int(self.rng.integers(n))]
            if cand != exclude:
                return int(cand)

    def sample(self, u, v):
        if self.strategy == "historical":
            got = self._draw(self.by_src[u], v) if u in self.by_src else None
            if got is None:
                got = self._draw(self.global_dst, v)
            if got is not None:
                return got
        elif self.strategy == "inductive":
            got = self._draw(self.new_by_src[u], v) if u in self.new_by_src else None
            if got is None:
                got = self._draw(self.new_global, v)
            if got is not None:
                return got
        got = self._draw(self.pool, v)
        return int(self.pool[0]) if got is None else got


def sample_negative(sampler: NegativeSampler, positive):
    """Corrupt the destination of one positive (u, v, t)."""
    u, v, t = positive
    return (u, sampler.sample(u, v), t)


@dataclass
class MetricReport:
    ap: float
    roc_auc: float
    n_samples: int
    setting: str
    strategy: str
    seed: int
    auprc: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {"setting": self.setting, "strategy": self.strategy,
                   "ap": self.ap, "roc_auc": self.roc_auc, "n": self.n_samples,
                   "seed": self.seed}
        if self.auprc is not None:
            payload["auprc"] = self.auprc
        payload.update(self.extra)
        return json.dumps(payload, sort_keys=True)


def _pairs_of(stream, indices):
    return set(zip(stream.src[indices].tolist(), stream.dst[indices].tolist()))


def _replay_indices(stream, split, part):
    """History to rebuild before sweeping: masked train, then (for the test
    part) the full validation slice."""
    hist = list(split.train_indices(stream))
    if part == "test":
        hist += list(range(split.train_end_idx, split.val_end_idx))
    return np.asarray(hist, dtype=np.int64)


def evaluate_link(params, stream, split, setting="transductive",
                  strategy="random", part="test", seed=0, batch_size=200,
                  scorer=None) -> MetricReport:
    """Chronological link-prediction sweep with one negative per positive.

    Each positive is scored against the state built strictly before its
    batch; the batch commits afterwards. In the inductive setting only
    positives touching the withheld node set are scored (all events still
    advance the state).
    """
    if setting not in ("transductive", "inductive"):
        raise ValueError(f"unknown setting {setting!r}")
    checksum = params.checksum()
    cfg = params.config
    core = RetentiveCore(stream, cfg)
    hist = _replay_indices(stream, split, part)
    lo = split.val_end_idx if part == "test" else split.train_end_idx
    hi = len(stream) if part == "test" else split.val_end_idx

    sampler = NegativeSampler(strategy, stream, seed,
                              train_pairs=_pairs_of(stream, split.train_indices(stream)))
    for i in hist:
        sampler.observe(int(stream.src[i]), int(stream.dst[i]))
    if len(hist):
        core.process_events(params, hist)

    new_nodes = np.zeros(stream.num_nodes, dtype=bool)
    if split.new_node_set:
        new_nodes[list(split.new_node_set)] = True

    scores, labels = [], []
    t_dict = M.wrap_params(params, None)
    for start in range(lo, hi, batch_size):
        idx = np.arange(start, min(start + batch_size, hi))
        if setting == "inductive":
            keep = new_nodes[stream.src[idx]] | new_nodes[stream.dst[idx]]
            scored = idx[keep]
        else:
            keep = np.ones(len(idx), dtype=bool)
            scored = idx
        negs = []
        for i, take in zip(idx, keep):
            u, v = int(stream.src[i]), int(stream.dst[i])
            if take:
                negs.append(sampler.sample(u, v))
            sampler.observe(u, v)
        if len(scored):
            su, sv = stream.src[scored], stream.dst[scored]
            sn = np.asarray(negs, dtype=np.int64)
            tt = stream.time[scored]
            if scorer is not None:
                p_pos = np.asarray(scorer(su, sv, tt), dtype=np.float64)
                p_neg = np.asarray(scorer(su, sn, tt), dtype=np.float64)
            else:
                _, probs = M.link_batch_loss(core, t_dict, su, sv, sn, tt)
                probs = np.asarray(probs, dtype=np.float64)
                p_pos, p_neg = probs[:len(scored)], probs[len(scored):]
            for a, b in zip(p_pos, p_neg):
                scores.extend((float(a), float(b)))
                labels.extend((1, 0))
        core.process_events(params, idx)

    if not scores:
        raise ValueError("empty evaluation slice")
    if params.checksum() != checksum:
        raise RuntimeError("evaluation mutated model parameters")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return MetricReport(
        ap=average_precision(scores, labels),
        roc_auc=roc_auc(scores, labels),
        n_samples=len(scores),
        setting=setting,
        strategy=strategy,
        seed=seed,
    )


def evaluate_node(params, stream, split, part="test", batch_size=200,
                  scorer=None) -> MetricReport:
    """Node-label sweep: score each labeled event's source node at the event
    time, then commit. Reports ROC-AUC and AUPRC."""
    checksum = params.checksum()
    cfg = params.config
    core = RetentiveCore(stream, cfg)
    hist = _replay_indices(stream, split, part)
    if len(hist):
        core.process_events(params, hist)
    lo = split.val_end_idx if part == "test" else split.train_end_idx
    hi = len(stream) if part == "test" else split.val_end_idx

    scores, labels = [], []
    t_dict = M.wrap_params(params, None)
    for start in range(lo, hi, batch_size):
        idx = np.arange(start, min(start + batch_size, hi))
        labeled = idx[stream.labels[idx] >= 0]
        if len(labeled):
            nodes = stream.src[labeled]
            tt = stream.time[labeled]
            if scorer is not None:
                p = np.asarray(scorer(nodes, tt), dtype=np.float64)
            else:
                h = M.embed_nodes(core, t_dict, nodes, tt)
                p = np.asarray(M.classify_node(h, t_dict))[:, 0]
            scores.extend(float(x) for x in p)
            labels.extend(int(x) for x in stream.labels[labeled])
        core.process_events(params, idx)

    labels_arr = np.asarray(labels)
    if len(labels_arr) == 0 or len(np.unique(labels_arr)) < 2:
        raise ValueError("need both label classes in the evaluation slice")
    if params.checksum() != checksum:
        raise RuntimeError("evaluation mutated model parameters")
    scores_arr = np.asarray(scores)
    return MetricReport(
        ap=average_precision(scores_arr, labels_arr),
        roc_auc=roc_auc(scores_arr, labels_arr),
        auprc=average_precision(scores_arr, labels_arr),
        n_samples=len(scores_arr),
        setting="transductive",
        strategy="labels",
        seed=0,
    )
