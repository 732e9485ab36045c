"""Event streams: ingest, validation, chronological splits, temporal neighbors."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


class StreamError(ValueError):
    """Malformed input data or an invalid split request."""


@dataclass(frozen=True)
class Event:
    """One timestamped interaction. `label` is None when the row carries none."""

    src: int
    dst: int
    time: float
    edge_feat: np.ndarray
    label: int | None
    idx: int


class EventStream:
    """Chronologically sorted event log plus node features and a neighbor index.

    Immutable after construction; safe to share across readers. Events are
    stored as parallel arrays sorted stably by (time, original order).
    """

    def __init__(self, src, dst, time, edge_feat, labels, num_nodes, node_feat=None):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        time = np.asarray(time, dtype=np.float64)
        n = len(src)
        if n == 0:
            raise StreamError("empty stream")
        if not (len(dst) == len(time) == n):
            raise StreamError("column length mismatch")
        if np.any(time < 0):
            raise StreamError("negative timestamp")
        edge_feat = np.asarray(edge_feat, dtype=np.float64).reshape(n, -1)
        labels = np.asarray(labels, dtype=np.int8)

        order = np.argsort(time, kind="stable")
        self.src = src[order]
        self.dst = dst[order]
        self.time = time[order]
        self.edge_feat = edge_feat[order]
        self.labels = labels[order]

        lo = min(self.src.min(), self.dst.min())
        if lo < 0:
            raise StreamError("negative node id")
        hi = int(max(self.src.max(), self.dst.max()))
        if num_nodes is None:
            num_nodes = hi + 1
        elif hi >= num_nodes:
            raise StreamError(f"node id {hi} exceeds declared node count {num_nodes}")
        self.num_nodes = int(num_nodes)

        if node_feat is None:
            node_feat = np.zeros((self.num_nodes, 0), dtype=np.float64)
        node_feat = np.asarray(node_feat, dtype=np.float64)
        if node_feat.shape[0] != self.num_nodes:
            raise StreamError("node feature table size mismatch")
        self.node_feat = node_feat

        self.unique_times = np.unique(self.time)
        self._nbr = None
        self._bipartite = None

    def __len__(self):
        return len(self.src)

    @property
    def feature_dims(self):
        return (self.node_feat.shape[1], self.edge_feat.shape[1])

    def event(self, i) -> Event:
        lab = int(self.labels[i])
        return Event(
            src=int(self.src[i]),
            dst=int(self.dst[i]),
            time=float(self.time[i]),
            edge_feat=self.edge_feat[i],
            label=None if lab < 0 else lab,
            idx=i,
        )

    @property
    def bipartite(self) -> bool:
        """Disjoint source/destination sides with at least two nodes each."""
        if self._bipartite is None:
            srcs = set(self.src.tolist())
            dsts = set(self.dst.tolist())
            self._bipartite = (not srcs & dsts) and len(srcs) > 1 and len(dsts) > 1
        return self._bipartite

    @property
    def dst_pool(self) -> np.ndarray:
        """Candidate destinations for negative sampling."""
        if self.bipartite:
            return np.unique(self.dst)
        return np.arange(self.num_nodes)

    @property
    def neighbors(self) -> "NeighborIndex":
        if self._nbr is None:
            self._nbr = NeighborIndex(self)
        return self._nbr


class NeighborIndex:
    """Per-node (neighbor, event-idx, time) lists in ascending time.

    Events enter both endpoints' lists, so adjacency is undirected.
    """

    def __init__(self, stream: EventStream):
        n = len(stream)
        ends = np.concatenate([stream.src, stream.dst])
        others = np.concatenate([stream.dst, stream.src])
        eidx = np.concatenate([np.arange(n), np.arange(n)])
        times = np.concatenate([stream.time, stream.time])
        # stable sort by (node, event idx); time order follows from stream order
        order = np.lexsort((eidx, ends))
        ends, others, eidx, times = ends[order], others[order], eidx[order], times[order]
        starts = np.searchsorted(ends, np.arange(stream.num_nodes), side="left")
        stops = np.searchsorted(ends, np.arange(stream.num_nodes), side="right")
        self._nbr = others
        self._eidx = eidx
        self._time = times
        self._starts = starts
        self._stops = stops

    def recent(self, node: int, t: float, k: int):
        """Up to `k` entries strictly before `t`, most recent first."""
        lo, hi = self._starts[node], self._stops[node]
        cut = lo + np.searchsorted(self._time[lo:hi], t, side="left")
        beg = max(lo, cut - k)
        if cut <= beg:
            empty = self._nbr[:0]
            return empty, self._eidx[:0], self._time[:0]
        sl = slice(cut - 1, beg - 1 if beg > 0 else None, -1)
        return self._nbr[sl], self._eidx[sl], self._time[sl]

    def degree_before(self, node: int, t: float) -> int:
        lo, hi = self._starts[node], self._stops[node]
        return int(np.searchsorted(self._time[lo:hi], t, side="left"))


def recent_neighbors(index: NeighborIndex, node: int, t: float, k: int):
    """Convenience accessor returning a list of (neighbor, event_idx, time)."""
    nbr, eidx, times = index.recent(node, t, k)
    return list(zip(nbr.tolist(), eidx.tolist(), times.tolist()))


@dataclass(frozen=True)
class SplitPlan:
    train_end_idx: int
    val_end_idx: int
    new_node_set: frozenset = field(default_factory=frozenset)
    mode: str = "transductive"

    def train_indices(self, stream: EventStream) -> np.ndarray:
        """Training event indices, with new-node events masked out."""
        idx = np.arange(self.train_end_idx)
        if not self.new_node_set:
            return idx
        banned = np.zeros(stream.num_nodes, dtype=bool)
        banned[list(self.new_node_set)] = True
        keep = ~(banned[stream.src[idx]] | banned[stream.dst[idx]])
        return idx[keep]


def subset_stream(stream: EventStream, indices) -> EventStream:
    """Reindexed copy containing only the given events; node table shared."""
    indices = np.asarray(indices, dtype=np.int64)
    return EventStream(stream.src[indices], stream.dst[indices],
                       stream.time[indices], stream.edge_feat[indices],
                       stream.labels[indices], stream.num_nodes,
                       stream.node_feat)


def chronological_split(stream: EventStream, train_frac: float, val_frac: float) -> SplitPlan:
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1:
        raise StreamError("split fractions out of range")
    n = len(stream)
    a = int(np.floor(train_frac * n))
    b = int(np.floor((train_frac + val_frac) * n))
    if a == 0:
        raise StreamError("empty training set")
    return SplitPlan(train_end_idx=a, val_end_idx=b)


def inductive_split(
    stream: EventStream,
    train_frac: float,
    val_frac: float,
    new_node_frac: float = 0.10,
    seed: int = 0,
) -> SplitPlan:
    """Withhold a seeded node sample from training for inductive evaluation."""
    if not (0 < new_node_frac < 1):
        raise StreamError("new_node_frac out of range")
    base = chronological_split(stream, train_frac, val_frac)
    rng = np.random.default_rng(seed)
    k = int(np.floor(new_node_frac * stream.num_nodes))
    new_nodes = frozenset(
        rng.choice(stream.num_nodes, size=k, replace=False).tolist()
    )
    plan = SplitPlan(base.train_end_idx, base.val_end_idx, new_nodes, "inductive")
    if len(plan.train_indices(stream)) == 0:
        raise StreamError("empty training set")
    return plan


# ---------------------------------------------------------------------------
# CSV interchange


def _parse_float(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise StreamError(f"line {lineno}: bad number {tok!r}") from None


def ingest_csv(path, node_feat_path=None) -> EventStream:
    """Parse the event CSV format: `src,dst,time,label[,ef_0..ef_{m-1}]`."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        return _ingest(f, node_feat_path)


def _ingest(f, node_feat_path=None) -> EventStream:
    header = f.readline().strip()
    cols = header.split(",")
    if cols[:4] != ["src", "dst", "time", "label"]:
        raise StreamError(f"bad header {header!r}")
    m = len(cols) - 4
    src, dst, time, labels, feats = [], [], [], [], []
    for lineno, line in enumerate(f, start=2):
        line = line.strip()
        if not line:
            continue
        toks = line.split(",")
        if len(toks) != 4 + m:
            raise StreamError(f"line {lineno}: expected {4 + m} fields, got {len(toks)}")
        try:
            src.append(int(toks[0]))
            dst.append(int(toks[1]))
        except ValueError:
            raise StreamError(f"line {lineno}: bad node id") from None
        t = _parse_float(toks[2], lineno)
        if t < 0:
            raise StreamError(f"line {lineno}: negative timestamp")
        time.append(t)
        lab = toks[3].strip()
        labels.append(-1 if lab == "" else int(lab))
        feats.append([_parse_float(x, lineno) for x in toks[4:]])
    if not src:
        raise StreamError("empty stream")

    node_feat = None
    num_nodes = None
    if node_feat_path is not None:
        node_feat, num_nodes = _read_node_feat(node_feat_path, max(max(src), max(dst)) + 1)
    return EventStream(src, dst, time, np.asarray(feats, dtype=np.float64),
                       labels, num_nodes, node_feat)


def _read_node_feat(path, min_nodes):
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if header[0] != "node":
            raise StreamError("bad node-feature header")
        d = len(header) - 1
        rows = {}
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            toks = line.split(",")
            if len(toks) != d + 1:
                raise StreamError(f"node features line {lineno}: arity mismatch")
            rows[int(toks[0])] = [_parse_float(x, lineno) for x in toks[1:]]
    num_nodes = max(min_nodes, max(rows) + 1 if rows else 0)
    table = np.zeros((num_nodes, d), dtype=np.float64)
    for node, vec in rows.items():
        table[node] = vec
    return table, num_nodes


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(stream: EventStream, path, node_feat_path=None):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_csv(stream))
    if node_feat_path is not None and stream.node_feat.shape[1] > 0:
        with open(node_feat_path, "w", encoding="utf-8", newline="\n") as f:
            d = stream.node_feat.shape[1]
            f.write("node," + ",".join(f"f_{i}" for i in range(d)) + "\n")
            for node in range(stream.num_nodes):
                row = ",".join(_fmt(x) for x in stream.node_feat[node])
                f.write(f"{node},{row}\n")


def dump_csv(stream: EventStream) -> str:
    m = stream.edge_feat.shape[1]
    buf = io.StringIO()
    buf.write("src,dst,time,label" + "".join(f",ef_{i}" for i in range(m)) + "\n")
    for i in range(len(stream)):
        lab = "" if stream.labels[i] < 0 else str(int(stream.labels[i]))
        row = f"{stream.src[i]},{stream.dst[i]},{_fmt(stream.time[i])},{lab}"
        if m:
            row += "," + ",".join(_fmt(x) for x in stream.edge_feat[i])
        buf.write(row + "\n")
    return buf.getvalue()
