"""Explicit temporal-walk diffusion matrices and brute-force oracles.

Everything here is oracle-scale ground truth (|V| <= 64) for the implicit
state propagation in `core`; none of it runs in the production path.
"""
from __future__ import annotations

import numpy as np

MAX_ORACLE_NODES = 64
MAX_ENUM_EVENTS = 20


class TransitionMatrix:
    """Instantaneous transitions at one distinct timestamp."""

    def __init__(self, t: float, T: np.ndarray):
        self.t = float(t)
        self.T = np.asarray(T, dtype=np.float64)

    @classmethod
    def from_events(cls, t, srcs, dsts, num_nodes, weights=None, symmetric=False):
        T = np.zeros((num_nodes, num_nodes))
        w = np.ones(len(srcs)) if weights is None else np.asarray(weights, float)
        np.add.at(T, (srcs, dsts), w)
        if symmetric:
            np.add.at(T, (dsts, srcs), w)
        return cls(t, T)


class WalkKernel:
    """Depth-indexed walk-score matrices A^(0..K).

    A^(0) stays the identity; A^(l) counts (or weight-sums) time-respecting
    walks of length l. Updates fold all events at one distinct timestamp
    into a single transition matrix.
    """

    def __init__(self, num_nodes: int, depth: int):
        if num_nodes > MAX_ORACLE_NODES:
            raise ValueError("oracle kernel limited to 64 nodes")
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self.A = [np.zeros((num_nodes, num_nodes)) for _ in range(depth + 1)]
        self.A[0] = np.eye(num_nodes)
        self.last_time = -np.inf

    def update(self, trans: TransitionMatrix):
        if trans.t <= self.last_time:
            raise ValueError("timestamps must strictly increase")
        if trans.T.shape != self.A[0].shape:
            raise ValueError("dimension mismatch")
        # descending depth so each level reads the pre-update level below it
        for depth in range(self.depth, 0, -1):
            self.A[depth] = self.A[depth] + self.A[depth - 1] @ trans.T
        self.last_time = trans.t

    def to_csv(self, path):
        """Debug dump: one row per (depth, i, j) with a nonzero score."""
        with open(path, "w", encoding="utf-8") as f:
            f.write("depth,i,j,score\n")
            for depth, mat in enumerate(self.A):
                for i, j in zip(*np.nonzero(mat)):
                    f.write(f"{depth},{i},{j},{mat[i, j]!r}\n")


def kernel_update(kernel: WalkKernel, trans: TransitionMatrix) -> WalkKernel:
    kernel.update(trans)
    return kernel


def transition_groups(stream, t=None, weights=None, symmetric=False):
    """One TransitionMatrix per distinct timestamp <= t, in time order."""
    out = []
    times = stream.unique_times if t is None else stream.unique_times[stream.unique_times <= t]
    for tau in times:
        sel = stream.time == tau
        w = None if weights is None else weights[sel]
        out.append(
            TransitionMatrix.from_events(
                tau, stream.src[sel], stream.dst[sel], stream.num_nodes, w, symmetric
            )
        )
    return out


def kernel_from_stream(stream, depth, t=None, symmetric=False) -> WalkKernel:
    kernel = WalkKernel(stream.num_nodes, depth)
    for trans in transition_groups(stream, t, symmetric=symmetric):
        kernel.update(trans)
    return kernel


def closed_form_kernel(stream, t, depth, symmetric=False) -> np.ndarray:
    """Direct expansion: sum over strictly increasing timestamp tuples of the
    corresponding transition products; zero when fewer distinct times than
    `depth` have occurred."""
    if stream.num_nodes > MAX_ORACLE_NODES:
        raise ValueError("oracle kernel limited to 64 nodes")
    groups = transition_groups(stream, t, symmetric=symmetric)
    n = stream.num_nodes
    if depth == 0:
        return np.eye(n)
    if len(groups) < depth:
        return np.zeros((n, n))
    # partial[j] = sum over increasing j-tuples ending at the current prefix
    partial = [np.eye(n)] + [np.zeros((n, n)) for _ in range(depth)]
    for g in groups:
        for j in range(depth, 0, -1):
            partial[j] = partial[j] + partial[j - 1] @ g.T
    return partial[depth]


def enumerate_walks(stream, t, length, i, j, symmetric=False) -> int:
    """Exhaustively count length-`length` walks i -> j whose step times are
    strictly increasing distinct event times up to `t`."""
    sel = stream.time <= t
    n_events = int(sel.sum())
    if n_events > MAX_ENUM_EVENTS:
        raise ValueError("enumeration guard exceeded")
    edges = list(zip(stream.src[sel].tolist(), stream.dst[sel].tolist(),
                     stream.time[sel].tolist()))
    if symmetric:
        edges = edges + [(d, s, tt) for (s, d, tt) in edges]

    def count(frm, steps_left, min_exclusive_time):
        if steps_left == 0:
            return 1 if frm == j else 0
        total = 0
        for (s, d, tt) in edges:
            if s == frm and tt > min_exclusive_time:
                total += count(d, steps_left - 1, tt)
        return total

    return count(i, length, -np.inf)
