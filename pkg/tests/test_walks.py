import numpy as np
import pytest

from dsrd.events import EventStream
from dsrd.walks import (TransitionMatrix, WalkKernel, closed_form_kernel,
                        enumerate_walks, kernel_from_stream, kernel_update)


def _stream(src, dst, tt, num_nodes):
    n = len(src)
    return EventStream(src, dst, tt, np.zeros((n, 0)), [-1] * n, num_nodes)


CHAIN = _stream([0, 1], [1, 2], [1.0, 2.0], 3)
CHAIN_REV = _stream([1, 0], [2, 1], [1.0, 2.0], 3)


def test_first_event_base_case():
    kernel = WalkKernel(3, depth=1)
    kernel_update(kernel, TransitionMatrix.from_events(1.0, [0], [1], 3))
    expect = np.zeros((3, 3))
    expect[0, 1] = 1.0
    assert np.array_equal(kernel.A[1], expect)


def test_chain_depth_two_score():
    kernel = kernel_from_stream(CHAIN, 2)
    # oracle: exhaustive enumeration of time-respecting 2-walks
    assert kernel.A[2][0, 2] == enumerate_walks(CHAIN, 2.0, 2, 0, 2) == 1


def test_reversed_chain_is_zero():
    kernel = kernel_from_stream(CHAIN_REV, 2)
    assert kernel.A[2][0, 2] == enumerate_walks(CHAIN_REV, 2.0, 2, 0, 2) == 0


def test_update_requires_increasing_time():
    kernel = kernel_from_stream(CHAIN, 2)
    with pytest.raises(ValueError):
        kernel.update(TransitionMatrix.from_events(2.0, [0], [1], 3))


def test_depth_zero_identity_and_early_zero():
    one_time = _stream([0, 1], [1, 2], [1.0, 1.0], 3)
    assert np.array_equal(closed_form_kernel(one_time, 1.0, 2),
                          np.zeros((3, 3)))
    kernel = kernel_from_stream(one_time, 3)
    assert np.array_equal(kernel.A[0], np.eye(3))
    assert np.array_equal(kernel.A[2], np.zeros((3, 3)))
    assert np.array_equal(kernel.A[3], np.zeros((3, 3)))


def test_depth_one_is_transition_sum():
    stream = _stream([0, 1, 0], [1, 2, 2], [1.0, 2.0, 3.0], 3)
    total = np.zeros((3, 3))
    for tau in np.unique(stream.time):
        sel = stream.time == tau
        np.add.at(total, (stream.src[sel], stream.dst[sel]), 1.0)
    assert np.array_equal(closed_form_kernel(stream, 3.0, 1), total)


def test_chain_enumeration_examples():
    assert enumerate_walks(CHAIN, 2.0, 1, 0, 2) == 0
    dup = _stream([0, 0, 1], [1, 1, 2], [1.0, 1.0, 2.0], 3)
    assert enumerate_walks(dup, 2.0, 2, 0, 2) == 2


def test_enumeration_guard():
    big = _stream(list(range(21)), list(range(1, 22)),
                  list(np.arange(1.0, 22.0)), 22)
    with pytest.raises(ValueError):
        enumerate_walks(big, 30.0, 2, 0, 2)


def _random_stream(rng, num_nodes, n_events, n_times):
    src = rng.integers(0, num_nodes, n_events)
    dst = (src + 1 + rng.integers(0, num_nodes - 1, n_events)) % num_nodes
    tt = np.sort(rng.choice(np.arange(1.0, n_times + 1.0), n_events))
    return _stream(src, dst, tt, num_nodes)


def test_recursion_equals_expansion_exactly():
    rng = np.random.default_rng(11)
    for _ in range(30):
        stream = _random_stream(rng, int(rng.integers(2, 9)),
                                int(rng.integers(1, 14)),
                                int(rng.integers(1, 10)))
        depth = int(rng.integers(1, 5))
        kernel = kernel_from_stream(stream, depth)
        t_end = stream.time[-1]
        for l in range(1, depth + 1):
            assert np.array_equal(kernel.A[l],
                                  closed_form_kernel(stream, t_end, l)), \
                "recursion and expansion disagree"


def test_walk_count_semantics_exhaustive():
    rng = np.random.default_rng(13)
    for _ in range(15):
        stream = _random_stream(rng, int(rng.integers(2, 6)),
                                int(rng.integers(1, 9)),
                                int(rng.integers(1, 6)))
        kernel = kernel_from_stream(stream, 3)
        for l in range(1, 4):
            for i in range(stream.num_nodes):
                for j in range(stream.num_nodes):
                    assert kernel.A[l][i, j] == enumerate_walks(
                        stream, stream.time[-1], l, i, j)


def test_same_timestamp_events_never_chain():
    stream = _stream([0, 1], [1, 2], [5.0, 5.0], 3)
    kernel = kernel_from_stream(stream, 2)
    assert kernel.A[2][0, 2] == 0
    assert enumerate_walks(stream, 5.0, 2, 0, 2) == 0


def test_weighted_transitions():
    trans = TransitionMatrix.from_events(1.0, [0, 0], [1, 1], 2,
                                         weights=[0.25, 0.5])
    assert trans.T[0, 1] == 0.75


def test_kernel_csv_export(tmp_path):
    kernel = kernel_from_stream(CHAIN, 2)
    path = tmp_path / "kernel.csv"
    kernel.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "depth,i,j,score"
    assert any(line.startswith("2,0,2,") for line in lines)
