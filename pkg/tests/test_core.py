import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from dsrd import autodiff as ad
from dsrd.config import ModelConfig
from dsrd.core import (RetentiveCore, Overrides, check_bound,
                       closed_form_state, decay_weight, flat_aggregation,
                       gated_update, readout, short_term_injection,
                       temporal_decay, topo_decay, topo_propagate)
from dsrd.events import EventStream
from dsrd.params import init_params
from dsrd.walks import kernel_from_stream


def _cfg(**kw):
    base = dict(dim=8, layers=2, heads=2, neighbors=5, time_dim=4,
                dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def _stream(src, dst, tt, num_nodes, feat=None):
    n = len(src)
    return EventStream(src, dst, tt, np.zeros((n, 0)), [-1] * n, num_nodes,
                       feat if feat is not None else np.eye(num_nodes))


def _random_stream(rng, num_nodes=6, n_events=20, n_times=12, d_x=3):
    src = rng.integers(0, num_nodes, n_events)
    dst = (src + 1 + rng.integers(0, num_nodes - 1, n_events)) % num_nodes
    tt = np.sort(rng.choice(np.arange(1.0, n_times + 1.0), n_events))
    feat = rng.standard_normal((num_nodes, d_x))
    return EventStream(src, dst, tt, np.zeros((n_events, 0)),
                       [-1] * n_events, num_nodes, feat)


CHAIN = _stream([0, 1], [1, 2], [1.0, 2.0], 3)
CHAIN_REV = _stream([1, 0], [2, 1], [1.0, 2.0], 3)


# ---------------------------------------------------------------------------
# unit formulas


def test_decay_weight_zero_lag_is_attention_only():
    q = np.array([1.0, 0.0])
    k = np.array([1.0, 1.0])
    w = float(ad.val(decay_weight(0.7, 0.5, q, k, 0.0)))
    from scipy.special import expit
    assert w == pytest.approx(float(expit(np.cos(0) * 0 + 1 / np.sqrt(2))))


def test_decay_weight_lambda_zero_limit():
    q = np.array([0.3, -0.2])
    k = np.array([0.1, 0.9])
    for dt in (0.0, 3.0, 500.0):
        w_off = float(ad.val(decay_weight(1e-12, 0.5, q, k, dt)))
        w_ref = float(ad.val(decay_weight(1e-12, 0.5, q, k, 0.0)))
        assert w_off == pytest.approx(w_ref, abs=1e-9)


def test_temporal_decay_unit_log_point():
    # log(1 + dt) = 1 at dt = e - 1, so the factor is exp(-1)
    fac = float(ad.val(temporal_decay(1.0, 0.5, np.e - 1.0)))
    assert fac == pytest.approx(np.exp(-1.0), abs=1e-12)


def test_decay_weight_zero_norm_similarity():
    w = float(ad.val(decay_weight(1.0, 0.5, np.zeros(3), np.ones(3), 0.0)))
    assert w == pytest.approx(0.5)  # sigmoid(0)


def test_decay_weight_rejects_nan():
    with pytest.raises(ValueError):
        decay_weight(1.0, 0.5, np.array([np.nan]), np.ones(1), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.05, 0.95),
       st.floats(0, 1e4), st.floats(0, 1e4))
def test_monotone_decay_in_elapsed_time(lam, alpha, dt1, dt2):
    lo, hi = sorted((dt1, dt2))
    f_lo = float(ad.val(temporal_decay(lam, alpha, lo)))
    f_hi = float(ad.val(temporal_decay(lam, alpha, hi)))
    assert f_hi <= f_lo + 1e-12
    # structural attenuation is monotone in both depth and elapsed time
    assert float(ad.val(topo_decay(lam, 3, hi))) <= \
        float(ad.val(topo_decay(lam, 2, hi))) + 1e-12
    assert float(ad.val(topo_decay(lam, 2, hi))) <= \
        float(ad.val(topo_decay(lam, 2, lo))) + 1e-12


def test_injection_empty_and_single_and_pair():
    dh = 3
    assert np.array_equal(short_term_injection(np.zeros((0, dh)),
                                               np.zeros((0, dh)), []),
                          np.zeros((dh, dh)))
    k = np.array([[1.0, 0.0, 2.0]])
    v = np.array([[0.5, 1.0, 0.0]])
    out = short_term_injection(k, v, [0.4])
    # denominator max(0.4, 1) = 1, so the weight stays 0.4
    assert np.allclose(out, 0.4 * np.outer(k[0], v[0]))
    k2 = np.vstack([k, k])
    v2 = np.vstack([v, v])
    out2 = short_term_injection(k2, v2, [2.0, 2.0])
    assert np.allclose(out2, np.outer(k[0], v[0]))  # weights normalize to 1/2


def test_gated_update_limits_and_two_steps():
    s = np.arange(4.0).reshape(2, 2)
    d = np.ones((2, 2))
    assert np.array_equal(ad.val(gated_update(s, d, 1.0)), s)
    assert np.array_equal(ad.val(gated_update(s, d, 0.0)), d)
    two = gated_update(gated_update(np.zeros((2, 2)), d, 0.5), d, 0.5)
    assert np.allclose(ad.val(two), 0.75 * d)


def test_readout_examples():
    assert np.array_equal(ad.val(readout(np.zeros((2, 2)), np.ones(2), 4)),
                          np.zeros(2))
    assert float(ad.val(readout(np.eye(1), np.array([3.0]), 1))[0]) == 3.0
    out = ad.val(readout(np.array([[0.0, 2.0], [5.0, 7.0]]),
                         np.array([1.0, 0.0]), 4))
    assert np.allclose(out, [0.0, 1.0])


def test_topo_propagate_unit_op():
    s_hi = {2: np.zeros((2, 2))}
    s_lo = {1: np.eye(2)}
    out = topo_propagate(s_hi, s_lo, [(2, 1, 0.0)], depth=2, delta=0.0)
    assert np.array_equal(out[2], np.eye(2))
    with pytest.raises(ValueError):
        topo_propagate(s_hi, s_lo, [(2, 1, 0.0)], depth=1, delta=0.0)


# ---------------------------------------------------------------------------
# recurrent path vs oracles


def test_closed_form_state_base_cases():
    cfg = _cfg()
    params = init_params(cfg, (3, 0), seed=0)
    stream = _random_stream(np.random.default_rng(0))
    empty = closed_form_state(stream, 0, 0, params)
    assert np.array_equal(empty, np.zeros_like(empty))


def test_single_timestamp_closed_form():
    cfg = _cfg()
    stream = _stream([0], [1], [1.0], 2, feat=np.eye(2))
    params = init_params(cfg, stream.feature_dims, seed=1)
    cf = closed_form_state(stream, 1, 1, params)
    core = RetentiveCore(stream, cfg, dtype=np.float64)
    core.process_events(params, np.arange(1))
    assert np.allclose(core.state_now(1, params), cf, atol=1e-15)
    # value is (1 - gamma) times the injection (empty retention product)
    gam = params.gamma_all()
    ov = Overrides(gate=(1.0, 1.0))
    raw = closed_form_state(stream, 1, 1, params, ov)
    assert np.allclose(cf, (1 - gam)[:, :, None, None] * raw, atol=1e-15)


def test_recurrent_equals_expansion_many_seeds():
    master = np.random.default_rng(2024)
    for case in range(25):
        rng = np.random.default_rng(master.integers(2**32))
        cfg = _cfg(layers=int(rng.integers(1, 4)),
                   heads=int(rng.integers(1, 3)),
                   dim=4 * int(rng.integers(1, 3)) * 2)
        cfg = replace(cfg, ablation=replace(cfg.ablation, no_diffusion=True))
        stream = _random_stream(rng, num_nodes=int(rng.integers(2, 9)),
                                n_events=int(rng.integers(1, 30)))
        params = init_params(cfg, stream.feature_dims, seed=case)
        core = RetentiveCore(stream, cfg, dtype=np.float64)
        core.process_events(params, np.arange(len(stream)))
        for node in range(stream.num_nodes):
            rec = core.state_now(node, params)
            cf = closed_form_state(stream, len(stream), node, params)
            assert np.abs(rec - cf).max() <= 1e-12


def test_three_timestamp_hand_expansion():
    # gamma = 0.5 via raw 0; S = g^2 b D1 + g b D2 + b D3
    cfg = _cfg(layers=1, heads=1, dim=4)
    cfg = replace(cfg, ablation=replace(cfg.ablation, no_diffusion=True))
    stream = _stream([0, 0, 0], [1, 1, 1], [1.0, 2.0, 3.0], 2, np.eye(2))
    params = init_params(cfg, stream.feature_dims, seed=3)
    deltas = [closed_form_state(stream, k, 1, params,
                                Overrides(gate=(0.0, 1.0)))
              for k in (1, 2, 3)]
    d1 = deltas[0]
    d2 = deltas[1]  # gate (a=0,b=1) keeps only the newest injection
    d3 = deltas[2]
    expect = 0.25 * 0.5 * d1 + 0.5 * 0.5 * d2 + 0.5 * d3
    core = RetentiveCore(stream, cfg, dtype=np.float64)
    core.process_events(params, np.arange(3))
    assert np.allclose(core.state_now(1, params), expect, atol=1e-12)


def test_flat_aggregation_matches_unit_gate_recurrence():
    rng = np.random.default_rng(9)
    cfg = _cfg()
    cfg_nd = replace(cfg, ablation=replace(cfg.ablation, no_diffusion=True))
    stream = _random_stream(rng, n_events=15)
    params = init_params(cfg, stream.feature_dims, seed=4)
    ov = Overrides(gate=(1.0, 1.0), omega=1.0, normalize=False)
    core = RetentiveCore(stream, cfg_nd, dtype=np.float64, overrides=ov)
    core.process_events(params, np.arange(len(stream)))
    for node in range(stream.num_nodes):
        flat = flat_aggregation(stream, len(stream), node, params)
        assert np.allclose(core.state_now(node, params), flat, atol=1e-12)
        if node == 0 and not np.any(flat):
            continue
    # no history and single-event cases
    empty = flat_aggregation(stream, 0, 0, params)
    assert not np.any(empty)


def test_flat_single_event_is_plain_increment():
    cfg = _cfg(layers=1, heads=1, dim=4)
    stream = _stream([0], [1], [1.0], 2, np.eye(2))
    params = init_params(cfg, stream.feature_dims, seed=5)
    from dsrd.core import input_rows, fused_edge_rows
    x = input_rows(params, stream, np.array([0]))[0]
    phi = fused_edge_rows(params, np.zeros((1, 0)), np.zeros(1))[0]
    kk = (x + phi) @ params["w_k_1"][0]
    vv = (x + phi) @ params["w_v_1"][0]
    flat = flat_aggregation(stream, 1, 1, params)
    assert np.allclose(flat[0, 0], np.outer(kk, vv), atol=1e-12)


# ---------------------------------------------------------------------------
# structural behavior


def test_chain_forward_carries_depth2_contribution():
    cfg = _cfg()
    params = init_params(cfg, (3, 0), seed=5)

    def c_state(stream, pert):
        feat = np.eye(3)
        feat[0, 0] += pert
        s2 = EventStream(stream.src, stream.dst, stream.time,
                         stream.edge_feat, [-1, -1], 3, feat)
        core = RetentiveCore(s2, cfg, dtype=np.float64)
        core.process_events(init_params(cfg, s2.feature_dims, seed=5),
                            np.arange(2))
        return core.stored_state(2)

    d_fwd = np.abs(c_state(CHAIN, 0.0) - c_state(CHAIN, 0.01))
    d_rev = np.abs(c_state(CHAIN_REV, 0.0) - c_state(CHAIN_REV, 0.01))
    assert d_fwd[1].max() > 0          # depth-2 state depends on the far source
    assert d_fwd[0].max() == 0.0       # depth-1 never does
    assert d_rev.max() == 0.0          # reversed ordering: no path at all


def test_topo_attenuation_off_adds_source_state():
    # single incident event, raw attenuation 1: depth-2 gains the source's
    # depth-1 state exactly
    cfg = _cfg(layers=2, heads=1, dim=4)
    stream = CHAIN
    params = init_params(cfg, stream.feature_dims, seed=6)
    ov = Overrides(gate=(1.0, 1.0), psi_normalize=False)
    core = RetentiveCore(stream, cfg, dtype=np.float64, overrides=ov)
    core.process_events(params, np.arange(1))
    b_l1_after_t1 = core.stored_state(1)[0]
    core.process_events(params, np.arange(1, 2))
    c_block = core.stored_state(2)
    # C's depth-2 = own injection at t2 + B's depth-1 state before t2
    delta_c = closed_form_state(stream, 2, 2, params,
                                Overrides(gate=(0.0, 1.0)))[1]
    assert np.allclose(c_block[1], delta_c + b_l1_after_t1, atol=1e-12)


def test_walk_count_semantics_telescoped():
    rng = np.random.default_rng(7)
    for trial in range(12):
        v_n = int(rng.integers(3, 8))
        n_e = int(rng.integers(2, 11))
        src = rng.integers(0, v_n, n_e)
        dst = (src + 1 + rng.integers(0, v_n - 1, n_e)) % v_n
        tt = np.sort(rng.integers(1, 8, n_e).astype(float))
        stream = _stream(src, dst, tt, v_n)
        depth = int(rng.integers(2, 5))
        dh = 4
        cfg = _cfg(dim=dh * 2, layers=depth, heads=2)
        basis = {}
        for i in range(v_n):
            e = np.zeros((dh, dh))
            e[i // dh, i % dh] = 1.0
            basis[i] = e
        ov = Overrides(gate=(1.0, 1.0), omega=1.0, normalize=False,
                           psi_normalize=False, injection_values=basis)
        params = init_params(cfg, stream.feature_dims, seed=trial)
        core = RetentiveCore(stream, cfg, dtype=np.float64, overrides=ov)
        core.process_events(params, np.arange(n_e))
        kern = kernel_from_stream(stream, depth, symmetric=True)
        for j in range(v_n):
            block = core.stored_state(j)
            prev = np.zeros((dh, dh))
            for l in range(1, depth + 1):
                content = block[l - 1, 0] - prev
                prev = block[l - 1, 0]
                for i in range(v_n):
                    coef = float(np.sum(content * basis[i]))
                    assert coef == kern.A[l][i, j]


# ---------------------------------------------------------------------------
# boundedness, determinism, causality


def test_bound_formula_values():
    assert (1 - 0.5 ** 1) * 2 == pytest.approx(1.0)
    gam = 1 - 1e-9
    assert (1 - gam ** 5) * 2 == pytest.approx(0.0, abs=1e-7)


def test_check_bound_random_run():
    rng = np.random.default_rng(21)
    cfg = _cfg()
    stream = _random_stream(rng, num_nodes=8, n_events=120, n_times=100)
    params = init_params(cfg, stream.feature_dims, seed=7)
    params.tensors["gamma_raw_1"][:] = np.log(0.9 / 0.1)  # gamma = 0.9
    params.tensors["gamma_raw_2"][:] = np.log(0.9 / 0.1)
    report = check_bound(stream, params, cfg, M=1.0)
    assert report.ok
    assert report.max_ratio <= 1.0 + 1e-9
    assert report.max_readout_ratio <= 1.0 + 1e-9


def test_replay_determinism_bitwise():
    rng = np.random.default_rng(11)
    cfg = _cfg()
    stream = _random_stream(rng)
    params = init_params(cfg, stream.feature_dims, seed=8)

    def run():
        core = RetentiveCore(stream, cfg, dtype=np.float64)
        outs = core.process_events(params, np.arange(len(stream)),
                                   return_outputs=True)
        return outs, core

    o1, c1 = run()
    o2, c2 = run()
    assert sorted(o1) == sorted(o2)
    for node in o1:
        assert np.array_equal(o1[node], o2[node])
    for node in range(stream.num_nodes):
        assert np.array_equal(c1.stored_state(node), c2.stored_state(node))


def test_out_of_order_commit_rejected():
    cfg = _cfg()
    stream = CHAIN
    params = init_params(cfg, stream.feature_dims, seed=0)
    core = RetentiveCore(stream, cfg, dtype=np.float64)
    core.process_events(params, np.arange(2))
    with pytest.raises(ValueError):
        core.process_events(params, np.arange(1))


def test_empty_batch_no_change():
    cfg = _cfg()
    stream = CHAIN
    params = init_params(cfg, stream.feature_dims, seed=0)
    core = RetentiveCore(stream, cfg, dtype=np.float64)
    out = core.process_events(params, np.array([], dtype=int),
                              return_outputs=True)
    assert out == {}
    assert core.clock_ord == 0


def test_future_events_do_not_affect_past_states():
    rng = np.random.default_rng(15)
    cfg = _cfg()
    stream = _random_stream(rng, n_events=18)
    params = init_params(cfg, stream.feature_dims, seed=9)
    cut = 12

    core_a = RetentiveCore(stream, cfg, dtype=np.float64)
    core_a.process_events(params, np.arange(cut))

    trimmed = EventStream(stream.src[:cut], stream.dst[:cut],
                          stream.time[:cut], stream.edge_feat[:cut],
                          stream.labels[:cut], stream.num_nodes,
                          stream.node_feat)
    core_b = RetentiveCore(trimmed, cfg, dtype=np.float64)
    core_b.process_events(params, np.arange(cut))

    for node in range(stream.num_nodes):
        assert np.array_equal(core_a.stored_state(node),
                              core_b.stored_state(node))


def test_gate_limit_freeze_and_overwrite():
    cfg = _cfg(layers=1, heads=1, dim=4)
    cfg = replace(cfg, ablation=replace(cfg.ablation, no_diffusion=True))
    stream = _stream([0, 0], [1, 1], [1.0, 2.0], 2, np.eye(2))
    params = init_params(cfg, stream.feature_dims, seed=10)

    ov_freeze = Overrides(gate=(1.0, 0.0))
    core = RetentiveCore(stream, cfg, dtype=np.float64, overrides=ov_freeze)
    core.process_events(params, np.arange(2))
    assert not np.any(core.stored_state(1))  # frozen at the zero init

    ov_pass = Overrides(gate=(0.0, 1.0))
    core2 = RetentiveCore(stream, cfg, dtype=np.float64, overrides=ov_pass)
    core2.process_events(params, np.arange(2))
    latest = closed_form_state(stream, 2, 1, params, ov_pass)
    assert np.allclose(core2.stored_state(1), latest, atol=1e-15)


def test_state_export_csv(tmp_path):
    cfg = _cfg(layers=1, heads=1, dim=4)
    stream = CHAIN
    params = init_params(cfg, stream.feature_dims, seed=0)
    core = RetentiveCore(stream, cfg, dtype=np.float64)
    core.process_events(params, np.arange(2))
    path = tmp_path / "states.csv"
    core.export_states(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("node,depth,head,last_ord")
    assert len(lines) == 1 + 3  # three touched nodes, one (depth, head) each


def test_decay_accessor_ranges_at_extreme_raws():
    cfg = _cfg()
    params = init_params(cfg, (3, 0), seed=0)
    # float64 saturates the sigmoid above ~|37|; check the representable span
    for raw in (-30.0, -1.0, 0.0, 1.0, 30.0):
        for l in (1, 2):
            params.tensors[f"lambda_raw_{l}"][:] = raw
            params.tensors[f"alpha_raw_{l}"][:] = raw
            params.tensors[f"gamma_raw_{l}"][:] = raw
            params.tensors[f"delta_raw_{l}"][:] = raw
            assert np.all(params.lam(l) > 0) and np.all(params.delta(l) > 0)
            assert np.all((params.alpha(l) > 0) & (params.alpha(l) < 1))
            assert np.all((params.gamma(l) > 0) & (params.gamma(l) < 1))


def test_single_event_output_composition():
    # one event, one depth, one head: the emitted readout is
    # q . ((1 - gamma) * injection) / sqrt(d)
    cfg = _cfg(layers=1, heads=1, dim=4)
    stream = _stream([0], [1], [1.0], 2, np.eye(2))
    params = init_params(cfg, stream.feature_dims, seed=12)
    core = RetentiveCore(stream, cfg, dtype=np.float64)
    outs = core.process_events(params, np.arange(1), return_outputs=True)
    gam = float(params.gamma(1)[0])
    delta = closed_form_state(stream, 1, 1, params,
                              Overrides(gate=(0.0, 1.0)))[0, 0]
    from dsrd.core import input_rows
    q = input_rows(params, stream, np.array([1]))[0] @ params["w_q_1"][0]
    expect = q @ ((1 - gam) * delta) / np.sqrt(cfg.dim)
    assert np.allclose(outs[1][0], expect, atol=1e-12)
