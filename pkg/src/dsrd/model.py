"""Network composition: augmented projections, per-depth readouts feeding a
residual stream with layer norm and feed-forward refinement, plus the link
and node-label heads.

`embed_nodes` is the query path: it reads persisted states (constants under
the cross-batch truncation rule) and applies injection, gating and routing
at the query time through autodiff ops, so one code path serves inference
and training.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .core import RetentiveCore, cosine_sim, temporal_decay, topo_decay

LN_EPS = 1e-5
PROB_EPS = 1e-7


# ---------------------------------------------------------------------------
# unit operations


def time_encode(dt, w_te):
    """Elementwise cosine of dt * frequency row."""
    return ad.cos(ad.mul(dt, w_te))


def fuse_edge(phi_e, phi_t, w_e):
    """Zero-pad the shorter of (edge attr, time code) and fuse through w_e."""
    phi_e = np.atleast_1d(np.asarray(ad.val(phi_e), dtype=np.float64)) \
        if not isinstance(phi_e, ad.Node) else phi_e
    width = ad.val(w_e).shape[0]

    def pad(x):
        v = ad.val(x)
        if v.shape[-1] == width:
            return x
        z = np.zeros(v.shape[:-1] + (width - v.shape[-1],), dtype=v.dtype)
        return ad.concat([x, z], axis=-1)

    return ad.matmul(ad.add(pad(phi_e), pad(phi_t)), w_e)


def augment_kv(k, v, phi_fused, w_k, w_v):
    k_out = ad.add(k, ad.matmul(phi_fused, w_k))
    v_out = ad.add(v, ad.matmul(phi_fused, w_v))
    return k_out, v_out


def layer_norm(x, gain, bias, eps=LN_EPS):
    d = ad.val(x).shape[-1]
    mu = ad.div(ad.sum_(x, axis=-1, keepdims=True), float(d))
    xc = ad.sub(x, mu)
    var = ad.div(ad.sum_(ad.mul(xc, xc), axis=-1, keepdims=True), float(d))
    y = ad.div(xc, ad.sqrt(ad.add(var, eps)))
    return ad.add(ad.mul(y, gain), bias)


def predict_link(h_u, h_v, t):
    """MLP on the concatenated pair embedding with a terminal sigmoid."""
    x = ad.concat([h_u, h_v], axis=-1)
    hidden = ad.gelu(ad.add(ad.matmul(x, t["link_w1"]), t["link_b1"]))
    logit = ad.add(ad.matmul(hidden, t["link_w2"]), t["link_b2"])
    return ad.sigmoid(logit)


def classify_node(h, t):
    return ad.sigmoid(ad.matmul(h, t["cls_w"]))


# ---------------------------------------------------------------------------
# traced views of the constrained decay parameters


def wrap_params(params, tape):
    """Leaf Nodes for every tensor; pass tape=None for plain-array views."""
    if tape is None:
        return dict(params.tensors)
    return {k: ad.leaf(v, tape) for k, v in params.tensors.items()}


def _gamma(t, layer):
    return ad.sigmoid(t[f"gamma_raw_{layer}"])


def _lam(t, layer):
    return ad.softplus(t[f"lambda_raw_{layer}"])


def _alpha(t, layer):
    return ad.sigmoid(t[f"alpha_raw_{layer}"])


def _delta(t, layer):
    return ad.softplus(t[f"delta_raw_{layer}"])


# ---------------------------------------------------------------------------
# query-time neighborhood assembly


def _neighbor_block(stream, cfg: ModelConfig, nodes, times, dtype):
    """Pad each query's recent temporal neighborhood to a common width."""
    idx = stream.neighbors
    b = len(nodes)
    lists = [idx.recent(int(n), float(tt), cfg.neighbors)
             for n, tt in zip(nodes, times)]
    kk = max(1, max(len(x[0]) for x in lists))
    nb_src = np.zeros((b, kk), dtype=np.int64)
    nb_dt = np.zeros((b, kk), dtype=np.float64)
    nb_eidx = np.zeros((b, kk), dtype=np.int64)
    mask = np.zeros((b, kk), dtype=dtype)
    for i, (nbr, eidx, tt) in enumerate(lists):
        n = len(nbr)
        if n:
            nb_src[i, :n] = nbr
            nb_dt[i, :n] = times[i] - tt
            nb_eidx[i, :n] = eidx
            mask[i, :n] = 1.0
    m = stream.edge_feat.shape[1]
    nb_feat = stream.edge_feat[nb_eidx.reshape(-1)].reshape(b, kk, m) \
        * mask[..., None].astype(np.float64)
    return nb_src, nb_dt, nb_feat.astype(dtype), mask


def _input_rows_traced(t, stream, nodes, dtype):
    feats = stream.node_feat[nodes].astype(dtype)
    if feats.shape[1] == 0:
        d = ad.val(t["b_in"]).shape[0]
        return ad.add(np.zeros((len(nodes), d), dtype=dtype), t["b_in"])
    return ad.add(ad.matmul(feats, t["w_in"]), t["b_in"])


def embed_nodes(core: RetentiveCore, t, nodes, times, training=False,
                dropout_masks=None):
    """Residual-stream embeddings for (node, time) queries.

    Persisted states enter as constants; injections, gates, and routing
    weights are recomputed at the query time so their parameters train.
    Returns a (B, d) block (a Node when `t` holds Nodes).
    """
    cfg = core.config
    stream = core.stream
    abl = cfg.ablation
    nodes = np.asarray(nodes, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    dtype = core.dtype
    B = len(nodes)
    d, H, dh, K = cfg.dim, cfg.heads, cfg.head_dim, cfg.layers

    nb_src, nb_dt, nb_feat, mask = _neighbor_block(stream, cfg, nodes, times, dtype)
    kk = nb_src.shape[1]

    uniq, inv = np.unique(np.concatenate([nodes, nb_src.reshape(-1)]),
                          return_inverse=True)
    X_u = _input_rows_traced(t, stream, uniq, dtype)
    X_q = ad.take(X_u, inv[:B])
    X_nb = ad.reshape(ad.take(X_u, inv[B:]), (B, kk, d))

    # fused time/edge augmentation rows for every neighbor event
    d_t = cfg.time_dim
    width = ad.val(t["w_e"]).shape[0]
    phi_t = ad.cos(ad.mul(nb_dt[..., None].astype(dtype),
                          ad.reshape(t["w_te"], (1, 1, d_t))))
    if width > d_t:
        phi_t = ad.concat(
            [phi_t, np.zeros((B, kk, width - d_t), dtype=dtype)], axis=-1)
    m = nb_feat.shape[-1]
    phi_sum = phi_t if m == 0 else ad.add(
        phi_t, np.concatenate(
            [nb_feat, np.zeros((B, kk, width - m), dtype=dtype)], axis=-1))
    phi = ad.matmul(phi_sum, t["w_e"])

    if abl.no_block:
        flat = core.gather_flat(nodes)
    elif not abl.no_state:
        S_raw, steps_q = core.gather(nodes, times)
        log_steps_q = (steps_q + 1).astype(dtype)[:, None]
        nb_times = np.broadcast_to(times[:, None], (B, kk))
        topo_layers = list(range(K - 1)) if (K >= 2 and not abl.no_diffusion) else []
        if topo_layers:
            S_nb, steps_nb = core.gather(nb_src, nb_times, layers=topo_layers)
            log_steps_nb = (steps_nb + 1).astype(dtype)[..., None]

    mask3 = mask[..., None]
    aug = ad.add(X_nb, phi)
    x_stream = X_q
    for l in range(1, K + 1):
        li = l - 1
        wq, wk, wv = t[f"w_q_{l}"], t[f"w_k_{l}"], t[f"w_v_{l}"]
        k_nb = ad.project_heads(aug, wk)
        v_nb = ad.project_heads(aug, wv)

        if abl.no_block:
            s_eff = flat[:, li]
        else:
            q_inj = ad.reshape(ad.project_heads(X_q, wq), (B, 1, H, dh))
            sim = cosine_sim(q_inj, k_nb)
            omega = ad.sigmoid(sim)
            if not abl.no_decay:
                fac = temporal_decay(_lam(t, l), _alpha(t, l), nb_dt[..., None])
                omega = ad.mul(omega, fac)
            omega = ad.mul(omega, mask3)
            denom = ad.maximum(
                ad.sum_(ad.absolute(omega), axis=1, keepdims=True), 1.0)
            omega_n = ad.div(omega, denom)
            delta = ad.weighted_outer_sum(omega_n, k_nb, v_nb)

            if abl.no_state:
                s_eff = delta
            else:
                log_g = ad.log(_gamma(t, l))
                retain = ad.exp(ad.mul(log_steps_q, log_g))
                s_view = ad.mul(ad.reshape(retain, (B, H, 1, 1)), S_raw[:, li])
                gate_b = ad.reshape(ad.sub(1.0, _gamma(t, l)), (1, H, 1, 1))
                s_eff = ad.add(s_view, ad.mul(gate_b, delta))
                if l >= 2 and not abl.no_diffusion:
                    psi = ad.mul(topo_decay(_delta(t, l), l, nb_dt[..., None]),
                                 mask3)
                    p_denom = ad.maximum(
                        ad.sum_(psi, axis=1, keepdims=True), 1.0)
                    psi_n = ad.div(psi, p_denom)
                    retain_nb = ad.exp(ad.mul(log_steps_nb,
                                              ad.log(_gamma(t, l - 1))))
                    w_route = ad.mul(psi_n, retain_nb)
                    s_eff = ad.add(
                        s_eff, ad.weighted_matrix_sum(w_route, S_nb[:, :, li - 1]))

        q_ro = ad.project_heads(x_stream, wq)
        g = ad.div(ad.matvec(q_ro, s_eff), np.sqrt(float(d)))
        g = ad.reshape(g, (B, d))
        if training and dropout_masks is not None:
            g = ad.mul(g, dropout_masks[li][0])
        z = ad.add(x_stream, layer_norm(g, t[f"ln1_g_{l}"], t[f"ln1_b_{l}"]))
        hidden = ad.gelu(ad.matmul(layer_norm(z, t[f"ln2_g_{l}"], t[f"ln2_b_{l}"]),
                                   t[f"w_ff1_{l}"]))
        if training and dropout_masks is not None:
            hidden = ad.mul(hidden, dropout_masks[li][1])
        x_stream = ad.add(z, ad.matmul(hidden, t[f"w_ff2_{l}"]))
    return x_stream


def make_dropout_masks(cfg: ModelConfig, rate: float, batch: int, rng):
    """Inverted-dropout masks, one (head-concat, ffn-hidden) pair per depth."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    masks = []
    for _ in range(cfg.layers):
        m1 = (rng.random((batch, cfg.dim)) < keep) / keep
        m2 = (rng.random((batch, cfg.ff_mult * cfg.dim)) < keep) / keep
        masks.append((m1.astype(np.dtype(cfg.dtype)), m2.astype(np.dtype(cfg.dtype))))
    return masks


# ---------------------------------------------------------------------------
# batch losses


def bce_from_probs(probs, labels):
    """Mean binary cross-entropy; probabilities clamped away from {0, 1}."""
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    labels = np.asarray(labels, dtype=ad.val(p).dtype).reshape(ad.val(p).shape)
    term = ad.add(ad.mul(labels, ad.log(p)),
                  ad.mul(1.0 - labels, ad.log(ad.sub(1.0, p))))
    n = ad.val(term).size
    return ad.div(ad.sum_(ad.mul(term, -1.0)), float(n))


def link_batch_loss(core, t, src, dst, neg, times, training=False,
                    dropout_rate=0.0, rng=None):
    """Score positives (src, dst, t) against negatives (src, neg, t)."""
    B = len(src)
    nodes = np.concatenate([src, dst, neg])
    tt = np.concatenate([times, times, times])
    masks = make_dropout_masks(core.config, dropout_rate, 3 * B, rng) \
        if training and rng is not None else None
    h = embed_nodes(core, t, nodes, tt, training, masks)
    h_u = ad.take(h, np.arange(0, B))
    h_v = ad.take(h, np.arange(B, 2 * B))
    h_n = ad.take(h, np.arange(2 * B, 3 * B))
    p_pos = predict_link(h_u, h_v, t)
    p_neg = predict_link(h_u, h_n, t)
    probs = ad.reshape(ad.concat([p_pos, p_neg], axis=0), (2 * B,))
    labels = np.concatenate([np.ones(B), np.zeros(B)])
    return bce_from_probs(probs, labels), probs


def node_batch_loss(core, t, nodes, times, labels, training=False,
                    dropout_rate=0.0, rng=None):
    masks = make_dropout_masks(core.config, dropout_rate, len(nodes), rng) \
        if training and rng is not None else None
    h = embed_nodes(core, t, nodes, times, training, masks)
    p = classify_node(h, t)
    flat = ad.reshape(p, (ad.val(p).size,))
    y = np.repeat(np.asarray(labels, dtype=np.float64),
                  ad.val(p).shape[-1])
    return bce_from_probs(flat, y), flat
