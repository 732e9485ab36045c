"""Retentive state machine: gated per-node matrix states with adaptive decay,
cross-depth propagation along arriving events, and the closed-form /
boundedness oracles used to check it.

State layout is (node, depth, head) -> d_h x d_h. Retention follows global
distinct-timestamp steps: a state not touched for g steps is worth
gamma^g times its stored value, applied lazily at the next touch or read.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .config import ModelConfig
from .params import ModelParams

_TINY = 1e-30


@dataclass
class Overrides:
    """Hooks for oracle and property tests; never set in production runs."""

    gate: tuple | None = None          # (a, b) replacing (gamma, 1 - gamma)
    omega: float | None = None         # raw event weight before normalization
    normalize: bool = True             # event-weight neighborhood normalization
    psi_normalize: bool = True         # propagation-weight normalization
    injection_values: dict | None = None  # source node -> (dh, dh) increment
    clip_norm: float | None = None     # Frobenius cap on committed injections


# ---------------------------------------------------------------------------
# unit formulas (dual-use: plain ndarrays or autodiff Nodes)


def temporal_decay(lam, alpha, dt):
    """exp(-lam * log(1+dt)^alpha); exactly 1 at dt = 0."""
    dt = np.asarray(dt, dtype=np.float64)
    u = np.log1p(dt)
    pos = (u > 0).astype(np.float64)
    log_u = np.log(np.where(u > 0, u, 1.0))
    powered = ad.mul(ad.exp(ad.mul(alpha, log_u)), pos)
    return ad.exp(ad.mul(ad.mul(lam, -1.0), powered))


def topo_decay(delta, depth, dt):
    """exp(-depth * delta * log(1+dt)) for routing depth-(l-1) states up."""
    u = np.log1p(np.asarray(dt, dtype=np.float64))
    return ad.exp(ad.mul(ad.mul(delta, -float(depth)), u))


def cosine_sim(q, k, axis=-1):
    dot = ad.sum_(ad.mul(q, k), axis=axis)
    nq = ad.sqrt(ad.sum_(ad.mul(q, q), axis=axis))
    nk = ad.sqrt(ad.sum_(ad.mul(k, k), axis=axis))
    return ad.div(dot, ad.maximum(ad.mul(nq, nk), _TINY))


def decay_weight(lam, alpha, q, k, dt):
    """Attention-gated adaptive decay weight in (0, 1)."""
    if np.any(np.isnan(ad.val(q))) or np.any(np.isnan(ad.val(k))):
        raise ValueError("NaN projection input")
    return ad.mul(ad.sigmoid(cosine_sim(q, k)), temporal_decay(lam, alpha, dt))


def normalize_weights(omega, axis=-1):
    denom = ad.maximum(ad.sum_(ad.absolute(omega), axis=axis, keepdims=True), 1.0)
    return ad.div(omega, denom)


def short_term_injection(keys, values, omega, normalize=True):
    """Weighted sum of key^T value increments over one neighborhood.

    keys/values: (n, dh); omega: (n,). Empty neighborhoods yield zero.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    dh = keys.shape[1] if keys.ndim == 2 else 0
    if len(omega) == 0:
        return np.zeros((dh, dh))
    w = omega / max(np.sum(np.abs(omega)), 1.0) if normalize else omega
    return np.einsum("n,ni,nj->ij", w, keys, values)


def gated_update(state, injection, gamma):
    return ad.add(ad.mul(gamma, state), ad.mul(ad.sub(1.0, gamma), injection))


def readout(state, q, model_dim):
    """Query contraction q @ S scaled by sqrt of the model width."""
    return ad.div(ad.matmul(q, state), np.sqrt(float(model_dim)))


def topo_propagate(states_hi, states_lo, incident, depth, delta,
                   normalize=True):
    """One explicit propagation step onto depth-`depth` states.

    states_hi/states_lo: dict node -> matrix (depth and depth-1 states);
    incident: list of (target, source, dt). Depth-(l-1) entries are read-only.
    """
    if depth < 2:
        raise ValueError("propagation applies to depth >= 2 only")
    per_target = {}
    for (tgt, src, dt) in incident:
        per_target.setdefault(tgt, []).append((src, float(dt)))
    out = dict(states_hi)
    for tgt, pairs in per_target.items():
        psi = np.array([float(ad.val(topo_decay(delta, depth, dt))) for _, dt in pairs])
        if normalize:
            psi = psi / max(psi.sum(), 1.0)
        acc = out[tgt].copy() if tgt in out else None
        for (src, _), w in zip(pairs, psi):
            term = w * states_lo[src]
            acc = term if acc is None else acc + term
        out[tgt] = acc
    return out


# ---------------------------------------------------------------------------
# event-feature plumbing shared by the commit path and oracles


def input_rows(params: ModelParams, stream, nodes):
    """Width-d input stream rows for the given nodes."""
    d_x = params.feat_dims[0]
    b = params["b_in"]
    if d_x == 0:
        return np.broadcast_to(b, (len(nodes), b.shape[0])).astype(params.dtype)
    feats = stream.node_feat[nodes].astype(params.dtype)
    return feats @ params["w_in"] + b


def fused_edge_rows(params: ModelParams, edge_feat, dts):
    """Time-encoded, padded, fused edge rows of width d."""
    d_t = params.config.time_dim
    m = params.feat_dims[1]
    width = max(m, d_t)
    n = len(dts)
    phi = np.zeros((n, width), dtype=params.dtype)
    phi[:, :d_t] += np.cos(np.asarray(dts, dtype=np.float64)[:, None]
                           * params["w_te"][None, :].astype(np.float64)).astype(params.dtype)
    if m:
        phi[:, :m] += np.asarray(edge_feat, dtype=params.dtype)
    return phi @ params["w_e"]


# ---------------------------------------------------------------------------
# the state machine


class RetentiveCore:
    """Single-writer container for all per-(node, depth, head) states."""

    def __init__(self, stream, config: ModelConfig, dtype=None,
                 overrides: Overrides | None = None):
        self.stream = stream
        self.config = config
        self.dtype = np.dtype(dtype or config.dtype)
        self.overrides = overrides or Overrides()
        self.reset()

    def reset(self):
        cfg = self.config
        self._slot = np.full(self.stream.num_nodes, -1, dtype=np.int64)
        cap = 16
        self._S = np.zeros((cap, cfg.layers, cfg.heads, cfg.head_dim, cfg.head_dim),
                           dtype=self.dtype)
        self._flat = (np.zeros_like(self._S) if cfg.ablation.no_block else None)
        self._last_ord = np.zeros(cap, dtype=np.int64)
        self._used = 0
        self.clock_time = -np.inf
        self.clock_ord = 0

    # -- slots ---------------------------------------------------------------

    def _ensure(self, nodes: np.ndarray) -> np.ndarray:
        slots = self._slot[nodes]
        fresh = nodes[slots < 0]
        if len(fresh):
            need = self._used + len(fresh)
            if need > self._S.shape[0]:
                cap = max(2 * self._S.shape[0], need)
                grow = lambda a: np.concatenate(
                    [a, np.zeros((cap - a.shape[0],) + a.shape[1:], dtype=a.dtype)])
                self._S = grow(self._S)
                if self._flat is not None:
                    self._flat = grow(self._flat)
                self._last_ord = grow(self._last_ord)
            self._slot[fresh] = np.arange(self._used, self._used + len(fresh))
            self._used += len(fresh)
            slots = self._slot[nodes]
        return slots

    def count_before(self, t: float) -> int:
        """Committed distinct timestamps strictly earlier than t."""
        if t > self.clock_time:
            return self.clock_ord
        if t == self.clock_time:
            return self.clock_ord - 1
        raise ValueError("query earlier than the core clock")

    # -- read access ---------------------------------------------------------

    def gather(self, nodes, times, layers=None):
        """Stored states plus elapsed-step counts for traced read paths.

        Returns (S, steps): S is the raw stored block (copy), steps[i] is the
        number of whole distinct-time steps between the stored value and the
        moment just before times[i]; -1 marks a same-step or empty entry.
        `layers` restricts the depth axis to the given 0-based indices.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        flat_nodes = nodes.reshape(-1)
        slots = self._slot[flat_nodes]
        tt = np.asarray(times, dtype=np.float64).reshape(-1)
        if np.any(tt < self.clock_time):
            raise ValueError("query earlier than the core clock")
        counts = np.where(tt > self.clock_time, self.clock_ord,
                          self.clock_ord - 1)
        lsel = np.arange(self._S.shape[1]) if layers is None \
            else np.asarray(layers, dtype=np.int64)
        S = np.zeros((len(flat_nodes), len(lsel)) + self._S.shape[2:],
                     dtype=self.dtype)
        seen = slots >= 0
        if seen.any():
            S[seen] = self._S[slots[seen][:, None], lsel[None, :]]
        steps = np.full(len(flat_nodes), -1, dtype=np.int64)
        steps[seen] = np.maximum(counts[seen] - self._last_ord[slots[seen]], -1)
        return (S.reshape(nodes.shape + S.shape[1:]),
                steps.reshape(nodes.shape))

    def gather_flat(self, nodes):
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        slots = self._slot[nodes]
        out = np.zeros((len(nodes),) + self._flat.shape[1:], dtype=self.dtype)
        seen = slots >= 0
        out[seen] = self._flat[slots[seen]]
        return out

    def state_now(self, node: int, params: ModelParams):
        """State of one node as of the current clock, lazy decay applied."""
        slot = self._slot[node]
        if slot < 0:
            return np.zeros(self._S.shape[1:], dtype=self.dtype)
        a = self._gate_a(params)
        lag = self.clock_ord - self._last_ord[slot]
        return self._S[slot] * a[:, :, None, None] ** lag

    def stored_state(self, node: int) -> np.ndarray:
        slot = self._slot[node]
        if slot < 0:
            return np.zeros(self._S.shape[1:], dtype=self.dtype)
        return self._S[slot].copy()

    def touched_nodes(self) -> np.ndarray:
        return np.flatnonzero(self._slot >= 0)

    def _gate_a(self, params: ModelParams) -> np.ndarray:
        if self.overrides.gate is not None:
            a = float(self.overrides.gate[0])
            return np.full((params.config.layers, params.config.heads), a,
                           dtype=self.dtype)
        return params.gamma_all().astype(self.dtype)

    def _gate_b(self, params: ModelParams) -> np.ndarray:
        if self.overrides.gate is not None:
            b = float(self.overrides.gate[1])
            return np.full((params.config.layers, params.config.heads), b,
                           dtype=self.dtype)
        return (1.0 - params.gamma_all()).astype(self.dtype)

    # -- commit path ----------------------------------------------------------

    def process_events(self, params: ModelParams, indices,
                       return_outputs: bool = False):
        """Advance the state machine through the given stream events.

        Events are grouped by distinct timestamp and committed in order.
        Within one group: decay, injections for every depth, readout, then
        cross-depth propagation from high depth down to 2.
        """
        indices = np.asarray(indices, dtype=np.int64)
        outputs = {} if return_outputs else None
        if len(indices) == 0:
            return outputs
        times = self.stream.time[indices]
        if times[0] < self.clock_time:
            raise ValueError("events behind the core clock")
        cuts = np.flatnonzero(np.diff(times)) + 1
        for chunk in np.split(indices, cuts):
            self._commit_group(params, chunk, outputs)
        return outputs

    def _commit_group(self, params: ModelParams, idx, outputs):
        cfg, ov = self.config, self.overrides
        stream = self.stream
        t = float(stream.time[idx[0]])
        ord_t = self.clock_ord + 1 if t > self.clock_time else self.clock_ord
        if cfg.ablation.no_state:
            self.clock_time, self.clock_ord = t, ord_t
            return
        src, dst = stream.src[idx], stream.dst[idx]
        efeat = stream.edge_feat[idx]

        # both endpoints receive the event
        tgt = np.concatenate([dst, src])
        other = np.concatenate([src, dst])
        ef2 = np.concatenate([efeat, efeat], axis=0)
        uniq, inv = np.unique(tgt, return_inverse=True)
        slots = self._ensure(uniq)
        n_u = len(uniq)

        routed = None
        if not cfg.ablation.no_block:
            a = self._gate_a(params)
            gaps = ord_t - self._last_ord[slots]
            self._S[slots] *= (a[None, :, :, None, None]
                               ** gaps[:, None, None, None, None])
            if cfg.layers >= 2 and not cfg.ablation.no_diffusion:
                # pre-injection snapshot: same-timestamp events never chain
                routed = self._S[slots, :cfg.layers - 1]
        self._last_ord[slots] = ord_t

        X_t = input_rows(params, stream, uniq)
        X_s = input_rows(params, stream, other)
        phi = fused_edge_rows(params, ef2, np.zeros(len(other)))
        b_coef = self._gate_b(params)

        aug_s = X_s + phi
        for l in range(1, cfg.layers + 1):
            li = l - 1
            wq, wk, wv = params[f"w_q_{l}"], params[f"w_k_{l}"], params[f"w_v_{l}"]
            kk = np.tensordot(aug_s, wk, axes=([1], [1]))
            vv = np.tensordot(aug_s, wv, axes=([1], [1]))
            if ov.injection_values is not None:
                outer = np.stack(
                    [np.broadcast_to(ov.injection_values[int(s)],
                                     (cfg.heads, cfg.head_dim, cfg.head_dim))
                     for s in other]).astype(self.dtype)
            else:
                outer = kk[..., :, None] * vv[..., None, :]

            if cfg.ablation.no_block:
                # flat aggregation: unweighted, ungated accumulation
                self._flat[slots, li] += _segment_sum(outer, inv, n_u)
                continue

            if ov.omega is not None:
                omega = np.full((len(other), cfg.heads), float(ov.omega),
                                dtype=self.dtype)
            else:
                q = np.tensordot(X_t, wq, axes=([1], [1]))
                qg = q[inv]
                dot = (qg * kk).sum(-1)
                nq = np.sqrt((qg * qg).sum(-1))
                nk = np.sqrt((kk * kk).sum(-1))
                sim = dot / np.maximum(nq * nk, _TINY)
                omega = expit(sim)  # temporal factor is exactly 1 at dt = 0
            if ov.normalize:
                denom = np.zeros((n_u, cfg.heads), dtype=omega.dtype)
                np.add.at(denom, inv, np.abs(omega))
                omega = omega / np.maximum(denom, 1.0)[inv]

            delta = _segment_sum(omega[..., None, None] * outer, inv, n_u)
            if ov.clip_norm is not None:
                norms = np.linalg.norm(delta, axis=(-2, -1), keepdims=True)
                delta *= np.minimum(1.0, ov.clip_norm / np.maximum(norms, _TINY))
            self._S[slots, li] += b_coef[li][None, :, None, None] * delta

        if outputs is not None:
            li = cfg.layers - 1
            wq = params[f"w_q_{cfg.layers}"]
            qk = np.tensordot(X_t, wq, axes=([1], [1]))
            store = self._flat if cfg.ablation.no_block else self._S
            o = (qk[..., None, :] @ store[slots, li])[..., 0, :] / np.sqrt(cfg.dim)
            for node, row in zip(uniq.tolist(), o):
                outputs[node] = row

        if routed is not None:
            src_pos = np.searchsorted(uniq, other)
            psi = np.ones((len(other), cfg.heads), dtype=self.dtype)
            if ov.psi_normalize:
                denom = np.zeros((n_u, cfg.heads), dtype=self.dtype)
                np.add.at(denom, inv, psi)
                psi = psi / np.maximum(denom, 1.0)[inv]
            for l in range(cfg.layers, 1, -1):
                li = l - 1
                contrib = psi[..., None, None] * routed[src_pos, li - 1]
                self._S[slots, li] += _segment_sum(contrib, inv, n_u)

        self.clock_time = t
        self.clock_ord = ord_t

    def export_states(self, path):
        """Debug dump: one CSV row per (node, depth, head) with the matrix flattened."""
        cfg = self.config
        with open(path, "w", encoding="utf-8") as f:
            dh = cfg.head_dim
            cols = ",".join(f"s_{i}_{j}" for i in range(dh) for j in range(dh))
            f.write(f"node,depth,head,last_ord,{cols}\n")
            for node in self.touched_nodes():
                slot = self._slot[node]
                for l in range(cfg.layers):
                    for h in range(cfg.heads):
                        flat = ",".join(repr(float(x))
                                        for x in self._S[slot, l, h].ravel())
                        f.write(f"{node},{l + 1},{h},{self._last_ord[slot]},{flat}\n")


def _segment_sum(values, inv, n):
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, inv, values)
    return out


# ---------------------------------------------------------------------------
# oracles (brute force, plain loops, float64)


def _injection_at(stream, params, node, group_idx, overrides):
    """Straight-line recomputation of one node's injection at one timestamp."""
    cfg = params.config
    ov = overrides or Overrides()
    dh, H, K = cfg.head_dim, cfg.heads, cfg.layers
    rows, feats = [], []
    # self-loops contribute from both sides, matching the commit path
    for i in group_idx:
        if stream.dst[i] == node:
            rows.append(int(stream.src[i]))
            feats.append(stream.edge_feat[i])
        if stream.src[i] == node:
            rows.append(int(stream.dst[i]))
            feats.append(stream.edge_feat[i])
    out = np.zeros((K, H, dh, dh))
    if not rows:
        return out
    xq = input_rows(params, stream, np.array([node])).astype(np.float64)[0]
    xs = input_rows(params, stream, np.array(rows)).astype(np.float64)
    phi = fused_edge_rows(params, np.array(feats).reshape(len(rows), -1),
                          np.zeros(len(rows))).astype(np.float64)
    for l in range(1, K + 1):
        for h in range(H):
            wq = params[f"w_q_{l}"][h].astype(np.float64)
            wk = params[f"w_k_{l}"][h].astype(np.float64)
            wv = params[f"w_v_{l}"][h].astype(np.float64)
            q = xq @ wq
            omegas, outers = [], []
            for r in range(len(rows)):
                kk = (xs[r] + phi[r]) @ wk
                vv = (xs[r] + phi[r]) @ wv
                if ov.omega is not None:
                    w = float(ov.omega)
                else:
                    w = float(ad.val(ad.sigmoid(cosine_sim(q, kk))))
                omegas.append(w)
                if ov.injection_values is not None:
                    outers.append(np.asarray(ov.injection_values[rows[r]],
                                             dtype=np.float64))
                else:
                    outers.append(np.outer(kk, vv))
            omegas = np.asarray(omegas)
            if ov.normalize:
                omegas = omegas / max(np.sum(np.abs(omegas)), 1.0)
            acc = np.zeros((dh, dh))
            for w, o in zip(omegas, outers):
                acc = acc + w * o
            out[l - 1, h] = acc
    return out


def closed_form_state(stream, prefix_len, node, params, overrides=None):
    """Expansion oracle: sum over past timestamps of retained injections.

    Mirrors pure gated dynamics (no cross-depth propagation); prefix limited
    to 50 events to keep the enumeration honest.
    """
    if prefix_len > 50:
        raise ValueError("oracle prefix limited to 50 events")
    cfg = params.config
    ov = overrides or Overrides()
    if ov.gate is not None:
        a = np.full((cfg.layers, cfg.heads), float(ov.gate[0]))
        b = np.full((cfg.layers, cfg.heads), float(ov.gate[1]))
    else:
        a = params.gamma_all().astype(np.float64)
        b = 1.0 - a
    times = stream.time[:prefix_len]
    uniq_times = np.unique(times)
    n_steps = len(uniq_times)
    S = np.zeros((cfg.layers, cfg.heads, cfg.head_dim, cfg.head_dim))
    for step, tau in enumerate(uniq_times):
        group = np.flatnonzero(times == tau)
        delta = _injection_at(stream, params, node, group, ov)
        retain = a ** (n_steps - 1 - step)
        S = S + retain[:, :, None, None] * b[:, :, None, None] * delta
    return S


def flat_aggregation(stream, prefix_len, node, params):
    """Uniform unweighted sum of all historical increments for one node."""
    cfg = params.config
    ov = Overrides(omega=1.0, normalize=False)
    out = np.zeros((cfg.layers, cfg.heads, cfg.head_dim, cfg.head_dim))
    times = stream.time[:prefix_len]
    for tau in np.unique(times):
        group = np.flatnonzero(times == tau)
        out = out + _injection_at(stream, params, node, group, ov)
    return out


@dataclass
class BoundReport:
    steps: int
    max_ratio: float
    max_readout_ratio: float
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def check_bound(stream, params, config, M, max_events=None) -> BoundReport:
    """Run the gated dynamics with injections clipped to |Delta|_F <= M and
    verify |S|_F <= (1 - gamma^n) M at every step, plus the readout cap."""
    from dataclasses import replace
    cfg = replace(config, ablation=replace(config.ablation, no_diffusion=True))
    ov = Overrides(clip_norm=float(M))
    core = RetentiveCore(stream, cfg, dtype=np.float64, overrides=ov)
    gamma = params.gamma_all().astype(np.float64)
    L = max(np.linalg.norm(params[f"w_q_{l}"][h].astype(np.float64), 2)
            for l in range(1, config.layers + 1) for h in range(config.heads))
    X = input_rows(params, stream, np.arange(stream.num_nodes)).astype(np.float64)
    B_x = float(np.max(np.linalg.norm(X, axis=1)))
    n_events = len(stream) if max_events is None else min(max_events, len(stream))
    times = stream.time[:n_events]
    violations = []
    max_ratio = 0.0
    max_oratio = 0.0
    step = 0
    o_cap = max(L * B_x * M, _TINY)
    for tau in np.unique(times):
        group = np.flatnonzero(times == tau)
        core.process_events(params, group)
        step += 1
        cap = (1.0 - gamma ** step) * M  # (layers, heads)
        for node in core.touched_nodes():
            slot = core._slot[node]
            lag = step - core._last_ord[slot]
            decayed = core._S[slot] * gamma[:, :, None, None] ** lag
            norms = np.linalg.norm(decayed, axis=(-2, -1))
            ratio = norms / np.maximum(cap, _TINY)
            max_ratio = max(max_ratio, float(ratio.max()))
            if np.any(norms > cap * (1 + 1e-9)):
                violations.append((step, int(node)))
            for l in range(1, config.layers + 1):
                q = np.einsum("d,hde->he", X[node],
                              params[f"w_q_{l}"].astype(np.float64))
                o = np.einsum("he,hef->hf", q, decayed[l - 1])
                onorm = np.linalg.norm(o, axis=-1) / np.sqrt(config.dim)
                max_oratio = max(max_oratio, float(np.max(onorm) / o_cap))
    return BoundReport(step, max_ratio, max_oratio, violations)
