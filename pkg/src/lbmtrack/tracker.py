"""Online point tracker: per-query feature distributions evolved frame by
frame through a multi-layer predict-update transformer.

Per frame, each query's distribution is re-anchored at its initial sample and
predicted by cross-attending over two ring-buffered memories: the streaming
memory (the last N_s per-frame distributions) and the collision memory (those
distributions pushed through a learned deformable neighborhood around the
tracked position). The predicted distribution is then refined layer by layer:
a correlation map against the current frame's features proposes top-k
reference points, and a deformable-attention update integrates features
sampled around them. The reference count follows a 9 / 4 / 1 schedule ending
in a single definitive reference, from which a track head regresses the
position offset and a visibility head scores occlusion and confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .encoder import EncoderParams, FeatureMap, init_encoder
from .tensor import Tensor


@dataclass
class ModelConfig:
    dim: int = 64
    enc_channels: int = 16
    layers: int = 3
    n_s: int = 12                     # memory length (frames)
    collision_points: int = 9         # sampling neighbors of the collision op
    update_reps: int = 4              # sampling offsets per reference point
    head_points: int = 9              # sampling neighbors of the two heads
    mlp_ratio: int = 4
    predict_every_layer: bool = False
    cosine_correlation: bool = False


def reference_schedule(layers: int) -> list[int]:
    """Reference-point counts per layer: 9 first, 4 intermediate, 1 last."""
    if layers < 1:
        raise ValueError("need at least one layer")
    if layers == 1:
        return [1]
    return [9] + [4] * (layers - 2) + [1]


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Mlp:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DeformAttnParams:
    """Query projection, offset/weight predictors, value and output projections.

    The offset predictor's final layer is zero-initialized so that all
    sampling offsets start at exactly zero; the weight predictor starts at
    zero too, which makes the initial attention uniform.
    """
    wq: Tensor
    bq: Tensor
    w_off: Tensor
    b_off: Tensor
    w_wgt: Tensor
    b_wgt: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    n_points: int = 9


@dataclass
class CrossAttnParams:
    """Single-head scaled dot-product cross-attention with residual +
    layer-norm, followed by a residual two-layer MLP."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_g: Tensor
    ln_b: Tensor
    mlp: Mlp


@dataclass
class LayerParams:
    phi_s: CrossAttnParams
    phi_c: CrossAttnParams
    psi: DeformAttnParams
    psi_ln_g: Tensor
    psi_ln_b: Tensor
    ffn: Mlp
    rho_w: Tensor            # reference-confidence head, d -> 1
    rho_b: Tensor


@dataclass
class HeadParams:
    attn: DeformAttnParams
    ln_g: Tensor
    ln_b: Tensor
    mlp: Mlp                 # d -> hidden -> 2


@dataclass
class ModelParams:
    encoder: EncoderParams
    collision: DeformAttnParams
    layers: list[LayerParams]
    track: HeadParams
    vis: HeadParams


def _xavier(rng, fi, fo, dtype):
    lim = math.sqrt(6.0 / (fi + fo))
    return Tensor(rng.uniform(-lim, lim, size=(fi, fo)).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _mlp_init(rng, d_in, hidden, d_out, dtype, zero_out=True) -> Mlp:
    w2 = _zeros((hidden, d_out), dtype) if zero_out else _xavier(rng, hidden, d_out, dtype)
    return Mlp(w1=_xavier(rng, d_in, hidden, dtype), b1=_zeros(hidden, dtype),
               w2=w2, b2=_zeros(d_out, dtype))


def _deform_init(rng, d, n_points, dtype) -> DeformAttnParams:
    return DeformAttnParams(
        wq=_xavier(rng, d, d, dtype), bq=_zeros(d, dtype),
        w_off=_zeros((d, n_points * 2), dtype), b_off=_zeros(n_points * 2, dtype),
        w_wgt=_zeros((d, n_points), dtype), b_wgt=_zeros(n_points, dtype),
        wv=_xavier(rng, d, d, dtype), bv=_zeros(d, dtype),
        wo=_xavier(rng, d, d, dtype), bo=_zeros(d, dtype),
        n_points=n_points,
    )


def _cross_init(rng, d, hidden, dtype) -> CrossAttnParams:
    return CrossAttnParams(
        wq=_xavier(rng, d, d, dtype), bq=_zeros(d, dtype),
        wk=_xavier(rng, d, d, dtype), bk=_zeros(d, dtype),
        wv=_xavier(rng, d, d, dtype), bv=_zeros(d, dtype),
        wo=_xavier(rng, d, d, dtype), bo=_zeros(d, dtype),
        ln_g=_ones(d, dtype), ln_b=_zeros(d, dtype),
        mlp=_mlp_init(rng, d, hidden, d, dtype, zero_out=True),
    )


def init_model(rng: np.random.Generator, cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    d = cfg.dim
    hidden = cfg.mlp_ratio * d
    sched = reference_schedule(cfg.layers)
    layers = []
    for k in sched:
        layers.append(LayerParams(
            phi_s=_cross_init(rng, d, hidden, dtype),
            phi_c=_cross_init(rng, d, hidden, dtype),
            psi=_deform_init(rng, d, k * cfg.update_reps, dtype),
            psi_ln_g=_ones(d, dtype), psi_ln_b=_zeros(d, dtype),
            ffn=_mlp_init(rng, d, hidden, d, dtype, zero_out=True),
            rho_w=_zeros((d, 1), dtype), rho_b=_zeros(1, dtype),
        ))
    return ModelParams(
        encoder=init_encoder(rng, cfg.enc_channels, d, dtype),
        collision=_deform_init(rng, d, cfg.collision_points, dtype),
        layers=layers,
        track=HeadParams(attn=_deform_init(rng, d, cfg.head_points, dtype),
                         ln_g=_ones(d, dtype), ln_b=_zeros(d, dtype),
                         mlp=_mlp_init(rng, d, hidden, 2, dtype, zero_out=True)),
        vis=HeadParams(attn=_deform_init(rng, d, cfg.head_points, dtype),
                       ln_g=_ones(d, dtype), ln_b=_zeros(d, dtype),
                       mlp=_mlp_init(rng, d, hidden, 2, dtype, zero_out=True)),
    )


# ---------------------------------------------------------------------------
# state


@dataclass
class QueryState:
    """Per-query tracking state.

    mem_s / mem_c hold at most n_s entries, oldest first; an entry's slot is
    valid iff it is present (mem_valid exposes the fixed-width mask). Both
    memories start empty ("zero"): nothing is attended over at t=0.
    """
    f_init: Tensor                    # (N, d), frozen at init
    f: Tensor                         # (N, d), current distribution
    p: Tensor                         # (N, 2), feature-grid units
    mem_s: list[Tensor] = field(default_factory=list)
    mem_c: list[Tensor] = field(default_factory=list)
    n_s: int = 12
    t: int = 0

    @property
    def mem_valid(self) -> np.ndarray:
        mask = np.zeros(self.n_s, dtype=bool)
        mask[:len(self.mem_s)] = True
        return mask

    @property
    def n_queries(self) -> int:
        return self.f_init.shape[0]


@dataclass
class ReferenceSet:
    r: np.ndarray                     # (N, K, 2) cell-center coords, feature grid
    rho_r: Tensor                     # (N, K) pre-sigmoid logits
    indices: np.ndarray               # (N, K) flattened cell indices


@dataclass
class TrackOutput:
    p_out: Tensor                     # (N, 2) image pixels, clamped in-frame
    v: np.ndarray                     # (N,) visibility probabilities
    rho: np.ndarray                   # (N,) confidence probabilities
    r_last: np.ndarray                # (N, 2) feature-grid units
    dp: Tensor                        # (N, 2) offset from r_last, feature grid
    v_logit: Tensor                   # (N,)
    rho_logit: Tensor                 # (N,)
    correlations: list[Tensor]        # per layer, (N, H/4 * W/4) logits
    references: list[ReferenceSet]    # per layer
    grid_shape: tuple[int, int]       # (H/4, W/4)


def init_queries(fmap: FeatureMap, q: np.ndarray, n_s: int = 12) -> QueryState:
    """Anchor queries: sample the feature map at q/4 and zero the memories.

    q is (N, 2) in image pixels, inside the image rectangle.
    """
    q = np.asarray(q, dtype=fmap.o.data.dtype)
    if q.ndim != 2 or q.shape[1] != 2 or q.shape[0] == 0:
        raise T.ShapeError(f"init_queries: need (N, 2) with N >= 1, got {q.shape}")
    p0 = Tensor(q / 4.0)
    f_init = T.bilinear_sample(fmap.o, p0)
    hi = np.array([fmap.width - 1, fmap.height - 1], dtype=q.dtype)
    p = T.clamp(p0, np.zeros(2, dtype=q.dtype), hi)
    return QueryState(f_init=f_init, f=f_init, p=p, n_s=n_s)


# ---------------------------------------------------------------------------
# building blocks


def _mlp(x: Tensor, m: Mlp) -> Tensor:
    return T.gelu_mlp(x, m.w1, m.b1, m.w2, m.b2)


def _deform_attention(f: Tensor, fmap: FeatureMap, base: Tensor,
                      params: DeformAttnParams,
                      info: Optional[dict] = None) -> Tensor:
    """Deformable attention: predict offsets/weights from the query feature,
    sample the map around the base points, and aggregate.

    base is (N, B, 2) in feature-grid units; each base point contributes
    n_points // B predicted offsets for n_points samples total.
    """
    p_total = params.n_points
    b = base.shape[1]
    if p_total % b != 0:
        raise T.ShapeError(f"deformable attention: {p_total} points not a multiple "
                           f"of {b} base points")
    return T.deformable_attention(
        f, fmap.o, base, p_total // b,
        params.wq, params.bq, params.w_off, params.b_off,
        params.w_wgt, params.b_wgt, params.wv, params.bv,
        params.wo, params.bo, info)


def collision(f: Tensor, fmap: FeatureMap, p: Tensor,
              params: DeformAttnParams, info: Optional[dict] = None) -> Tensor:
    """Interaction of the distribution with a learned neighborhood around p."""
    n = f.shape[0]
    base = T.reshape(p, (n, 1, 2))
    return _deform_attention(f, fmap, base, params, info)


def _phi(query: Tensor, mem: list[Tensor], params: CrossAttnParams,
         info: Optional[dict] = None) -> Tensor:
    """One memory cross-attention block. With an empty memory the attention is
    skipped entirely (residual path only) and just the MLP residual applies."""
    if mem:
        return T.memory_block(
            query, mem, params.wq, params.bq, params.wk, params.bk,
            params.wv, params.bv, params.wo, params.bo,
            params.ln_g, params.ln_b,
            params.mlp.w1, params.mlp.b1, params.mlp.w2, params.mlp.b2, info)
    return T.add(query, _mlp(query, params.mlp))


def predict(state: QueryState, layer: LayerParams, query: Optional[Tensor] = None,
            trace: Optional[dict] = None) -> Tensor:
    """Streaming then collision memory cross-attention; query defaults to the
    frozen initial distribution (per-step re-anchoring)."""
    q = state.f_init if query is None else query
    info_s: Optional[dict] = {} if trace is not None else None
    info_c: Optional[dict] = {} if trace is not None else None
    h = _phi(q, state.mem_s, layer.phi_s, info_s)
    out = _phi(h, state.mem_c, layer.phi_c, info_c)
    if trace is not None:
        trace["predict_query"] = q.data.copy()
        if info_s and "weights" in info_s:
            trace.setdefault("phi_s_weights", []).append(info_s["weights"])
        if info_c and "weights" in info_c:
            trace.setdefault("phi_c_weights", []).append(info_c["weights"])
    return out


def _row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of (N, d) by a per-row scalar using core ops only."""
    n = x.shape[0]
    d = x.shape[1]
    rep = T.reshape(T.repeat_axis1(T.reshape(s, (n, 1, 1)), d), (n, d))
    return T.mul(x, rep)


def correlation(f: Tensor, fmap: FeatureMap, cosine: bool = False) -> Tensor:
    """Match the distribution against every feature cell: (N, H/4 * W/4).

    Default is the scaled dot product <f, o>/sqrt(d); the cosine variant is
    kept behind a flag for ablations.
    """
    d = f.shape[1]
    hw = fmap.height * fmap.width
    if not cosine:
        return T.map_correlation(f, fmap.o, 1.0 / math.sqrt(d))
    o2 = T.reshape(fmap.o, (d, hw))
    f_inv = T.rsqrt(T.tsum(T.mul(f, f), axis=1), eps=1e-12)
    o_inv = T.rsqrt(T.tsum(T.mul(o2, o2), axis=0), eps=1e-12)
    return T.mul(T.matmul(_row_scale(f, f_inv), o2), o_inv)


def select_references(c: Tensor, k: int, fmap: FeatureMap, layer: LayerParams,
                      forced_indices: Optional[np.ndarray] = None) -> ReferenceSet:
    """Pick the K strongest correlation cells per query (ties -> lowest
    flattened index) and score them with the layer's confidence head.

    Index selection is hard (no gradient); gradients flow through the features
    sampled at the chosen cells.
    """
    n, hw = c.shape
    if k < 1 or k > hw:
        raise T.ShapeError(f"select_references: K={k} outside [1, {hw}]")
    if forced_indices is None:
        order = np.argsort(-c.data, axis=1, kind="stable")
        idx = np.ascontiguousarray(order[:, :k])
    else:
        idx = np.asarray(forced_indices)
        if idx.shape != (n, k):
            raise T.ShapeError(f"forced indices shape {idx.shape} vs ({n}, {k})")
    w = fmap.width
    dt = c.data.dtype
    r = np.stack([(idx % w).astype(dt), (idx // w).astype(dt)], axis=2)
    # integer cell centers: bilinear sampling degenerates to a column gather
    rho = T.cell_gather_project(fmap.o, idx, layer.rho_w, layer.rho_b)
    return ReferenceSet(r=r, rho_r=rho, indices=idx)


def update(f: Tensor, fmap: FeatureMap, refs: ReferenceSet, layer: LayerParams,
           info: Optional[dict] = None) -> Tensor:
    """Deformable-attention update at the reference points, with residual,
    layer-norm and a residual feed-forward block."""
    attn = _deform_attention(f, fmap, Tensor(refs.r), layer.psi, info)
    return T.block_tail(f, attn, layer.psi_ln_g, layer.psi_ln_b,
                        layer.ffn.w1, layer.ffn.b1, layer.ffn.w2, layer.ffn.b2)


def _head(f: Tensor, fmap: FeatureMap, r_last: np.ndarray, head: HeadParams,
          info: Optional[dict] = None) -> Tensor:
    n = f.shape[0]
    base = Tensor(r_last.reshape(n, 1, 2).astype(f.data.dtype))
    attn = _deform_attention(f, fmap, base, head.attn, info)
    return T.block_tail(f, attn, head.ln_g, head.ln_b,
                        head.mlp.w1, head.mlp.b1, head.mlp.w2, head.mlp.b2,
                        residual=False)


def step(state: QueryState, fmap: FeatureMap, params: ModelParams,
         cfg: ModelConfig, trace: Optional[dict] = None,
         forced_refs: Optional[list[np.ndarray]] = None) -> TrackOutput:
    """Advance every query by one frame and push the memories.

    Runs the predict stage (layer 1, or every layer behind the config flag),
    then per layer: correlation -> reference selection on the K-schedule ->
    deformable update. The heads read the final distribution at the last
    reference point. Afterwards the post-layer distribution enters the
    streaming memory and its collision transform (at the new position) enters
    the collision memory; the oldest entries beyond n_s are evicted.
    """
    if state.f_init.shape[0] == 0:
        raise T.ShapeError("step: uninitialized state")
    n = state.n_queries
    sched = reference_schedule(cfg.layers)
    if len(params.layers) != cfg.layers:
        raise T.ShapeError("step: params/config layer count mismatch")
    if trace is not None:
        trace["k_schedule"] = list(sched)
        trace["collision_points"] = params.collision.n_points

    f = predict(state, params.layers[0], trace=trace)
    correlations: list[Tensor] = []
    refsets: list[ReferenceSet] = []
    for li, (k, layer) in enumerate(zip(sched, params.layers)):
        if li > 0 and cfg.predict_every_layer:
            f = predict(state, layer, query=f)
        c = correlation(f, fmap, cfg.cosine_correlation)
        refs = select_references(
            c, k, fmap, layer,
            None if forced_refs is None else forced_refs[li])
        info: Optional[dict] = {} if trace is not None else None
        f = update(f, fmap, refs, layer, info)
        correlations.append(c)
        refsets.append(refs)
        if trace is not None:
            trace.setdefault("ref_indices", []).append(refs.indices.copy())
            trace.setdefault("update_info", []).append(info)

    r_last = refsets[-1].r[:, 0, :].copy()
    info_t: Optional[dict] = {} if trace is not None else None
    info_v: Optional[dict] = {} if trace is not None else None
    dp = _head(f, fmap, r_last, params.track, info_t)
    vis_out = _head(f, fmap, r_last, params.vis, info_v)
    # coupled head: column 0 is confidence, column 1 is visibility
    rho_logit = T.reshape(T.narrow(vis_out, 1, 0, 1), (n,))
    v_logit = T.reshape(T.narrow(vis_out, 1, 1, 1), (n,))

    dt = f.data.dtype
    hi = np.array([fmap.width - 1, fmap.height - 1], dtype=dt)
    p_feat = T.clamp(T.add(Tensor(r_last), dp), np.zeros(2, dtype=dt), hi)
    p_out = T.scale(p_feat, 4.0)

    if trace is not None:
        trace["track_head_info"] = info_t
        trace["vis_head_info"] = info_v

    out = TrackOutput(
        p_out=p_out,
        v=_sigmoid_np(v_logit.data),
        rho=_sigmoid_np(rho_logit.data),
        r_last=r_last,
        dp=dp,
        v_logit=v_logit,
        rho_logit=rho_logit,
        correlations=correlations,
        references=refsets,
        grid_shape=(fmap.height, fmap.width),
    )

    info_c: Optional[dict] = {} if trace is not None else None
    fc_entry = collision(f, fmap, p_feat, params.collision, info_c)
    if trace is not None:
        trace["collision_info"] = info_c
    state.f = f
    state.p = p_feat
    state.mem_s.append(f)
    state.mem_c.append(fc_entry)
    if len(state.mem_s) > state.n_s:
        state.mem_s.pop(0)
        state.mem_c.pop(0)
    state.t += 1
    return out


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
