"""Desk-scale training loop: AdamW with cosine decay and linear warm-up,
full backprop through each unrolled clip (memory writes included), and
held-out evaluation on freshly generated clips."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .encoder import encode, encode_batch
from .supervision import FrameGT, LossBreakdown, frame_loss, metrics
from .synth import Clip, SceneSpec, generate_clip, sample_queries
from .tensor import Tensor
from .tracker import ModelConfig, ModelParams, init_model, init_queries, step


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # optimization
    steps: int = 2000
    batch_size: int = 4
    peak_lr: float = 5e-4
    weight_decay: float = 1e-5
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    lambda_cls: float = 1.0
    seed: int = 0
    # clip spec
    width: int = 64
    height: int = 48
    frames: int = 12
    n_queries: int = 8
    pool_points: int = 24
    sprites: int = 3
    occluders: int = 1
    max_speed: float = 3.0
    deform_amp: float = 0.12
    eval_clips: int = 20
    train_pool: int = 384             # fixed training set size (clips)
    # model dims
    dim: int = 64
    enc_channels: int = 16
    layers: int = 3
    n_s: int = 12
    collision_points: int = 9
    update_reps: int = 4
    head_points: int = 9
    mlp_ratio: int = 4
    predict_every_layer: bool = False
    cosine_correlation: bool = False

    def validate(self) -> None:
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, enc_channels=self.enc_channels,
                           layers=self.layers, n_s=self.n_s,
                           collision_points=self.collision_points,
                           update_reps=self.update_reps,
                           head_points=self.head_points, mlp_ratio=self.mlp_ratio,
                           predict_every_layer=self.predict_every_layer,
                           cosine_correlation=self.cosine_correlation)

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(seed=seed, width=self.width, height=self.height,
                         frames=self.frames, sprites=self.sprites,
                         occluders=self.occluders, n_points=self.pool_points,
                         max_speed=self.max_speed, deform_amp=self.deform_amp)

    def canonical_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, kv: dict) -> "TrainConfig":
        cfg = cls()
        for f in fields(cls):
            if f.name in kv:
                raw = kv[f.name]
                if f.type in ("int", int):
                    setattr(cfg, f.name, int(raw))
                elif f.type in ("float", float):
                    setattr(cfg, f.name, float(raw))
                elif f.type in ("bool", bool):
                    setattr(cfg, f.name, str(raw).strip() in ("True", "true", "1"))
                else:
                    setattr(cfg, f.name, raw)
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.validate()
        return cfg


def lr_at(step_idx: int, total: int, cfg: TrainConfig) -> float:
    """Linear ramp to the peak over the warm-up fraction, then cosine decay."""
    if total <= 0:
        raise ValueError("total step count must be positive")
    if not (0 <= step_idx <= total):
        raise ValueError(f"step {step_idx} outside [0, {total}]")
    warm = cfg.warmup_frac * total
    if step_idx < warm:
        return cfg.peak_lr * step_idx / warm
    progress = (step_idx - warm) / (total - warm) if total > warm else 1.0
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name; decay is decoupled."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_grad_norm(params, max_norm: float) -> float:
    total = 0.0
    for _, p in T.iter_named_tensors(params):
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in T.iter_named_tensors(params):
            if p.grad is not None:
                p.grad *= p.data.dtype.type(factor)
    return norm


def adamw_step(params, opt: OptimizerState, lr: float, weight_decay: float) -> None:
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for name, p in T.iter_named_tensors(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            opt.m[name] = m
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * (mhat / (np.sqrt(vhat) + opt.eps)
                         + weight_decay * p.data)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# forward helpers


def forward_clip_loss(clip: Clip, queries: np.ndarray, sel: np.ndarray,
                      params: ModelParams, cfg: TrainConfig):
    """Unroll one clip and return (total Tensor, per-frame breakdowns)."""
    mcfg = cfg.model_config()
    image_shape = clip.image_shape
    stack = Tensor(np.stack(clip.frames[clip.query_frame:]))
    fmaps = encode_batch(stack, params.encoder,
                         list(range(clip.query_frame, clip.n_frames)))
    state = init_queries(fmaps[0], queries, n_s=mcfg.n_s)
    total = None
    breakdowns = []
    for t in range(clip.query_frame + 1, clip.n_frames):
        out = step(state, fmaps[t - clip.query_frame], params, mcfg)
        gt = FrameGT(p=clip.gt_p[t, sel], visible=clip.gt_v[t, sel])
        bd = frame_loss(out, gt, image_shape, cfg.lambda_cls)
        breakdowns.append(bd)
        total = bd.total_tensor if total is None else T.add(total, bd.total_tensor)
    total = T.scale(total, 1.0 / len(breakdowns))
    return total, breakdowns


def track_clip(clip: Clip, queries: np.ndarray, params: ModelParams,
               mcfg: ModelConfig):
    """Online inference over a clip; returns per-frame (p, v, rho) arrays
    for frames after the query frame. Frames are processed strictly in order;
    each output depends only on frames seen so far."""
    with T.no_grad():
        fm = encode(Tensor(clip.frames[clip.query_frame]), params.encoder,
                    clip.query_frame)
        state = init_queries(fm, queries, n_s=mcfg.n_s)
        ps, vs, rhos = [], [], []
        for t in range(clip.query_frame + 1, clip.n_frames):
            fm = encode(Tensor(clip.frames[t]), params.encoder, t)
            out = step(state, fm, params, mcfg)
            ps.append(out.p_out.data.copy())
            vs.append(out.v.copy())
            rhos.append(out.rho.copy())
    return np.stack(ps), np.stack(vs), np.stack(rhos)


def _mean_breakdown(breakdowns: list[LossBreakdown], lambda_cls: float,
                    total_value: float) -> LossBreakdown:
    def m(attr):
        return float(np.mean([getattr(b, attr) for b in breakdowns]))

    return LossBreakdown(cls=m("cls"), reg=m("reg"), vis=m("vis"),
                         conf=m("conf"), conf_ref=m("conf_ref"),
                         total=total_value, lambda_cls=lambda_cls,
                         total_tensor=None)


def train_step(batch: list[tuple[Clip, np.ndarray, np.ndarray]],
               params: ModelParams, opt: OptimizerState, cfg: TrainConfig,
               step_idx: int) -> LossBreakdown:
    """One optimization step over a batch of (clip, queries, pool indices)."""
    lr = lr_at(step_idx, cfg.steps, cfg)
    T.zero_grads(params)
    all_bds = []
    with T.Tape() as tape:
        total = None
        for clip, queries, sel in batch:
            clip_total, bds = forward_clip_loss(clip, queries, sel, params, cfg)
            all_bds.extend(bds)
            total = clip_total if total is None else T.add(total, clip_total)
        total = T.scale(total, 1.0 / len(batch))
        if not np.isfinite(total.item()):
            raise TrainingDiverged(f"non-finite loss at step {step_idx}")
        T.backward(total, tape)
    clip_grad_norm(params, cfg.grad_clip)
    adamw_step(params, opt, lr, cfg.weight_decay)
    return _mean_breakdown(all_bds, cfg.lambda_cls, total.item())


def robust_clip(cfg: TrainConfig, seed: int) -> Clip:
    """Generate a clip, deterministically re-seeding on degenerate scenes."""
    s = seed
    for _ in range(8):
        try:
            return generate_clip(cfg.scene_spec(s))
        except ValueError:
            s = (s * 2 + 1) % 2 ** 62
    raise ValueError(f"could not generate a usable clip from seed {seed}")


def make_batch(cfg: TrainConfig, data_rng: np.random.Generator):
    """Freshly generated batch (used by tests and small experiments)."""
    batch = []
    for _ in range(cfg.batch_size):
        clip_seed = int(data_rng.integers(2 ** 62))
        q_seed = int(data_rng.integers(2 ** 62))
        clip = robust_clip(cfg, clip_seed)
        queries, sel = sample_queries(clip, cfg.n_queries, seed=q_seed)
        batch.append((clip, queries, sel))
    return batch


class ClipPool:
    """Fixed training set of pregenerated clips, stored 8-bit to save memory.

    Frames are quantized to 8-bit levels at generation time, so rehydration
    reproduces them exactly.
    """

    def __init__(self, cfg: TrainConfig, seeds: list[int]):
        self._packed = []
        for s in seeds:
            clip = robust_clip(cfg, s)
            frames_u8 = np.stack([(f * 255.0).round().astype(np.uint8)
                                  for f in clip.frames])
            self._packed.append((frames_u8, clip))

    def __len__(self) -> int:
        return len(self._packed)

    def get(self, i: int) -> Clip:
        frames_u8, clip = self._packed[i]
        frames = [u.astype(np.float32) / np.float32(255.0) for u in frames_u8]
        return replace(clip, frames=frames)


def pool_batch(pool: ClipPool, cfg: TrainConfig, data_rng: np.random.Generator):
    batch = []
    for _ in range(cfg.batch_size):
        idx = int(data_rng.integers(len(pool)))
        q_seed = int(data_rng.integers(2 ** 62))
        clip = pool.get(idx)
        queries, sel = sample_queries(clip, cfg.n_queries, seed=q_seed)
        batch.append((clip, queries, sel))
    return batch


def evaluate(params: ModelParams, cfg: TrainConfig,
             seeds: list[int]) -> dict[str, float]:
    """Mean tracking metrics over held-out clips generated from `seeds`."""
    if not seeds:
        raise ValueError("empty held-out set")
    mcfg = cfg.model_config()
    reports = []
    for s in seeds:
        clip = robust_clip(cfg, s)
        queries, sel = sample_queries(clip, cfg.n_queries, seed=s)
        pred_p, pred_v, _ = track_clip(clip, queries, params, mcfg)
        lo = clip.query_frame + 1
        rep = metrics(pred_p, pred_v, clip.gt_p[lo:, sel], clip.gt_v[lo:, sel],
                      clip.image_shape)
        reports.append(rep)
    return {k: float(np.mean([r[k] for r in reports])) for k in reports[0]}


def held_out_seeds(cfg: TrainConfig) -> list[int]:
    # disjoint from the training stream, which draws giant seeds from its rng
    return [1_000_000 + 7 * cfg.seed + i for i in range(cfg.eval_clips)]


def run_training(cfg: TrainConfig,
                 log_fn: Optional[Callable[[str], None]] = None,
                 progress_every: int = 0) -> tuple[ModelParams, OptimizerState, list[str]]:
    """Train from scratch; returns params, optimizer state and the log lines.

    The log schema is one tab-separated line per step:
    step, lr, total, cls, reg, vis, conf, conf_ref.
    """
    cfg.validate()
    params = init_model(np.random.default_rng(cfg.seed), cfg.model_config())
    opt = OptimizerState()
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    pool_seeds = [int(data_rng.integers(2 ** 62)) for _ in range(cfg.train_pool)]
    pool = ClipPool(cfg, pool_seeds)
    lines = ["#step\tlr\ttotal\tcls\treg\tvis\tconf\tconf_ref"]
    t0 = time.time()
    for i in range(cfg.steps):
        batch = pool_batch(pool, cfg, data_rng)
        bd = train_step(batch, params, opt, cfg, i)
        lr = lr_at(i, cfg.steps, cfg)
        line = (f"{i}\t{lr:.8e}\t{bd.total:.6f}\t{bd.cls:.6f}\t{bd.reg:.6f}"
                f"\t{bd.vis:.6f}\t{bd.conf:.6f}\t{bd.conf_ref:.6f}")
        lines.append(line)
        if log_fn is not None:
            log_fn(line)
        if progress_every and (i + 1) % progress_every == 0:
            rate = (i + 1) / (time.time() - t0)
            print(f"step {i + 1}/{cfg.steps} total={bd.total:.4f} "
                  f"({rate:.2f} steps/s)", flush=True)
    return params, opt, lines
