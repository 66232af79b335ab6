"""Acceptance criteria, one test per criterion. Each prints a PASS line on
success (run with -s or -rA to see them); any assertion failure marks the
criterion red. Criterion 6 performs the full desk-scale training run and
dominates the suite's runtime."""

import copy
import math
import time

import numpy as np
import pytest

from helpers import bilinear_scalar, check_gradients, correlation_scalar
from lbmtrack import assoc as A
from lbmtrack import formats as F
from lbmtrack import supervision as S
from lbmtrack import tensor as T
from lbmtrack import tracker as TR
from lbmtrack.cli import main as cli_main
from lbmtrack.encoder import FeatureMap, encode
from lbmtrack.supervision import metrics
from lbmtrack.synth import SceneSpec, generate_clip, sample_queries
from lbmtrack.tensor import Tensor
from lbmtrack.tracker import ModelConfig, init_model, init_queries, step
from lbmtrack.train import (TrainConfig, evaluate, held_out_seeds,
                            run_training)


def report(n, text):
    print(f"\nACCEPTANCE {n} PASS: {text}")


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_1_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(42)

    # the complete per-op finite-difference suite, 5 random instances each
    import test_tensor as ops
    for seed in range(5):
        ops.test_grad_elementwise_and_linear(seed)
        ops.test_grad_nonlinearities(seed)
        ops.test_grad_shape_ops(seed)
        ops.test_grad_clamp_away_from_bounds(seed)
        ops.test_grad_rsqrt_narrow_unstack(seed)
        ops.test_grad_bilinear_sample(seed)
        ops.test_grad_conv2d(seed)
        ops.test_grad_attention_kernels(seed)
        ops.test_grad_losses(seed)
        ops.test_grad_gelu_mlp_and_matches_composition(seed)
        ops.test_grad_residual_layer_norm_and_matches_composition(seed)
        ops.test_grad_deformable_attention(seed)
        ops.test_grad_block_tail_both_modes(seed)
        ops.test_grad_memory_block_and_matches_composition(seed)
        ops.test_grad_map_correlation_and_cell_gather(seed)

    def t64(arr):
        return Tensor(np.asarray(arr, np.float64), requires_grad=True)

    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        a, b = t64(r.normal(size=(3, 4))), t64(r.normal(size=(3, 4)))
        m1, m2 = t64(r.normal(size=(3, 4))), t64(r.normal(size=(4, 2)))
        bias = t64(r.normal(size=2))
        xg = t64(r.normal(size=(3, 4)))
        xr = t64(r.uniform(0.2, 2.0, (3, 4)) * r.choice([-1.0, 1.0], (3, 4)))
        gamma, beta = t64(r.uniform(0.5, 1.5, 4)), t64(r.normal(size=4))
        check_gradients(lambda: T.tsum(T.mul(T.add(a, b), T.sub(a, b))), [a, b])
        check_gradients(lambda: T.tsum(T.linear(m1, m2, bias)), [m1, m2, bias])
        check_gradients(lambda: T.tsum(T.relu(xr)), [xr])
        check_gradients(lambda: T.tsum(T.gelu(xg)), [xg])
        check_gradients(lambda: T.tsum(T.sigmoid(xg)), [xg])
        check_gradients(lambda: T.tsum(T.mul(T.layer_norm(xg, gamma, beta), xg)),
                        [xg, gamma, beta])
        read = Tensor(r.normal(size=(3, 4)))
        check_gradients(lambda: T.tsum(T.mul(T.softmax(xg, axis=1), read)), [xg])

        # bilinear sampling w.r.t. both the map and the coordinates
        fm = t64(r.normal(size=(3, 5, 6)))
        coords = t64(np.stack([r.integers(0, 5, 4) + r.uniform(0.25, 0.75, 4),
                               r.integers(0, 4, 4) + r.uniform(0.25, 0.75, 4)],
                              axis=1))
        read2 = Tensor(r.normal(size=(4, 3)))
        check_gradients(lambda: T.tsum(T.mul(T.bilinear_sample(fm, coords), read2)),
                        [fm, coords])

        # convolution
        cx, cw, cb = t64(r.normal(size=(2, 6, 8))), t64(r.normal(size=(3, 2, 3, 3))), t64(r.normal(size=3))
        check_gradients(lambda: T.tsum(T.conv2d(cx, cw, cb, 2, 1)), [cx, cw, cb])

        # cross-attention over memory slots
        q, k, v = t64(r.normal(size=(3, 4))), t64(r.normal(size=(3, 5, 4))), t64(r.normal(size=(3, 5, 4)))
        check_gradients(lambda: T.tsum(T.mul(T.slot_attention(q, k, v), read)),
                        [q, k, v])

        # fused deformable attention (all operands)
        d, bpts, reps = 4, 2, 3
        p = bpts * reps
        f = t64(r.normal(size=(3, d)))
        dfm = t64(r.normal(size=(d, 5, 6)))
        base = t64(np.stack([r.integers(0, 5, (3, bpts)) + 0.5,
                             r.integers(0, 4, (3, bpts)) + 0.5], axis=2))
        ps = [t64(r.normal(size=(d, d))), t64(r.normal(size=d)),
              t64(r.normal(0, 0.05, (d, p * 2))), t64(r.normal(0, 0.05, p * 2)),
              t64(r.normal(size=(d, p))), t64(r.normal(size=p)),
              t64(r.normal(size=(d, d))), t64(r.normal(size=d)),
              t64(r.normal(size=(d, d))), t64(r.normal(size=d))]
        check_gradients(
            lambda: T.tsum(T.deformable_attention(f, dfm, base, reps, *ps)),
            [f, dfm, base] + ps, rtol=2e-4)

        # loss kernels
        logits = t64(r.normal(size=(4, 5)))
        tgt = r.integers(0, 5, 4)
        mask = np.array([True, True, False, True])
        check_gradients(lambda: T.cross_entropy(logits, tgt, mask), [logits])
        z = t64(r.normal(size=(4, 2)))
        bt = (r.random((4, 2)) > 0.5).astype(np.float64)
        check_gradients(lambda: T.binary_cross_entropy(z, bt, mask), [z])
        pr = t64(r.normal(size=(4, 2)))
        l1_target = r.normal(size=(4, 2))
        check_gradients(lambda: T.l1_loss(pr, l1_target, mask), [pr])

    # end-to-end micro model, full loss, frozen reference indices
    cfg = ModelConfig(dim=8, enc_channels=4, layers=3, n_s=2, mlp_ratio=2)
    params = init_model(np.random.default_rng(7), cfg, dtype=np.float64)
    for _, t in T.iter_named_tensors(params):
        if np.all(t.data == 0):
            t.data[:] = rng.normal(0, 0.05, t.shape)
    images = [rng.random((3, 48, 64)) for _ in range(3)]
    q = np.array([[9.2, 14.1], [30.7, 21.3]])
    gts = [S.FrameGT(p=q + rng.normal(0, 2.0, q.shape),
                     visible=np.array([True, True])) for _ in range(2)]
    frozen = {}

    def build():
        fmap = encode(Tensor(images[0]), params.encoder, 0)
        state = init_queries(fmap, q, n_s=cfg.n_s)
        total = None
        for i in (1, 2):
            fmap = encode(Tensor(images[i]), params.encoder, i)
            out = step(state, fmap, params, cfg, forced_refs=frozen.get(i))
            if i not in frozen:
                frozen[i] = [r.indices for r in out.references]
            bd = S.frame_loss(out, gts[i - 1], (48, 64))
            total = bd.total_tensor if total is None else T.add(total, bd.total_tensor)
        return total

    build()
    sel = [params.layers[0].ffn.b1, params.collision.bv, params.track.mlp.b1,
           params.encoder.fuse.b, params.layers[2].psi_ln_g, params.vis.mlp.b1]
    check_gradients(build, sel, rtol=1e-3, atol=1e-6)

    elapsed = time.time() - t0
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"
    report(1, f"gradient suite (finite differences, 64-bit) in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. oracle suite


def test_criterion_2_oracle_suite():
    rng = np.random.default_rng(1)

    for i in range(20):
        fm = rng.normal(size=(3, 5, 6))
        x, y = rng.uniform(-1, 7), rng.uniform(-1, 6)
        got = T.bilinear_sample(Tensor(fm), Tensor(np.array([[x, y]]))).data[0]
        assert np.allclose(got, bilinear_scalar(fm, x, y), atol=1e-5)

    for i in range(20):
        f = rng.normal(size=(2, 4))
        o = rng.normal(size=(4, 3, 3))
        got = TR.correlation(Tensor(f), FeatureMap(o=Tensor(o))).data
        assert np.allclose(got.reshape(2, 3, 3), correlation_scalar(f, o), atol=1e-5)

    cfg = ModelConfig(dim=8, enc_channels=4, layers=1, mlp_ratio=2)
    params = init_model(np.random.default_rng(0), cfg)
    fm = FeatureMap(o=Tensor(rng.normal(size=(8, 4, 5)).astype(np.float32)))
    for i in range(20):
        c = rng.normal(size=(3, 20)).astype(np.float32)
        refs = TR.select_references(Tensor(c), 4, fm, params.layers[0])
        for n in range(3):
            oracle = sorted(range(20), key=lambda j: (-c[n, j], j))[:4]
            assert refs.indices[n].tolist() == oracle

    def soft(vals):
        m = max(vals)
        e = [math.exp(v - m) for v in vals]
        z = sum(e)
        return [u / z for u in e]

    for i in range(20):
        s = rng.uniform(0, 1, (3, 4))
        got = A.aggregate(s)
        for r_ in range(3):
            row = soft(list(s[r_]))
            for c_ in range(4):
                col = soft(list(s[:, c_]))
                assert abs(got[r_, c_] - 0.5 * (row[c_] + col[r_])) < 1e-5

    # similarity formula vs direct evaluation, 20 random instances
    for i in range(20):
        n_px = int(rng.integers(4, 12))
        pixels = rng.uniform(0, 40, (n_px, 2))
        visible = rng.random(n_px) > 0.2
        if not visible.any():
            visible[0] = True
        box_i = (0.0, 0.0, float(rng.uniform(10, 40)), float(rng.uniform(10, 40)))
        box_j = (0.0, 0.0, float(rng.uniform(10, 40)), float(rng.uniform(10, 40)))
        li, lj = int(rng.integers(0, 3)), int(rng.integers(0, 3))
        score = float(rng.uniform(0.1, 1.0))
        inst = A.TrackedInstance(id=0, box=box_i, label=li, score=1.0,
                                 pixels=pixels, visible=visible,
                                 outlier_streak=np.zeros(n_px, np.int64))
        det = A.Detection(box=box_j, label=lj, score=score)
        got = A.similarity(inst, det)
        vis_px = pixels[visible]
        n_in = sum(1 for p in vis_px
                   if box_j[0] <= p[0] <= box_j[2] and box_j[1] <= p[1] <= box_j[3])
        expect = (score * (0.5 + 0.5 * (li == lj))
                  * min(1.0, (box_i[2] * box_i[3]) / (box_j[2] * box_j[3]))
                  * n_in / len(vis_px))
        assert abs(got - expect) < 1e-5

    # the three fixed similarity examples reproduce exactly
    def mk(pixels, box, label):
        px = np.asarray(pixels, np.float64)
        return A.TrackedInstance(id=0, box=box, label=label, score=1.0,
                                 pixels=px, visible=np.ones(len(px), bool),
                                 outlier_streak=np.zeros(len(px), np.int64))

    assert A.similarity(mk([[1, 1]] * 4, (0, 0, 10, 10), 1),
                        A.Detection((0.0, 0.0, 10.0, 10.0), 1, 1.0)) == 1.0
    assert A.similarity(mk([[1, 1]] * 4, (0, 0, 10, 10), 1),
                        A.Detection((0.0, 0.0, 10.0, 10.0), 2, 1.0)) == 0.5
    got = A.similarity(mk([[1, 1]] * 12 + [[99, 99]] * 4, (0, 0, 10, 5), 1),
                       A.Detection((0.0, 0.0, 10.0, 10.0), 1, 0.8))
    assert got == pytest.approx(0.3, abs=1e-12)
    report(2, "oracle suite (bilinear, correlation, top-k, aggregation, similarity)")


# ---------------------------------------------------------------------------
# 3. online contract


def test_criterion_3_online_contract():
    cfg = ModelConfig(dim=16, enc_channels=4, layers=3, n_s=3, mlp_ratio=2)
    params = init_model(np.random.default_rng(99), cfg)

    for trial in range(10):
        clip = generate_clip(SceneSpec(seed=500 + trial, width=32, height=32,
                                       frames=6, n_points=8))
        q, _ = sample_queries(clip, 3, seed=trial)

        def run(upto):
            outs = []
            with T.no_grad():
                fm = encode(Tensor(clip.frames[0]), params.encoder, 0)
                state = init_queries(fm, q, n_s=cfg.n_s)
                for i in range(1, upto):
                    fm = encode(Tensor(clip.frames[i]), params.encoder, i)
                    out = step(state, fm, params, cfg)
                    outs.append((out.p_out.data.copy(), out.v.copy(), out.rho.copy()))
            return outs

        full = run(6)
        upto = 2 + trial % 4
        prefix = run(upto)
        for a, b in zip(prefix, full):
            assert np.array_equal(a[0], b[0])
            assert np.array_equal(a[1], b[1])
            assert np.array_equal(a[2], b[2])

    # memory-window invariance: perturb the entry pushed at frame t-n_s-1
    # while holding every later pushed entry fixed; once evicted it must not
    # influence the output (and while resident it must).
    rng = np.random.default_rng(7)
    images = [rng.random((3, 32, 32)).astype(np.float32) for _ in range(cfg.n_s + 4)]
    q = rng.uniform(2, 28, (3, 2))
    with T.no_grad():
        fmaps = [encode(Tensor(im), params.encoder, i) for i, im in enumerate(images)]
        state_a = init_queries(fmaps[0], q, n_s=cfg.n_s)
        step(state_a, fmaps[1], params, cfg)

        state_c = copy.deepcopy(state_a)
        state_c.mem_s[0] = Tensor(state_c.mem_s[0].data + 0.25)
        out_a = step(copy.deepcopy(state_a), fmaps[2], params, cfg)
        out_c = step(state_c, fmaps[2], params, cfg)
        assert not np.array_equal(out_a.p_out.data, out_c.p_out.data) or \
            not np.array_equal(out_a.rho, out_c.rho)

        state_b = copy.deepcopy(state_a)
        state_b.mem_s[0] = Tensor(state_b.mem_s[0].data + 0.25)
        state_b.mem_c[0] = Tensor(state_b.mem_c[0].data - 0.25)
        for i in range(2, 2 + cfg.n_s):
            step(state_a, fmaps[i], params, cfg)
            step(state_b, fmaps[i], params, cfg)
            state_b.mem_s[-1] = state_a.mem_s[-1].detach()
            state_b.mem_c[-1] = state_a.mem_c[-1].detach()
        fa = step(state_a, fmaps[2 + cfg.n_s], params, cfg)
        fb = step(state_b, fmaps[2 + cfg.n_s], params, cfg)
        assert np.array_equal(fa.p_out.data, fb.p_out.data)
        assert np.array_equal(fa.v, fb.v)
        assert np.array_equal(fa.rho, fb.rho)
    report(3, "online contract (causal bit-replay, memory-window invariance)")


# ---------------------------------------------------------------------------
# 4. loss semantics


def test_criterion_4_loss_semantics():
    vis = np.array([True])
    gt = np.array([[100.0, 100.0]])
    assert S.confidence_targets(np.array([[107.9, 100.0]]), gt, vis, 512)[0] == 1.0
    assert S.confidence_targets(np.array([[108.1, 100.0]]), gt, vis, 512)[0] == 0.0
    # scaled radius at the desk width (64): 8 * 64/512 = 1 px
    assert S.confidence_targets(np.array([[10.9, 10.0]]),
                                np.array([[10.0, 10.0]]), vis, 64)[0] == 1.0
    assert S.confidence_targets(np.array([[11.1, 10.0]]),
                                np.array([[10.0, 10.0]]), vis, 64)[0] == 0.0
    # occluded ground truth: target 0 at zero distance
    assert S.confidence_targets(gt, gt, np.array([False]), 512)[0] == 0.0

    rng = np.random.default_rng(3)
    c = Tensor(rng.normal(size=(2, 12)).astype(np.float32))
    dp = Tensor(rng.normal(size=(2, 2)).astype(np.float32))
    none_vis = np.array([False, False])
    p_gt = np.array([[5.0, 5.0], [9.0, 9.0]])
    assert S.cls_loss([c], (3, 4), p_gt, none_vis, (48, 64)).item() == 0.0
    assert S.reg_loss(dp, rng.uniform(0, 3, (2, 2)), p_gt, none_vis).item() == 0.0

    # composition on real tracker output
    cfg = ModelConfig(dim=16, enc_channels=4, layers=3, n_s=3, mlp_ratio=2)
    params = init_model(np.random.default_rng(4), cfg)
    images = [rng.random((3, 32, 32)).astype(np.float32) for _ in range(2)]
    q = rng.uniform(2, 28, (3, 2))
    fm = encode(Tensor(images[0]), params.encoder, 0)
    state = init_queries(fm, q, n_s=cfg.n_s)
    out = step(state, encode(Tensor(images[1]), params.encoder, 1), params, cfg)
    lb = S.frame_loss(out, S.FrameGT(p=q, visible=np.array([True, True, False])),
                      (32, 32), lambda_cls=0.6)
    assert lb.total == pytest.approx(
        0.6 * lb.cls + lb.reg + lb.vis + lb.conf + lb.conf_ref, abs=1e-6)
    report(4, "loss semantics (scaled 8 px flip, invisible masking, composition)")


# ---------------------------------------------------------------------------
# 5. metrics


def test_criterion_5_metrics():
    assert S.METRIC_THRESHOLDS == (1, 2, 4, 8, 16)

    errors = [0.5, 3.0, 9.0, 20.0]
    gt = np.full((4, 1, 2), 100.0)
    pred = gt.copy()
    for i, e in enumerate(errors):
        pred[i, 0, 0] += e
    ones = np.ones((4, 1), bool)
    rep = metrics(pred, ones, gt, ones, (256, 256))
    assert rep["delta_1"] == 0.25 and rep["delta_2"] == 0.25
    assert rep["delta_4"] == 0.5 and rep["delta_8"] == 0.5
    assert rep["delta_16"] == 0.75
    assert rep["delta_avg"] == pytest.approx(0.45, abs=1e-12)

    rng = np.random.default_rng(5)
    p = rng.uniform(0, 60, (5, 6, 2))
    v = rng.random((5, 6)) > 0.3
    rep = metrics(p, v, p, v, (48, 64))
    assert rep["aj"] == 1.0 and rep["delta_avg"] == 1.0 and rep["oa"] == 1.0

    # thresholds apply in the 256-rescaled frame: a 2 px image error at 64 px
    # width scales to 8, failing delta_8 (strict <) but passing delta_16
    gt2 = np.full((1, 1, 2), 20.0)
    pred2 = gt2.copy()
    pred2[0, 0, 0] += 2.0
    one = np.ones((1, 1), bool)
    rep2 = metrics(pred2, one, gt2, one, (256, 64))
    assert rep2["delta_8"] == 0.0 and rep2["delta_16"] == 1.0
    report(5, "metrics (handcrafted case, identity, 256-frame thresholds)")


# ---------------------------------------------------------------------------
# 7, 8, 9 (run before the long training criterion)


def test_criterion_7_layer_and_k_schedule():
    cfg = TrainConfig()    # desk defaults: d=64, 3 layers
    params = init_model(np.random.default_rng(0), cfg.model_config())
    clip = generate_clip(SceneSpec(seed=3))
    q, _ = sample_queries(clip, 4, seed=0)
    with T.no_grad():
        fm = encode(Tensor(clip.frames[0]), params.encoder, 0)
        state = init_queries(fm, q, n_s=cfg.n_s)
        trace = {}
        step(state, encode(Tensor(clip.frames[1]), params.encoder, 1), params,
             cfg.model_config(), trace=trace)
    assert trace["k_schedule"] == [9, 4, 1]
    assert [r.shape[1] for r in trace["ref_indices"]] == [9, 4, 1]
    assert trace["collision_points"] == 9
    assert trace["collision_info"]["weights"].shape[1] == 9
    report(7, "layer/K-schedule conformance (K = 9, 4, 1; collision uses 9 points)")


def test_criterion_8_association_suite():
    cfg = A.AssocConfig(n_px=4, outlier_timeout=2, t_lost=10, seed=0)
    rng = np.random.default_rng(0)

    # pixel-count conservation across repeated updates with pruning pressure
    inst = A.spawn(A.Detection((0.0, 0.0, 10.0, 10.0), 1, 1.0), 4, rng)
    det = A.Detection((0.0, 0.0, 10.0, 10.0), 1, 1.0)
    streak_oracle = np.zeros(4, int)
    for frame in range(6):
        inst.pixels[2] = [50.0, 50.0]          # kept outside every frame
        outside = np.array([False, False, True, False])
        streak_oracle = np.where(outside, streak_oracle + 1, 0)
        A.lifecycle_update(inst, det, cfg, rng)
        if streak_oracle[2] > cfg.outlier_timeout:
            streak_oracle[2] = 0               # pruned and replenished
            assert A._in_box(inst.pixels[[2]], det.box).all()
        assert inst.pixels.shape == (4, 2)
        assert inst.outlier_streak.tolist() == streak_oracle.tolist()

    # dropout scenario: identity preserved through k < t_lost missing frames
    def box(t):
        return (10.0 + 2.0 * t, 10.0, 22.0 + 2.0 * t, 24.0)

    dets = [[A.Detection(box(t), 1, 0.9)] if not 3 <= t <= 5 else []
            for t in range(10)]
    pred = A.ScriptedPredictor(
        offset_fn=lambda t, o, b: np.array([2.0, 0.0]) * (t - b)[:, None])
    snaps, events = A.track_objects(dets, pred, A.AssocConfig(n_px=8, seed=0))
    assert [e.event for e in events].count("spawn") == 1
    assert all(len(s) == 1 and s[0].id == 0 for s in snaps)

    # crossing objects with distinct labels: no identity swap
    size = 10.0
    dets = [[A.Detection((4.0 + 4 * t, 10.0, 4.0 + 4 * t + size, 10.0 + size), 1, 0.9),
             A.Detection((44.0 - 4 * t, 10.0, 44.0 - 4 * t + size, 10.0 + size), 2, 0.9)]
            for t in range(11)]

    def offset(t, origins, births):
        births_x = origins[:, 0] - 4.0 * births * np.where(origins[:, 0] < 32, 1, -1)
        v = np.where((births_x < 32)[:, None], [[4.0, 0.0]], [[-4.0, 0.0]])
        return v * (t - births)[:, None]

    snaps, _ = A.track_objects(dets, A.ScriptedPredictor(offset_fn=offset),
                               A.AssocConfig(n_px=8, seed=0))
    for s in snaps:
        assert {inst.id: inst.label for inst in s} == {0: 1, 1: 2}

    # greedy matcher equals the exhaustive greedy oracle on 100 random matrices
    for _ in range(100):
        s = rng.uniform(0, 1, (4, 4))
        pairs, _, _ = A.match(s, 0.3)
        used_i, used_j, expect = set(), set(), []
        while True:
            best = None
            for i in range(4):
                for j in range(4):
                    if i in used_i or j in used_j:
                        continue
                    if s[i, j] > 0.3 and (best is None or s[i, j] > s[best]):
                        best = (i, j)
            if best is None:
                break
            expect.append(best)
            used_i.add(best[0])
            used_j.add(best[1])
        assert pairs == expect
    report(8, "association suite (conservation, pruning walk, dropout, "
              "crossing, greedy oracle)")


def test_criterion_9_reproducibility(tmp_path):
    cfg = TrainConfig(steps=4, batch_size=2, width=32, height=32, frames=4,
                      n_queries=4, pool_points=10, sprites=2, occluders=1,
                      dim=16, enc_channels=4, layers=2, n_s=3, mlp_ratio=2,
                      train_pool=3, eval_clips=2, seed=11)
    cfg_path = tmp_path / "cfg.txt"
    cfg_path.write_text(cfg.canonical_text())

    outs = []
    for run in ("a", "b"):
        ckpt = tmp_path / f"ckpt_{run}.lbmt"
        log = tmp_path / f"log_{run}.tsv"
        assert cli_main(["train", "--config", str(cfg_path), "--out", str(ckpt),
                         "--log", str(log)]) == 0
        outs.append((ckpt.read_bytes(), log.read_bytes()))
    assert outs[0] == outs[1]

    data = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(data), "--seed", "4",
                     "--clips", "1", "--frames", "5", "--width", "32",
                     "--height", "32", "--points", "8"]) == 0
    clip_dir = data / "clip_000"
    tracks = []
    for run in ("a", "b"):
        tf = tmp_path / f"track_{run}.txt"
        assert cli_main(["track-points", "--checkpoint", str(tmp_path / "ckpt_a.lbmt"),
                         "--clip", str(clip_dir), "--out", str(tf),
                         "--queries", "4", "--seed", "1"]) == 0
        tracks.append(tf.read_bytes())
    assert tracks[0] == tracks[1]

    clip = F.read_clip(clip_dir)
    det_path = tmp_path / "dets.txt"
    lines = []
    for t in range(clip.n_frames):
        x, y = clip.gt_p[t, 0]
        lines.append(f"{t} {x - 5:.1f} {y - 5:.1f} {x + 5:.1f} {y + 5:.1f} 1 0.9")
    det_path.write_text("\n".join(lines) + "\n")
    logs = []
    for run in ("a", "b"):
        ev = tmp_path / f"events_{run}.log"
        assert cli_main(["track-objects", "--clip", str(clip_dir),
                         "--detections", str(det_path), "--out", str(ev),
                         "--checkpoint", str(tmp_path / "ckpt_a.lbmt"),
                         "--n-px", "4"]) == 0
        logs.append(ev.read_bytes())
    assert logs[0] == logs[1]
    report(9, "reproducibility (bit-identical checkpoint, track file, event log)")


# ---------------------------------------------------------------------------
# 6. desk-scale learnability (the long one; runs last)


def test_criterion_6_desk_scale_learnability():
    cfg = TrainConfig()           # 48x64, T=12, N=8, d=64, 3 layers, 2000 steps
    assert (cfg.width, cfg.height, cfg.frames, cfg.n_queries) == (64, 48, 12, 8)
    assert cfg.dim == 64 and cfg.layers == 3 and cfg.steps == 2000

    t0 = time.time()
    params, _, log = run_training(cfg)
    train_secs = time.time() - t0
    assert train_secs <= 30 * 60, f"training took {train_secs / 60:.1f} min"

    totals = [float(ln.split("\t")[2]) for ln in log[1:]]
    tail_mean = float(np.mean(totals[-20:]))
    assert tail_mean <= 0.5 * totals[50], \
        f"loss fell only {totals[50]:.3f} -> {tail_mean:.3f} from step 50"

    seeds = held_out_seeds(cfg)
    trained = evaluate(params, cfg, seeds)
    untrained_params = init_model(np.random.default_rng(cfg.seed),
                                  cfg.model_config())
    untrained = evaluate(untrained_params, cfg, seeds)
    assert trained["delta_avg"] >= 3.0 * untrained["delta_avg"], \
        f"delta_avg {trained['delta_avg']:.3f} vs 3x untrained " \
        f"{untrained['delta_avg']:.3f}"
    assert trained["oa"] >= 0.75, f"OA {trained['oa']:.3f}"
    report(6, f"desk-scale learnability: {train_secs / 60:.1f} min, "
              f"delta_avg {trained['delta_avg']:.3f} "
              f"(untrained {untrained['delta_avg']:.3f}), OA {trained['oa']:.3f}")
