"""Built-in oracle and property checks for the selftest CLI command.

Each check prints one PASS/FAIL line; run_selftest returns False if any check
fails. The oracles here are small independent reimplementations (scalar loops,
exhaustive search), not calls back into the code under test.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from . import formats as F
from . import tensor as T
from . import tracker as TR
from .assoc import Detection, TrackedInstance, aggregate, match, similarity
from .encoder import encode
from .supervision import metrics
from .tensor import Tensor
from .train import TrainConfig, run_training


def _check_grad_sample() -> bool:
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)

    def value():
        with T.no_grad():
            return T.tsum(T.gelu(T.matmul(x, w))).item()

    with T.Tape() as tape:
        T.backward(T.tsum(T.gelu(T.matmul(x, w))), tape)
    h = 1e-5
    for t in (x, w):
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            if abs(num - gflat[i]) > 1e-4 * max(1.0, abs(num)):
                return False
    return True


def _check_bilinear_oracle() -> bool:
    rng = np.random.default_rng(1)
    fm = rng.normal(size=(3, 5, 6))
    for _ in range(5):
        x = rng.uniform(-1, 6)
        y = rng.uniform(-1, 5)
        got = T.bilinear_sample(Tensor(fm), Tensor(np.array([[x, y]]))).data[0]
        xc = min(max(x, 0.0), 5.0)
        yc = min(max(y, 0.0), 4.0)
        x0, y0 = int(math.floor(xc)), int(math.floor(yc))
        x1, y1 = min(x0 + 1, 5), min(y0 + 1, 4)
        tx, ty = xc - x0, yc - y0
        for c in range(3):
            top = fm[c, y0, x0] * (1 - tx) + fm[c, y0, x1] * tx
            bot = fm[c, y1, x0] * (1 - tx) + fm[c, y1, x1] * tx
            if abs(got[c] - (top * (1 - ty) + bot * ty)) > 1e-6:
                return False
    return True


def _check_softmax_oracle() -> bool:
    vals = [0.3, -1.2, 2.0, 0.0]
    got = T.softmax(Tensor(np.array(vals)), axis=0).data
    m = max(vals)
    exps = [math.exp(v - m) for v in vals]
    s = sum(exps)
    return all(abs(g - e / s) < 1e-7 for g, e in zip(got, exps))


def _check_correlation_oracle() -> bool:
    rng = np.random.default_rng(2)
    from .encoder import FeatureMap
    f = rng.normal(size=(2, 4))
    o = rng.normal(size=(4, 3, 3))
    got = TR.correlation(Tensor(f), FeatureMap(o=Tensor(o))).data
    for n in range(2):
        for yy in range(3):
            for xx in range(3):
                acc = sum(f[n, k] * o[k, yy, xx] for k in range(4)) / 2.0
                if abs(got[n, yy * 3 + xx] - acc) > 1e-5:
                    return False
    return True


def _check_topk_oracle() -> bool:
    rng = np.random.default_rng(3)
    cfg = TR.ModelConfig(dim=8, enc_channels=4, layers=1, mlp_ratio=2)
    params = TR.init_model(rng, cfg)
    from .encoder import FeatureMap
    fm = FeatureMap(o=Tensor(rng.normal(size=(8, 4, 5)).astype(np.float32)))
    c = rng.normal(size=(2, 20)).astype(np.float32)
    refs = TR.select_references(Tensor(c), 4, fm, params.layers[0])
    for i in range(2):
        oracle = sorted(range(20), key=lambda j: (-c[i, j], j))[:4]
        if refs.indices[i].tolist() != oracle:
            return False
    return True


def _check_similarity_values() -> bool:
    def inst(pixels, box, label):
        px = np.asarray(pixels, dtype=np.float64)
        return TrackedInstance(id=0, box=box, label=label, score=1.0, pixels=px,
                               visible=np.ones(len(px), bool),
                               outlier_streak=np.zeros(len(px), np.int64))

    a = similarity(inst([[1, 1]] * 4, (0, 0, 10, 10), 1),
                   Detection(box=(0.0, 0.0, 10.0, 10.0), label=1, score=1.0))
    b = similarity(inst([[1, 1]] * 4, (0, 0, 10, 10), 1),
                   Detection(box=(0.0, 0.0, 10.0, 10.0), label=2, score=1.0))
    c = similarity(inst([[1, 1]] * 12 + [[99, 99]] * 4, (0, 0, 10, 5), 1),
                   Detection(box=(0.0, 0.0, 10.0, 10.0), label=1, score=0.8))
    return a == 1.0 and b == 0.5 and abs(c - 0.3) < 1e-12


def _check_aggregate_oracle() -> bool:
    rng = np.random.default_rng(4)
    s = rng.uniform(0, 1, (3, 2))
    got = aggregate(s)

    def soft(vals):
        m = max(vals)
        e = [math.exp(v - m) for v in vals]
        z = sum(e)
        return [x / z for x in e]

    for i in range(3):
        row = soft(list(s[i]))
        for j in range(2):
            col = soft(list(s[:, j]))
            if abs(got[i, j] - 0.5 * (row[j] + col[i])) > 1e-12:
                return False
    return True


def _check_greedy_oracle() -> bool:
    rng = np.random.default_rng(5)
    for _ in range(20):
        s = rng.uniform(0, 1, (4, 4))
        pairs, _, _ = match(s, 0.3)
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
        if pairs != expect:
            return False
    return True


def _check_metrics_case() -> bool:
    errors = [0.5, 3.0, 9.0, 20.0]
    gt = np.full((4, 1, 2), 100.0)
    pred = gt.copy()
    for i, e in enumerate(errors):
        pred[i, 0, 0] += e
    vis = np.ones((4, 1), bool)
    rep = metrics(pred, vis, gt, vis, (256, 256))
    return (rep["delta_1"] == 0.25 and rep["delta_2"] == 0.25
            and rep["delta_4"] == 0.5 and rep["delta_8"] == 0.5
            and rep["delta_16"] == 0.75 and abs(rep["delta_avg"] - 0.45) < 1e-12)


def _check_checkpoint_roundtrip() -> bool:
    cfg = TrainConfig(dim=16, enc_channels=4, layers=2, mlp_ratio=2)
    params = TR.init_model(np.random.default_rng(0), cfg.model_config())
    with tempfile.TemporaryDirectory() as tmp:
        p1 = os.path.join(tmp, "a.lbmt")
        p2 = os.path.join(tmp, "b.lbmt")
        F.save_checkpoint(p1, params, cfg.canonical_text())
        loaded, _ = F.load_model(p1)
        F.save_checkpoint(p2, loaded, cfg.canonical_text())
        with open(p1, "rb") as fa, open(p2, "rb") as fb:
            return fa.read() == fb.read()


def _check_causal_replay() -> bool:
    cfg = TR.ModelConfig(dim=16, enc_channels=4, layers=2, n_s=3, mlp_ratio=2)
    params = TR.init_model(np.random.default_rng(6), cfg)
    rng = np.random.default_rng(7)
    images = [rng.random((3, 32, 32)).astype(np.float32) for _ in range(5)]
    q = rng.uniform(2, 28, size=(3, 2))

    def run(upto):
        outs = []
        with T.no_grad():
            fm = encode(Tensor(images[0]), params.encoder, 0)
            state = TR.init_queries(fm, q, n_s=cfg.n_s)
            for i in range(1, upto):
                fm = encode(Tensor(images[i]), params.encoder, i)
                outs.append(TR.step(state, fm, params, cfg).p_out.data.copy())
        return outs

    full = run(5)
    for upto in (2, 3, 4):
        prefix = run(upto)
        for a, b in zip(prefix, full):
            if not np.array_equal(a, b):
                return False
    return True


def _check_training_determinism() -> bool:
    cfg = TrainConfig(steps=3, batch_size=1, width=32, height=32, frames=3,
                      n_queries=3, pool_points=8, sprites=2, occluders=0,
                      dim=16, enc_channels=4, layers=2, n_s=2, mlp_ratio=2,
                      train_pool=2, seed=5)
    p1, _, log1 = run_training(cfg)
    p2, _, log2 = run_training(cfg)
    if log1 != log2:
        return False
    return F.checkpoint_bytes(p1, cfg.canonical_text()) == \
        F.checkpoint_bytes(p2, cfg.canonical_text())


def _check_training_loss_decreases() -> bool:
    cfg = TrainConfig(steps=150, batch_size=2, width=32, height=32, frames=4,
                      n_queries=4, pool_points=10, sprites=2, occluders=1,
                      dim=16, enc_channels=4, layers=2, n_s=3, mlp_ratio=2,
                      train_pool=4, seed=1, peak_lr=1e-3)
    _, _, log = run_training(cfg)
    totals = [float(ln.split("\t")[2]) for ln in log[1:]]
    head = float(np.mean(totals[:10]))
    tail = float(np.mean(totals[-10:]))
    return tail < 0.8 * head


CHECKS = [
    ("gradient-finite-difference", _check_grad_sample, False),
    ("bilinear-oracle", _check_bilinear_oracle, False),
    ("softmax-oracle", _check_softmax_oracle, False),
    ("correlation-oracle", _check_correlation_oracle, False),
    ("topk-oracle", _check_topk_oracle, False),
    ("similarity-values", _check_similarity_values, False),
    ("aggregate-oracle", _check_aggregate_oracle, False),
    ("greedy-oracle", _check_greedy_oracle, False),
    ("metrics-handcrafted", _check_metrics_case, False),
    ("checkpoint-roundtrip", _check_checkpoint_roundtrip, False),
    ("causal-replay", _check_causal_replay, False),
    ("training-determinism", _check_training_determinism, True),
    ("training-loss-decreases", _check_training_loss_decreases, True),
]


def run_selftest(fast: bool = False) -> bool:
    ok = True
    for name, fn, slow in CHECKS:
        if fast and slow:
            print(f"SKIP {name}")
            continue
        try:
            passed = fn()
        except Exception as e:                      # report, keep going
            print(f"FAIL {name} ({type(e).__name__}: {e})")
            ok = False
            continue
        print(("PASS" if passed else "FAIL") + f" {name}")
        ok = ok and passed
    return ok
