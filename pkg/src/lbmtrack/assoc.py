"""Open-world object tracking by points: instances spawn from detections,
carry a set of fine-grained pixels tracked by a point predictor, and associate
across frames through pixel-in-box correspondence.

The per-pair similarity is
    s_j * (0.5 + 0.5 * [l_i == l_j]) * min(1, A_i / A_j) * N_in / (N_in + N_out)
over the instance's visible predicted pixels; the matrix is aggregated as the
mean of row-wise and column-wise softmax normalizations, then matched greedily
above a threshold. Pixels that stay outside the matched box beyond a timeout
are pruned and replenished inside the current box; instances unmatched for too
long are terminated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np


@dataclass
class Detection:
    box: tuple[float, float, float, float]      # x1, y1, x2, y2 image px
    label: int
    score: float

    def validate(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass
class TrackedInstance:
    id: int
    box: tuple[float, float, float, float]
    label: int
    score: float
    pixels: np.ndarray                 # (n_px, 2) current predicted positions
    visible: np.ndarray                # (n_px,) bool
    outlier_streak: np.ndarray         # (n_px,) int
    frames_since_matched: int = 0
    pixel_handles: list = field(default_factory=list)   # predictor handles

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass
class AssocConfig:
    n_px: int = 16
    outlier_timeout: int = 2           # streak frames before a pixel is pruned
    t_lost: int = 10                   # unmatched frames before termination
    tau_match: float = 0.3
    tau_spawn: float = 0.5
    reweighted: bool = True            # detection-score and label terms on
    matcher: str = "greedy"            # "greedy" | "exhaustive"
    seed: int = 0


def _in_box(points: np.ndarray, box) -> np.ndarray:
    x1, y1, x2, y2 = box
    return ((points[:, 0] >= x1) & (points[:, 0] <= x2)
            & (points[:, 1] >= y1) & (points[:, 1] <= y2))


def spawn(det: Detection, n_px: int, rng: np.random.Generator,
          instance_id: int = 0) -> TrackedInstance:
    """Sample n_px pixels uniformly inside the detection box."""
    det.validate()
    x1, y1, x2, y2 = det.box
    px = np.stack([rng.uniform(x1, x2, n_px), rng.uniform(y1, y2, n_px)], axis=1)
    return TrackedInstance(id=instance_id, box=det.box, label=det.label,
                           score=det.score, pixels=px,
                           visible=np.ones(n_px, dtype=bool),
                           outlier_streak=np.zeros(n_px, dtype=np.int64))


def similarity(inst: TrackedInstance, det: Detection,
               reweighted: bool = True) -> float:
    """Cross-frame correspondence score; 0 when no pixel is visible."""
    vis = inst.visible
    n_vis = int(vis.sum())
    if n_vis == 0:
        return 0.0
    n_in = int(_in_box(inst.pixels[vis], det.box).sum())
    frac = n_in / n_vis
    area_term = min(1.0, inst.area / det.area)
    if not reweighted:
        return area_term * frac
    label_term = 0.5 + 0.5 * (1.0 if inst.label == det.label else 0.0)
    return det.score * label_term * area_term * frac


def similarity_matrix(instances: list[TrackedInstance], dets: list[Detection],
                      reweighted: bool = True) -> np.ndarray:
    s = np.zeros((len(instances), len(dets)))
    for i, inst in enumerate(instances):
        for j, det in enumerate(dets):
            s[i, j] = similarity(inst, det, reweighted)
    return s


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def aggregate(s: np.ndarray) -> np.ndarray:
    """Mean of row-wise and column-wise softmax normalizations."""
    if s.ndim != 2 or 0 in s.shape:
        raise ValueError(f"aggregate: need a non-empty 2-D matrix, got {s.shape}")
    return 0.5 * (_softmax_rows(s) + _softmax_rows(s.T).T)


def match(s_agg: np.ndarray, tau_match: float,
          matcher: str = "greedy") -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Assign instances (rows) to detections (columns).

    Greedy default: repeatedly take the global maximum above tau_match and
    strike its row and column; ties break toward the lowest (row, col). The
    exhaustive matcher maximizes the total score over all assignments
    (ablation aid, sizes <= 9).
    """
    m, n = s_agg.shape
    if matcher == "exhaustive":
        return _match_exhaustive(s_agg, tau_match)
    work = s_agg.copy()
    pairs: list[tuple[int, int]] = []
    blocked = -np.inf
    while True:
        flat = np.argmax(work)              # lowest flat index on ties
        i, j = divmod(int(flat), n)
        if not (work[i, j] > tau_match):
            break
        pairs.append((i, j))
        work[i, :] = blocked
        work[:, j] = blocked
    matched_i = {i for i, _ in pairs}
    matched_j = {j for _, j in pairs}
    return (pairs, [i for i in range(m) if i not in matched_i],
            [j for j in range(n) if j not in matched_j])


def _match_exhaustive(s_agg: np.ndarray, tau: float):
    m, n = s_agg.shape
    small = min(m, n)
    if small > 9:
        raise ValueError("exhaustive matcher capped at 9x9")
    best, best_pairs = -1.0, []
    rows = range(m)
    for cols in itertools.permutations(range(n), small):
        chosen = list(zip(rows, cols)) if m <= n else \
            [(r, c) for c, r in zip(range(n), cols)]
        pairs = [(i, j) for i, j in chosen if s_agg[i, j] > tau]
        score = sum(s_agg[i, j] for i, j in pairs)
        if score > best + 1e-12:
            best, best_pairs = score, pairs
    matched_i = {i for i, _ in best_pairs}
    matched_j = {j for _, j in best_pairs}
    return (best_pairs, [i for i in range(m) if i not in matched_i],
            [j for j in range(n) if j not in matched_j])


def lifecycle_update(inst: TrackedInstance, det: Optional[Detection],
                     cfg: AssocConfig, rng: np.random.Generator
                     ) -> tuple[bool, np.ndarray, np.ndarray]:
    """Apply one update cycle after matching.

    On a match: visible pixels outside the box bump their outlier streak
    (inside resets it; invisible pixels freeze), pixels over the timeout are
    replaced by fresh samples inside the matched box, and the box/label/score
    refresh. Without a match the instance ages and is terminated after t_lost
    consecutive unmatched frames.

    Returns (alive, replenished coords (k, 2), replaced pixel indices (k,)).
    """
    none = np.zeros((0, 2))
    if det is None:
        inst.frames_since_matched += 1
        return inst.frames_since_matched < cfg.t_lost, none, np.zeros(0, np.int64)

    inside = _in_box(inst.pixels, det.box)
    bump = inst.visible & ~inside
    reset = inst.visible & inside
    inst.outlier_streak[bump] += 1
    inst.outlier_streak[reset] = 0

    stale = np.flatnonzero(inst.outlier_streak > cfg.outlier_timeout)
    x1, y1, x2, y2 = det.box
    fresh = np.stack([rng.uniform(x1, x2, stale.size),
                      rng.uniform(y1, y2, stale.size)], axis=1)
    if stale.size:
        inst.pixels[stale] = fresh
        inst.visible[stale] = True
        inst.outlier_streak[stale] = 0

    inst.box = det.box
    inst.label = det.label
    inst.score = det.score
    inst.frames_since_matched = 0
    return True, fresh, stale


# ---------------------------------------------------------------------------
# per-frame pipeline


class PointPredictor(Protocol):
    """Per-frame point tracking service for registered pixels."""

    def begin_frame(self, frame_index: int) -> None: ...

    def register(self, coords: np.ndarray) -> list[int]: ...

    def positions(self, handles: list[int]) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class TrackEvent:
    frame: int
    event: str            # spawn | match | prune | terminate
    instance: int
    payload: str

    def line(self) -> str:
        return f"{self.frame}\t{self.event}\t{self.instance}\t{self.payload}"


def _fmt_box(box) -> str:
    return ",".join(repr(float(v)) for v in box)


def track_objects(detections_per_frame: list[list[Detection]],
                  predictor: PointPredictor, cfg: AssocConfig
                  ) -> tuple[list[list[TrackedInstance]], list[TrackEvent]]:
    """Run the association pipeline over a detection stream.

    Frame indices follow the stream order (0-based). Returns per-frame live
    instance snapshots and the event log.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA550C]))
    instances: list[TrackedInstance] = []
    events: list[TrackEvent] = []
    snapshots: list[list[TrackedInstance]] = []
    next_id = 0

    for t, dets in enumerate(detections_per_frame):
        predictor.begin_frame(t)
        for det in dets:
            det.validate()

        # advance every live instance's pixels to this frame
        if t > 0:
            for inst in instances:
                pos, vis = predictor.positions(inst.pixel_handles)
                inst.pixels = pos
                inst.visible = vis

        survivors: list[TrackedInstance] = []
        if instances and dets:
            s = similarity_matrix(instances, dets, cfg.reweighted)
            s_agg = aggregate(s)
            pairs, un_i, un_j = match(s_agg, cfg.tau_match, cfg.matcher)
        else:
            pairs, un_i, un_j = [], list(range(len(instances))), list(range(len(dets)))

        det_of = {i: dets[j] for i, j in pairs}
        pair_of = {i: j for i, j in pairs}
        for i, inst in enumerate(instances):
            det = det_of.get(i)
            alive, fresh, stale = lifecycle_update(inst, det, cfg, rng)
            if det is not None:
                events.append(TrackEvent(t, "match", inst.id,
                                         f"det={pair_of[i]} box={_fmt_box(det.box)}"))
                if stale.size:
                    handles = predictor.register(fresh)
                    for k, h in zip(stale, handles):
                        inst.pixel_handles[k] = h
                    events.append(TrackEvent(
                        t, "prune", inst.id,
                        f"replaced={','.join(str(int(k)) for k in stale)}"))
            if alive:
                survivors.append(inst)
            else:
                events.append(TrackEvent(t, "terminate", inst.id,
                                         f"lost={inst.frames_since_matched}"))
        instances = survivors

        for j in un_j:
            det = dets[j]
            if det.score >= cfg.tau_spawn:
                inst = spawn(det, cfg.n_px, rng, instance_id=next_id)
                inst.pixel_handles = predictor.register(inst.pixels)
                instances.append(inst)
                events.append(TrackEvent(t, "spawn", next_id,
                                         f"box={_fmt_box(det.box)} "
                                         f"label={det.label} score={det.score!r}"))
                next_id += 1

        snapshots.append([_snapshot(inst) for inst in instances])
    return snapshots, events


def _snapshot(inst: TrackedInstance) -> TrackedInstance:
    return TrackedInstance(id=inst.id, box=inst.box, label=inst.label,
                           score=inst.score, pixels=inst.pixels.copy(),
                           visible=inst.visible.copy(),
                           outlier_streak=inst.outlier_streak.copy(),
                           frames_since_matched=inst.frames_since_matched,
                           pixel_handles=list(inst.pixel_handles))


# ---------------------------------------------------------------------------
# predictors


class ScriptedPredictor:
    """Test predictor: a pixel registered at position c on frame b sits at
    c + offset_fn(t, origins, births) on frame t; visibility likewise scripted."""

    def __init__(self, offset_fn, visible_fn=None):
        self._offset_fn = offset_fn
        self._visible_fn = visible_fn or \
            (lambda t, origins, births: np.ones(len(origins), bool))
        self._origins: list[np.ndarray] = []
        self._birth: list[int] = []
        self._t = 0

    def begin_frame(self, frame_index: int) -> None:
        self._t = frame_index

    def register(self, coords: np.ndarray) -> list[int]:
        handles = []
        for c in np.asarray(coords, dtype=np.float64):
            self._origins.append(c.copy())
            self._birth.append(self._t)
            handles.append(len(self._origins) - 1)
        return handles

    def positions(self, handles: list[int]) -> tuple[np.ndarray, np.ndarray]:
        origins = np.stack([self._origins[h] for h in handles])
        births = np.array([self._birth[h] for h in handles])
        pos = origins + self._offset_fn(self._t, origins, births)
        vis = self._visible_fn(self._t, origins, births)
        return pos, np.asarray(vis, dtype=bool)


class ReplayPredictor:
    """Replays a recorded predictor transcript (see record/replay format in
    the formats module): per frame, registered pixel positions/visibility."""

    def __init__(self, table: dict[int, tuple[np.ndarray, np.ndarray]],
                 registrations: dict[int, int]):
        # table: frame -> (positions (H, 2), visible (H,)) over all handles
        self._table = table
        self._registrations = registrations           # frame -> handles so far
        self._t = 0
        self._next = 0

    def begin_frame(self, frame_index: int) -> None:
        self._t = frame_index

    def register(self, coords: np.ndarray) -> list[int]:
        handles = list(range(self._next, self._next + len(coords)))
        self._next += len(coords)
        expected = self._registrations.get(self._t, 0)
        if self._next > expected:
            raise ValueError(f"replay mismatch: frame {self._t} registered more "
                             f"pixels than recorded ({self._next} > {expected})")
        return handles

    def positions(self, handles: list[int]) -> tuple[np.ndarray, np.ndarray]:
        pos, vis = self._table[self._t]
        idx = np.asarray(handles, dtype=np.int64)
        return pos[idx].copy(), vis[idx].copy()


class LbmPointPredictor:
    """In-process tracker adapter: each registration cohort becomes one query
    state initialized on the current frame and stepped on later frames."""

    def __init__(self, params, mcfg, frames: list[np.ndarray]):
        from . import tensor as T
        from .encoder import encode
        self._T = T
        self._encode = encode
        self._params = params
        self._mcfg = mcfg
        self._frames = frames
        self._fmap = None
        self._cohorts: list = []        # (state, first_frame)
        self._handle_map: list[tuple[int, int]] = []   # handle -> (cohort, row)
        self._latest: list[tuple[np.ndarray, np.ndarray]] = []  # per cohort
        self._t = -1

    def begin_frame(self, frame_index: int) -> None:
        from .tracker import step
        T = self._T
        self._t = frame_index
        with T.no_grad():
            self._fmap = self._encode(T.Tensor(self._frames[frame_index]),
                                      self._params.encoder, frame_index)
            for ci, (state, _) in enumerate(self._cohorts):
                out = step(state, self._fmap, self._params, self._mcfg)
                self._latest[ci] = (out.p_out.data.copy(), out.v > 0.5)

    def register(self, coords: np.ndarray) -> list[int]:
        from .tracker import init_queries
        T = self._T
        coords = np.asarray(coords, dtype=np.float64)
        with T.no_grad():
            state = init_queries(self._fmap, coords, n_s=self._mcfg.n_s)
        cohort = len(self._cohorts)
        self._cohorts.append((state, self._t))
        self._latest.append((coords.copy(), np.ones(len(coords), bool)))
        handles = []
        for row in range(len(coords)):
            self._handle_map.append((cohort, row))
            handles.append(len(self._handle_map) - 1)
        return handles

    def positions(self, handles: list[int]) -> tuple[np.ndarray, np.ndarray]:
        pos = np.zeros((len(handles), 2))
        vis = np.zeros(len(handles), dtype=bool)
        for k, h in enumerate(handles):
            ci, row = self._handle_map[h]
            p, v = self._latest[ci]
            pos[k] = p[row]
            vis[k] = v[row]
        return pos, vis
