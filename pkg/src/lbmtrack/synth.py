"""Deterministic synthetic video clips with exact point tracks and visibility.

Scenes are textured polygons ("sprites") moving with constant velocity over a
drifting textured background, optionally deforming through a radial sinusoid
and occluded by nearer opaque shapes. Query points live on sprite surfaces and
are advected in closed form with the sprite's rigid + deformation motion, so
ground truth is exact by construction: a point is invisible exactly when a
nearer shape covers it or it leaves the frame.

Rendering and visibility share the same shape geometry but visibility is
computed analytically per point (not from rasterized pixels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class ShapeParams:
    """A polygonal shape in radial form: vertex k sits at angle angles[k] and
    radius radii[k] * (1 + amp * sin(freq * t + phase + mode * angles[k]))."""
    center: np.ndarray            # (2,) position at t = 0
    velocity: np.ndarray          # (2,) px / frame
    angles: np.ndarray            # (V,) sorted in [0, 2pi)
    radii: np.ndarray             # (V,)
    amp: float = 0.0
    freq: float = 0.0
    phase: float = 0.0
    mode: int = 1
    depth: float = 0.0            # smaller = nearer to the camera
    texture: np.ndarray = field(default_factory=lambda: np.ones((3, 2, 2)) * 0.5)

    def center_at(self, t: int) -> np.ndarray:
        return self.center + self.velocity * t

    def radial_scale(self, theta, t: int):
        return 1.0 + self.amp * np.sin(self.freq * t + self.phase + self.mode * theta)

    def vertices_at(self, t: int) -> np.ndarray:
        r = self.radii * self.radial_scale(self.angles, t)
        c = self.center_at(t)
        return np.stack([c[0] + r * np.cos(self.angles),
                         c[1] + r * np.sin(self.angles)], axis=1)


@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 64
    height: int = 48
    frames: int = 12
    sprites: int = 3
    occluders: int = 1
    n_points: int = 24
    max_speed: float = 3.0
    deform_amp: float = 0.12
    deform_freq: float = 0.7
    bg_drift: float = 1.0
    sprite_kind: str = "polygon"          # "polygon" | "blob"
    scripted_sprites: Optional[list[ShapeParams]] = None
    scripted_occluders: Optional[list[ShapeParams]] = None
    scripted_points: Optional[list[tuple[int, float, float]]] = None  # (sprite, r, theta)

    def validate(self) -> None:
        if self.width % 16 or self.height % 16:
            raise ValueError("resolution must be divisible by 16")
        if self.frames < 2:
            raise ValueError("need at least 2 frames")
        n_sprites = len(self.scripted_sprites) if self.scripted_sprites is not None \
            else self.sprites
        if self.n_points > 0 and n_sprites == 0:
            raise ValueError("cannot place query points in a sprite-less scene")


@dataclass
class Clip:
    frames: list[np.ndarray]              # T arrays (3, H, W) float32 in [0, 1]
    gt_p: np.ndarray                      # (T, N, 2) image pixels
    gt_v: np.ndarray                      # (T, N) bool
    query_frame: int                      # all queries issued at this frame (0)
    spec: SceneSpec
    sprites: list[ShapeParams]
    occluders: list[ShapeParams]
    point_sprite: np.ndarray              # (N,) sprite index per point
    point_local: np.ndarray               # (N, 2) local (radius, angle) per point

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_points(self) -> int:
        return self.gt_p.shape[1]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.frames[0].shape[1], self.frames[0].shape[2]


# ---------------------------------------------------------------------------
# geometry


def points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd (crossing number) point-in-polygon test, vectorized over points."""
    inside = np.zeros(px.shape, dtype=bool)
    v = len(verts)
    for k in range(v):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % v]
        straddles = (y1 > py) != (y2 > py)
        dy = y2 - y1
        # the guarded divisor is never used where dy == 0 (straddles is False)
        xcross = (x2 - x1) * (py - y1) / (dy if dy != 0 else 1.0) + x1
        inside ^= straddles & (px < xcross)
    return inside


def point_in_polygon(x: float, y: float, verts: np.ndarray) -> bool:
    return bool(points_in_polygon(np.asarray([x]), np.asarray([y]), verts)[0])


def _interp_radius(shape: ShapeParams, theta: float) -> float:
    """Base radius of the polygon's radial function at an arbitrary angle."""
    ang = shape.angles
    rad = shape.radii
    th = theta % (2 * math.pi)
    k = int(np.searchsorted(ang, th)) % len(ang)
    a0, a1 = ang[k - 1], ang[k]
    r0, r1 = rad[k - 1], rad[k]
    span = (a1 - a0) % (2 * math.pi)
    frac = ((th - a0) % (2 * math.pi)) / span if span > 0 else 0.0
    return float(r0 * (1 - frac) + r1 * frac)


def point_position(shape: ShapeParams, r: float, theta: float, t: int) -> np.ndarray:
    """Closed-form advection of a surface point given in local polar coords."""
    c = shape.center_at(t)
    s = shape.radial_scale(theta, t)
    return np.array([c[0] + r * s * math.cos(theta),
                     c[1] + r * s * math.sin(theta)])


def point_visible(clip_shapes: list[ShapeParams], sprite_idx: int,
                  pos: np.ndarray, t: int, width: int, height: int) -> bool:
    """In frame and not covered by any shape nearer than the point's sprite."""
    x, y = float(pos[0]), float(pos[1])
    if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
        return False
    own_depth = clip_shapes[sprite_idx].depth
    for j, shape in enumerate(clip_shapes):
        if j == sprite_idx or shape.depth >= own_depth:
            continue
        if point_in_polygon(x, y, shape.vertices_at(t)):
            return False
    return True


# ---------------------------------------------------------------------------
# texturing


def _noise_texture(rng: np.random.Generator, grid: int) -> np.ndarray:
    return rng.random((3, grid, grid))


def _sample_texture(tex: np.ndarray, u: np.ndarray, v: np.ndarray,
                    wrap: bool) -> np.ndarray:
    """Bilinear lookup of a (3, g, g) grid at u, v in [0, 1] (wrapped or clamped)."""
    g = tex.shape[1]
    if wrap:
        fu = (u % 1.0) * g
        fv = (v % 1.0) * g
        u0 = np.floor(fu).astype(int) % g
        v0 = np.floor(fv).astype(int) % g
        u1 = (u0 + 1) % g
        v1 = (v0 + 1) % g
        tu = fu - np.floor(fu)
        tv = fv - np.floor(fv)
    else:
        fu = np.clip(u, 0, 1) * (g - 1)
        fv = np.clip(v, 0, 1) * (g - 1)
        u0 = np.floor(fu).astype(int)
        v0 = np.floor(fv).astype(int)
        u1 = np.minimum(u0 + 1, g - 1)
        v1 = np.minimum(v0 + 1, g - 1)
        tu = fu - u0
        tv = fv - v0
    out = (tex[:, v0, u0] * (1 - tu) * (1 - tv) + tex[:, v0, u1] * tu * (1 - tv)
           + tex[:, v1, u0] * (1 - tu) * tv + tex[:, v1, u1] * tu * tv)
    return out


# ---------------------------------------------------------------------------
# scene construction


def _random_shape(rng: np.random.Generator, spec: SceneSpec, depth: float,
                  occluder: bool) -> ShapeParams:
    w, h = spec.width, spec.height
    margin = 8.0
    center = np.array([rng.uniform(margin, w - margin),
                       rng.uniform(margin, h - margin)])
    r_base = rng.uniform(5.0, min(w, h) / 4.0)
    if occluder:
        nv = int(rng.integers(4, 7))
        amp = 0.0
        tex = np.clip(_noise_texture(rng, 3) * 0.25, 0, 1)   # dark, solid-ish
    elif spec.sprite_kind == "blob":
        nv = 18
        amp = spec.deform_amp
        tex = _noise_texture(rng, 4)
    else:
        nv = int(rng.integers(5, 9))
        amp = spec.deform_amp
        tex = _noise_texture(rng, 4)
    angles = np.sort(rng.uniform(0, 2 * math.pi, nv))
    # enforce a minimum angular gap so radial interpolation stays sane
    angles = (angles + np.linspace(0, 2 * math.pi, nv, endpoint=False)) / 2.0
    angles = np.sort(angles % (2 * math.pi))
    radii = r_base * rng.uniform(0.75, 1.25, nv)
    # velocity budget leaves room for the deformation motion (motion bound)
    freq = spec.deform_freq
    deform_reach = radii.max() * amp * freq
    budget = max(0.3, spec.max_speed - deform_reach)
    velocity = rng.uniform(-budget, budget, 2)
    return ShapeParams(center=center, velocity=velocity, angles=angles,
                       radii=radii, amp=amp, freq=freq,
                       phase=rng.uniform(0, 2 * math.pi),
                       mode=int(rng.integers(1, 3)), depth=depth, texture=tex)


def _render_frame(spec: SceneSpec, shapes: list[ShapeParams],
                  bg_tex: np.ndarray, bg_vel: np.ndarray, t: int) -> np.ndarray:
    w, h = spec.width, spec.height
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    u = (gx + bg_vel[0] * t) / w
    v = (gy + bg_vel[1] * t) / h
    frame = _sample_texture(bg_tex, u, v, wrap=True)
    for shape in sorted(shapes, key=lambda s: -s.depth):     # far to near
        verts = shape.vertices_at(t)
        x0 = max(0, int(np.floor(verts[:, 0].min())))
        x1 = min(w, int(np.ceil(verts[:, 0].max())) + 1)
        y0 = max(0, int(np.floor(verts[:, 1].min())))
        y1 = min(h, int(np.ceil(verts[:, 1].max())) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        sub_x, sub_y = gx[y0:y1, x0:x1], gy[y0:y1, x0:x1]
        mask = points_in_polygon(sub_x, sub_y, verts)
        if not mask.any():
            continue
        c = shape.center_at(t)
        span = 2.0 * shape.radii.max() * (1 + abs(shape.amp))
        tu = 0.5 + (sub_x - c[0]) / span
        tv = 0.5 + (sub_y - c[1]) / span
        color = _sample_texture(shape.texture, tu, tv, wrap=False)
        region = frame[:, y0:y1, x0:x1]
        frame[:, y0:y1, x0:x1] = np.where(mask[None], color, region)
    # quantize to 8-bit levels so frames round-trip the on-disk format exactly
    levels = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    return levels.astype(np.float32) / np.float32(255.0)


def generate_clip(spec: SceneSpec) -> Clip:
    """Render a clip and compute exact tracks/visibility for its query pool."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))

    if spec.scripted_sprites is not None:
        sprites = list(spec.scripted_sprites)
    else:
        sprites = [_random_shape(rng, spec, depth=float(i + 1), occluder=False)
                   for i in range(spec.sprites)]
    if spec.scripted_occluders is not None:
        occluders = list(spec.scripted_occluders)
    else:
        occluders = [_random_shape(rng, spec, depth=float(-(j + 1)), occluder=True)
                     for j in range(spec.occluders)]
    shapes = sprites + occluders

    bg_tex = _noise_texture(rng, 6)
    drift = rng.uniform(-spec.bg_drift, spec.bg_drift, 2) \
        if spec.scripted_sprites is None else np.zeros(2)

    # query pool on sprite surfaces, visible at the query frame
    n = spec.n_points
    point_sprite = np.zeros(n, dtype=np.int64)
    point_local = np.zeros((n, 2))
    if spec.scripted_points is not None:
        if len(spec.scripted_points) != n:
            raise ValueError("scripted point count != n_points")
        for i, (si, r, th) in enumerate(spec.scripted_points):
            point_sprite[i] = si
            point_local[i] = (r, th)
    else:
        for i in range(n):
            placed = False
            # prefer round-robin assignment; fall back to any sprite that can
            # host a visible point (one may be fully occluded at frame 1)
            for attempt_sprite in range(len(sprites)):
                si = (i + attempt_sprite) % len(sprites)
                sp = sprites[si]
                for _ in range(64):
                    theta = rng.uniform(0, 2 * math.pi)
                    r = math.sqrt(rng.uniform(0, 1)) * 0.85 * _interp_radius(sp, theta)
                    pos = point_position(sp, r, theta, 0)
                    if point_in_polygon(pos[0], pos[1], sp.vertices_at(0)) and \
                            point_visible(shapes, si, pos, 0, spec.width, spec.height):
                        placed = True
                        break
                if placed:
                    break
            if not placed:
                raise ValueError("no sprite can host a visible query point")
            point_sprite[i] = si
            point_local[i] = (r, theta)

    t_frames = spec.frames
    gt_p = np.zeros((t_frames, n, 2))
    gt_v = np.zeros((t_frames, n), dtype=bool)
    # per-point sprite parameters, for vectorized advection
    cx = np.array([sprites[s].center[0] for s in point_sprite])
    cy = np.array([sprites[s].center[1] for s in point_sprite])
    vx = np.array([sprites[s].velocity[0] for s in point_sprite])
    vy = np.array([sprites[s].velocity[1] for s in point_sprite])
    amp = np.array([sprites[s].amp for s in point_sprite])
    freq = np.array([sprites[s].freq for s in point_sprite])
    phase = np.array([sprites[s].phase for s in point_sprite])
    mode = np.array([sprites[s].mode for s in point_sprite])
    depths = np.array([sprites[s].depth for s in point_sprite])
    r0 = point_local[:, 0]
    th0 = point_local[:, 1]
    cth = np.cos(th0)
    sth = np.sin(th0)
    for t in range(t_frames):
        s = 1.0 + amp * np.sin(freq * t + phase + mode * th0)
        px = (cx + vx * t) + r0 * s * cth
        py = (cy + vy * t) + r0 * s * sth
        gt_p[t, :, 0] = px
        gt_p[t, :, 1] = py
        vis = (px >= 0) & (px <= spec.width - 1) & (py >= 0) & (py <= spec.height - 1)
        for j, shape in enumerate(shapes):
            own = (j < len(sprites)) & (point_sprite == j)
            covered_candidates = vis & (shape.depth < depths) & ~own
            if covered_candidates.any():
                sel = np.flatnonzero(covered_candidates)
                inside = points_in_polygon(px[sel], py[sel], shape.vertices_at(t))
                vis[sel[inside]] = False
        gt_v[t] = vis

    frames = [_render_frame(spec, shapes, bg_tex, drift, t) for t in range(t_frames)]
    return Clip(frames=frames, gt_p=gt_p, gt_v=gt_v, query_frame=0, spec=spec,
                sprites=sprites, occluders=occluders,
                point_sprite=point_sprite, point_local=point_local)


def sample_queries(clip: Clip, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly choose n pool points visible at the query frame.

    Returns (coords (n, 2) at the query frame, pool indices (n,)).
    """
    pool = np.flatnonzero(clip.gt_v[clip.query_frame])
    if n > pool.size:
        raise ValueError(f"requested {n} queries from a pool of {pool.size}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen = np.sort(rng.choice(pool, size=n, replace=False))
    return clip.gt_p[clip.query_frame, chosen].copy(), chosen
