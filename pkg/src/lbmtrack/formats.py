"""On-disk formats: binary checkpoint, binary PPM frames, and line-delimited
structured text for ground truth, track files, detections, event logs,
predictor transcripts, and config files.

Every format is versioned and byte-stable: identical inputs always serialize
to identical bytes (floats are written with repr, which round-trips exactly).
All writes go through a temp-file-then-rename so readers never observe a
partial file. Byte-level layouts are documented in FORMATS.md.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .synth import Clip

CHECKPOINT_MAGIC = b"LBMT"
CHECKPOINT_VERSION = 1
TRACKFILE_MAGIC = "LBMP"
TRACKFILE_VERSION = 1
TRANSCRIPT_MAGIC = "LBMX"
TRANSCRIPT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, path, message, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# config files: "key = value" lines, '#' comments


def parse_config_text(text: str, path="<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(path, f"expected 'key = value', got {raw!r}", ln)
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip().strip("'\"")
    return out


def read_config(path) -> dict[str, str]:
    with open(path, "r") as fh:
        return parse_config_text(fh.read(), path)


# ---------------------------------------------------------------------------
# checkpoint: magic, version, config echo, named tensor table (f32 LE)


def checkpoint_bytes(params, config_text: str) -> bytes:
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = config_text.encode()
    buf += struct.pack("<I", len(cfg))
    buf += cfg
    tensors = list(T.iter_named_tensors(params))
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors:
        nb = name.encode()
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name}")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<BB", 0, t.ndim)            # dtype tag 0 = float32
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return bytes(buf)


def save_checkpoint(path, params, config_text: str) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, config_text))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(path, f"truncated while reading {what}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(path, "bad magic (not a checkpoint)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config_text = take(cfg_len, "config echo").decode()
    (n_tensors,) = struct.unpack("<I", take(4, "tensor count"))
    table: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode()
        tag, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if tag != 0:
            raise FormatError(path, f"unknown dtype tag {tag} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        numel = int(np.prod(dims)) if rank else 1
        raw = take(4 * numel, f"payload of {name}")
        table[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if off != len(data):
        raise FormatError(path, f"{len(data) - off} trailing bytes")
    return table, config_text


def load_model(path):
    """Rebuild (params, TrainConfig) from a checkpoint."""
    from .tracker import init_model
    from .train import TrainConfig
    table, config_text = load_checkpoint(path)
    cfg = TrainConfig.from_dict(parse_config_text(config_text, path))
    params = init_model(np.random.default_rng(cfg.seed), cfg.model_config())
    names = {name for name, _ in T.iter_named_tensors(params)}
    if names != set(table):
        missing = sorted(names - set(table))[:3]
        extra = sorted(set(table) - names)[:3]
        raise FormatError(path, f"tensor table mismatch (missing {missing}, "
                                f"unexpected {extra})")
    for name, t in T.iter_named_tensors(params):
        arr = table[name]
        if arr.shape != t.shape:
            raise FormatError(path, f"{name}: shape {arr.shape} vs {t.shape}")
        t.data = arr.astype(np.float32)
    return params, cfg


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def ppm_bytes(frame: np.ndarray) -> bytes:
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f"frame must be (3, H, W), got {frame.shape}")
    _, h, w = frame.shape
    levels = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode()
    return header + levels.transpose(1, 2, 0).tobytes()


def write_ppm(path, frame: np.ndarray) -> None:
    atomic_write_bytes(path, ppm_bytes(frame))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise FormatError(path, "not a binary PPM (P6)")
    # header: three whitespace-separated fields after the magic
    fields = []
    off = 2
    while len(fields) < 3:
        while off < len(data) and data[off:off + 1].isspace():
            off += 1
        if data[off:off + 1] == b"#":
            while off < len(data) and data[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(data) and not data[off:off + 1].isspace():
            off += 1
        if start == off:
            raise FormatError(path, "truncated PPM header")
        fields.append(data[start:off])
    off += 1                                            # single whitespace
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(path, f"bad PPM header fields {fields}")
    if maxval != 255:
        raise FormatError(path, f"unsupported maxval {maxval}")
    need = w * h * 3
    raw = data[off:off + need]
    if len(raw) != need:
        raise FormatError(path, f"pixel payload {len(raw)} bytes, need {need}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# clip directories


@dataclass
class LoadedClip:
    frames: list[np.ndarray]
    gt_p: np.ndarray
    gt_v: np.ndarray
    query_frame: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.frames[0].shape[1], self.frames[0].shape[2]


def write_clip(dirpath, clip: Clip) -> None:
    os.makedirs(os.path.join(dirpath, "frames"), exist_ok=True)
    h, w = clip.image_shape
    meta = (f"format = clip v1\nwidth = {w}\nheight = {h}\n"
            f"frames = {clip.n_frames}\npoints = {clip.n_points}\n"
            f"query_frame = {clip.query_frame}\nseed = {clip.spec.seed}\n")
    atomic_write_text(os.path.join(dirpath, "meta.txt"), meta)
    for t, frame in enumerate(clip.frames):
        write_ppm(os.path.join(dirpath, "frames", f"frame_{t:04d}.ppm"), frame)
    lines = [f"{TRACKFILE_MAGIC}GT {TRACKFILE_VERSION}"]
    for t in range(clip.n_frames):
        for i in range(clip.n_points):
            x, y = clip.gt_p[t, i]
            lines.append(f"{t} {i} {float(x)!r} {float(y)!r} {int(clip.gt_v[t, i])}")
    atomic_write_text(os.path.join(dirpath, "gt.txt"), "\n".join(lines) + "\n")
    write_trackfile(os.path.join(dirpath, "gt_track.txt"),
                    (w, h), clip.query_frame,
                    list(range(clip.n_points)),
                    clip.gt_p[clip.query_frame],
                    clip.gt_p[clip.query_frame + 1:],
                    clip.gt_v[clip.query_frame + 1:].astype(np.float64),
                    np.ones_like(clip.gt_v[clip.query_frame + 1:], dtype=np.float64),
                    first_frame=clip.query_frame + 1)


def read_clip(dirpath) -> LoadedClip:
    meta_path = os.path.join(dirpath, "meta.txt")
    meta = read_config(meta_path)
    for key in ("width", "height", "frames", "points", "query_frame"):
        if key not in meta:
            raise FormatError(meta_path, f"missing key {key!r}")
    n_frames = int(meta["frames"])
    n_points = int(meta["points"])
    frames = [read_ppm(os.path.join(dirpath, "frames", f"frame_{t:04d}.ppm"))
              for t in range(n_frames)]
    gt_p = np.zeros((n_frames, n_points, 2))
    gt_v = np.zeros((n_frames, n_points), dtype=bool)
    gt_path = os.path.join(dirpath, "gt.txt")
    with open(gt_path, "r") as fh:
        head = fh.readline().strip()
        if head != f"{TRACKFILE_MAGIC}GT {TRACKFILE_VERSION}":
            raise FormatError(gt_path, f"bad header {head!r}", 1)
        for ln, raw in enumerate(fh, start=2):
            parts = raw.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise FormatError(gt_path, f"expected 5 fields, got {len(parts)}", ln)
            try:
                t, i = int(parts[0]), int(parts[1])
                x, y, v = float(parts[2]), float(parts[3]), int(parts[4])
            except ValueError as e:
                raise FormatError(gt_path, str(e), ln)
            if not (0 <= t < n_frames and 0 <= i < n_points):
                raise FormatError(gt_path, f"indices ({t}, {i}) out of range", ln)
            gt_p[t, i] = (x, y)
            gt_v[t, i] = bool(v)
    return LoadedClip(frames=frames, gt_p=gt_p, gt_v=gt_v,
                      query_frame=int(meta["query_frame"]))


# ---------------------------------------------------------------------------
# track files


def write_trackfile(path, resolution, query_frame, pool_indices, query_coords,
                    positions, visibility, confidence, first_frame) -> None:
    """positions (F, N, 2), visibility/confidence (F, N) for frames
    first_frame .. first_frame + F - 1."""
    w, h = resolution
    n = len(pool_indices)
    lines = [f"{TRACKFILE_MAGIC} {TRACKFILE_VERSION}",
             f"resolution {w} {h}",
             f"queries {n} {query_frame}"]
    for i in range(n):
        x, y = query_coords[i]
        lines.append(f"q {i} {int(pool_indices[i])} {float(x)!r} {float(y)!r}")
    for fi in range(len(positions)):
        t = first_frame + fi
        for i in range(n):
            x, y = positions[fi, i]
            lines.append(f"f {t} {i} {float(x)!r} {float(y)!r} "
                         f"{float(visibility[fi, i])!r} {float(confidence[fi, i])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class TrackFile:
    resolution: tuple[int, int]
    query_frame: int
    pool_indices: np.ndarray
    query_coords: np.ndarray
    first_frame: int
    positions: np.ndarray       # (F, N, 2)
    visibility: np.ndarray      # (F, N)
    confidence: np.ndarray      # (F, N)


def read_trackfile(path) -> TrackFile:
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"{TRACKFILE_MAGIC} {TRACKFILE_VERSION}":
        raise FormatError(path, "bad magic/version header", 1)
    try:
        _, w, h = lines[1].split()
        _, n, qf = lines[2].split()
        w, h, n, qf = int(w), int(h), int(n), int(qf)
    except (IndexError, ValueError):
        raise FormatError(path, "bad resolution/queries header", 2)
    pool = np.zeros(n, dtype=np.int64)
    qc = np.zeros((n, 2))
    rows: dict[int, dict[int, tuple[float, float, float, float]]] = {}
    for ln, raw in enumerate(lines[3:], start=4):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "q":
            if len(parts) != 5:
                raise FormatError(path, "bad query record", ln)
            i = int(parts[1])
            pool[i] = int(parts[2])
            qc[i] = (float(parts[3]), float(parts[4]))
        elif parts[0] == "f":
            if len(parts) != 7:
                raise FormatError(path, "bad frame record", ln)
            t, i = int(parts[1]), int(parts[2])
            rows.setdefault(t, {})[i] = tuple(float(v) for v in parts[3:])
        else:
            raise FormatError(path, f"unknown record {parts[0]!r}", ln)
    frames = sorted(rows)
    if not frames:
        raise FormatError(path, "no frame records")
    if frames != list(range(frames[0], frames[0] + len(frames))):
        raise FormatError(path, "frame indices not contiguous/increasing")
    pos = np.zeros((len(frames), n, 2))
    vis = np.zeros((len(frames), n))
    conf = np.zeros((len(frames), n))
    for fi, t in enumerate(frames):
        if sorted(rows[t]) != list(range(n)):
            raise FormatError(path, f"frame {t}: query count != {n}")
        for i, (x, y, v, rho) in rows[t].items():
            pos[fi, i] = (x, y)
            vis[fi, i] = v
            conf[fi, i] = rho
    return TrackFile(resolution=(w, h), query_frame=qf, pool_indices=pool,
                     query_coords=qc, first_frame=frames[0], positions=pos,
                     visibility=vis, confidence=conf)


# ---------------------------------------------------------------------------
# detections and event logs


def read_detections(path, n_frames: int):
    """Lines: <frame> <x1> <y1> <x2> <y2> <label> <score>; '#' comments."""
    from .assoc import Detection
    per_frame: list[list[Detection]] = [[] for _ in range(n_frames)]
    with open(path, "r") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise FormatError(path, f"expected 7 fields, got {len(parts)}", ln)
            try:
                t = int(parts[0])
                x1, y1, x2, y2 = (float(v) for v in parts[1:5])
                label = int(parts[5])
                score = float(parts[6])
            except ValueError as e:
                raise FormatError(path, str(e), ln)
            if not 0 <= t < n_frames:
                raise FormatError(path, f"frame {t} outside [0, {n_frames})", ln)
            per_frame[t].append(Detection(box=(x1, y1, x2, y2), label=label,
                                          score=score))
    return per_frame


def write_events(path, events) -> None:
    atomic_write_text(path, "".join(e.line() + "\n" for e in events))


# ---------------------------------------------------------------------------
# predictor transcripts (record/replay for track-objects)


def write_transcript(path, registrations: dict[int, int],
                     table: dict[int, tuple[np.ndarray, np.ndarray]]) -> None:
    lines = [f"{TRANSCRIPT_MAGIC} {TRANSCRIPT_VERSION}"]
    for t in sorted(registrations):
        lines.append(f"reg {t} {registrations[t]}")
    for t in sorted(table):
        pos, vis = table[t]
        for h in range(len(pos)):
            lines.append(f"p {t} {h} {float(pos[h, 0])!r} {float(pos[h, 1])!r} "
                         f"{int(vis[h])}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_transcript(path):
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"{TRANSCRIPT_MAGIC} {TRANSCRIPT_VERSION}":
        raise FormatError(path, "bad magic/version header", 1)
    registrations: dict[int, int] = {}
    raw_rows: dict[int, dict[int, tuple[float, float, bool]]] = {}
    for ln, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "reg" and len(parts) == 3:
            registrations[int(parts[1])] = int(parts[2])
        elif parts[0] == "p" and len(parts) == 6:
            t, h = int(parts[1]), int(parts[2])
            raw_rows.setdefault(t, {})[h] = (float(parts[3]), float(parts[4]),
                                             bool(int(parts[5])))
        else:
            raise FormatError(path, f"bad record {raw!r}", ln)
    table: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for t, rows in raw_rows.items():
        n = max(rows) + 1
        pos = np.zeros((n, 2))
        vis = np.zeros(n, dtype=bool)
        for h, (x, y, v) in rows.items():
            pos[h] = (x, y)
            vis[h] = v
        table[t] = (pos, vis)
    return registrations, table


class RecordingPredictor:
    """Wraps a live predictor, capturing the exact positions/visibility it
    served so a later run can replay them from file."""

    def __init__(self, base):
        self._base = base
        self.registrations: dict[int, int] = {}
        self.table: dict[int, dict[int, tuple[float, float, bool]]] = {}
        self._count = 0
        self._t = 0

    def begin_frame(self, frame_index: int) -> None:
        self._t = frame_index
        self._base.begin_frame(frame_index)
        self.registrations[frame_index] = self._count

    def register(self, coords):
        handles = self._base.register(coords)
        self._count += len(handles)
        self.registrations[self._t] = self._count
        rows = self.table.setdefault(self._t, {})
        for h, c in zip(handles, np.asarray(coords, dtype=np.float64)):
            rows[h] = (float(c[0]), float(c[1]), True)
        return handles

    def positions(self, handles):
        pos, vis = self._base.positions(handles)
        rows = self.table.setdefault(self._t, {})
        for k, h in enumerate(handles):
            rows[h] = (float(pos[k, 0]), float(pos[k, 1]), bool(vis[k]))
        return pos, vis

    def dense_table(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for t, rows in self.table.items():
            n = max(rows) + 1 if rows else 0
            pos = np.zeros((n, 2))
            vis = np.zeros(n, dtype=bool)
            for h, (x, y, v) in rows.items():
                pos[h] = (x, y)
                vis[h] = v
            out[t] = (pos, vis)
        return out
