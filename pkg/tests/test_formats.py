import os
import struct

import numpy as np
import pytest

from lbmtrack import formats as F
from lbmtrack import tensor as T
from lbmtrack.synth import SceneSpec, generate_clip
from lbmtrack.tracker import init_model
from lbmtrack.train import TrainConfig


def tiny_cfg():
    return TrainConfig(dim=16, enc_channels=4, layers=2, mlp_ratio=2, n_s=3)


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    cfg = tiny_cfg()
    params = init_model(np.random.default_rng(0), cfg.model_config())
    p1 = tmp_path / "a.lbmt"
    p2 = tmp_path / "b.lbmt"
    F.save_checkpoint(p1, params, cfg.canonical_text())
    loaded, loaded_cfg = F.load_model(p1)
    assert loaded_cfg.dim == 16
    F.save_checkpoint(p2, loaded, loaded_cfg.canonical_text())
    assert p1.read_bytes() == p2.read_bytes()
    for (n1, t1), (n2, t2) in zip(T.iter_named_tensors(params),
                                  T.iter_named_tensors(loaded)):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)


def test_checkpoint_unknown_version_rejected(tmp_path):
    cfg = tiny_cfg()
    params = init_model(np.random.default_rng(0), cfg.model_config())
    raw = bytearray(F.checkpoint_bytes(params, cfg.canonical_text()))
    raw[4:8] = struct.pack("<I", 99)
    path = tmp_path / "bad.lbmt"
    path.write_bytes(bytes(raw))
    with pytest.raises(F.FormatError, match="version"):
        F.load_checkpoint(path)


def test_checkpoint_truncation_and_magic_errors(tmp_path):
    cfg = tiny_cfg()
    params = init_model(np.random.default_rng(0), cfg.model_config())
    raw = F.checkpoint_bytes(params, cfg.canonical_text())
    path = tmp_path / "trunc.lbmt"
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(F.FormatError, match="truncated"):
        F.load_checkpoint(path)
    path2 = tmp_path / "junk.lbmt"
    path2.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(F.FormatError, match="magic"):
        F.load_checkpoint(path2)


def test_ppm_roundtrip_exact(tmp_path):
    clip = generate_clip(SceneSpec(seed=3, frames=2, n_points=4))
    path = tmp_path / "f.ppm"
    F.write_ppm(path, clip.frames[0])
    back = F.read_ppm(path)
    # frames are quantized to 8-bit levels, so the round trip is exact
    assert np.array_equal(back, clip.frames[0])


def test_ppm_malformed(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n2 2\n255\n....")
    with pytest.raises(F.FormatError, match="P6"):
        F.read_ppm(path)
    path.write_bytes(b"P6\n4 4\n255\nxx")
    with pytest.raises(F.FormatError, match="payload"):
        F.read_ppm(path)


def test_clip_roundtrip(tmp_path):
    clip = generate_clip(SceneSpec(seed=4, frames=3, n_points=6))
    d = tmp_path / "clip"
    F.write_clip(d, clip)
    back = F.read_clip(d)
    assert back.n_frames == 3
    for a, b in zip(back.frames, clip.frames):
        assert np.array_equal(a, b)
    assert np.array_equal(back.gt_p, clip.gt_p)
    assert np.array_equal(back.gt_v, clip.gt_v)
    assert back.query_frame == clip.query_frame


def test_gt_file_malformed_names_file_and_line(tmp_path):
    clip = generate_clip(SceneSpec(seed=5, frames=2, n_points=2))
    d = tmp_path / "clip"
    F.write_clip(d, clip)
    gt = d / "gt.txt"
    lines = gt.read_text().splitlines()
    lines[3] = "0 1 not-a-number 2.0 1"
    gt.write_text("\n".join(lines) + "\n")
    with pytest.raises(F.FormatError) as exc:
        F.read_clip(d)
    assert "gt.txt:4" in str(exc.value)


def test_trackfile_roundtrip_and_errors(tmp_path):
    rng = np.random.default_rng(6)
    pos = rng.uniform(0, 60, (3, 4, 2))
    vis = rng.uniform(0, 1, (3, 4))
    conf = rng.uniform(0, 1, (3, 4))
    qc = rng.uniform(0, 60, (4, 2))
    path = tmp_path / "track.txt"
    F.write_trackfile(path, (64, 48), 0, [0, 2, 5, 7], qc, pos, vis, conf,
                      first_frame=1)
    tf = F.read_trackfile(path)
    assert tf.resolution == (64, 48)
    assert tf.pool_indices.tolist() == [0, 2, 5, 7]
    assert np.array_equal(tf.positions, pos)
    assert np.array_equal(tf.visibility, vis)
    assert np.array_equal(tf.confidence, conf)
    assert tf.first_frame == 1

    bad = tmp_path / "bad.txt"
    bad.write_text("NOPE 1\n")
    with pytest.raises(F.FormatError, match="magic"):
        F.read_trackfile(bad)

    text = path.read_text().splitlines()
    text[5] = "f zero 0 1.0 2.0 0.5 0.5"
    bad2 = tmp_path / "bad2.txt"
    bad2.write_text("\n".join(text) + "\n")
    with pytest.raises((F.FormatError, ValueError)):
        F.read_trackfile(bad2)


def test_detections_parse_and_errors(tmp_path):
    path = tmp_path / "dets.txt"
    path.write_text("# header comment\n"
                    "0 1.0 2.0 11.0 12.0 3 0.9\n"
                    "1 5 5 25 25 3 0.8  # trailing comment\n")
    per_frame = F.read_detections(path, 3)
    assert len(per_frame[0]) == 1 and len(per_frame[1]) == 1 and per_frame[2] == []
    assert per_frame[0][0].label == 3

    path.write_text("0 1.0 2.0 11.0\n")
    with pytest.raises(F.FormatError) as exc:
        F.read_detections(path, 2)
    assert "dets.txt:1" in str(exc.value)

    path.write_text("9 1.0 2.0 11.0 12.0 3 0.9\n")
    with pytest.raises(F.FormatError, match="frame 9"):
        F.read_detections(path, 2)


def test_config_parse_and_train_config_roundtrip(tmp_path):
    cfg = TrainConfig(steps=7, peak_lr=3e-4, predict_every_layer=True)
    parsed = F.parse_config_text(cfg.canonical_text())
    back = TrainConfig.from_dict(parsed)
    assert back == cfg

    with pytest.raises(F.FormatError, match="key = value"):
        F.parse_config_text("this is not a config", "x.cfg")
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"bogus": "1"})


def test_transcript_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    table = {0: (rng.uniform(0, 10, (4, 2)), np.array([1, 1, 0, 1], bool)),
             1: (rng.uniform(0, 10, (4, 2)), np.array([1, 0, 0, 1], bool))}
    regs = {0: 4, 1: 4}
    path = tmp_path / "trans.txt"
    F.write_transcript(path, regs, table)
    regs2, table2 = F.read_transcript(path)
    assert regs2 == regs
    for t in table:
        assert np.array_equal(table2[t][0], table[t][0])
        assert np.array_equal(table2[t][1], table[t][1])


def test_atomic_write_leaves_no_temp(tmp_path):
    path = tmp_path / "out.txt"
    F.atomic_write_text(path, "hello\n")
    assert path.read_text() == "hello\n"
    assert not os.path.exists(str(path) + ".tmp")
