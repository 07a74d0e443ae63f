import numpy as np
import pytest

from stad.data import (
    Affine,
    ConfigError,
    DataConfig,
    KeyframeAnnotation,
    apply_affine_clip,
    class_histogram,
    extract_clip,
    generate_synthetic,
    load_ava_csv,
    load_dataset,
    random_affine,
    rasterize,
    sample_batches,
    save_dataset,
    write_ava_csv,
)

SMALL = DataConfig(num_videos=12, num_test_videos=4)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SMALL, seed=5)


def test_deterministic(small):
    again = generate_synthetic(SMALL, seed=5)
    for k in small.videos:
        assert np.array_equal(small.videos[k], again.videos[k])
    assert small.train.labeled == again.train.labeled


def test_long_tailed_histogram():
    ds = generate_synthetic(DataConfig(num_test_videos=0), seed=0)
    h = class_histogram(ds.train, 6)
    assert h.min() > 0 and h.max() >= 4 * h.min()


def test_unlabeled_clips_have_both_neighbours(small):
    fps = small.train.fps
    for c in small.train.unlabeled:
        assert c.left.frame_time < c.frame / fps < c.right.frame_time


def test_keyframe_spacing(small):
    k = SMALL.keyframe_interval
    for frames in small.train.keyframes().values():
        idx = [f for f, _ in frames]
        assert np.all(np.diff(idx) == k)


def test_labels_multi_hot(small):
    for c in small.train.labeled:
        assert np.all(c.annotation.labels.sum(axis=1) >= 1)
        assert np.all(c.annotation.labels.sum(axis=1) <= 3)


def test_rendered_boxes_match_annotations(small):
    H, W = SMALL.height, SMALL.width
    for name, scene in small.scenes.items():
        for a in scene.actors:
            for f in range(0, scene.frames, 4):
                box = a.boxes[f]
                assert 0 <= box[0] < box[2] <= W and 0 <= box[1] < box[3] <= H
                m = rasterize(box, H, W)
                ys, xs = np.nonzero(m)
                extracted = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
                assert np.abs(extracted - box).max() <= 1.0


def test_infeasible_config():
    with pytest.raises(ConfigError):
        generate_synthetic(DataConfig(large_size=(70.0, 80.0)), 0)


def test_extract_clip_padding():
    video = np.full((5, 4, 4), 255, dtype=np.uint8)
    clip = extract_clip(video, 0, 8)
    assert clip.shape == (8, 4, 4)
    assert np.all(clip[:4] == 0) and np.all(clip[4:] == 1.0)


def test_affine_identity_and_boxes():
    rng = np.random.default_rng(0)
    clip = rng.random((8, 64, 64)).astype(np.float32)
    assert apply_affine_clip(clip, Affine()) is clip
    aff = random_affine(rng, 64, 64)
    out = apply_affine_clip(clip, aff)
    assert out.shape == clip.shape
    b, keep = aff.apply([[10, 10, 30, 30]], 64, 64)
    assert b.shape == (1, 4) and np.all(b >= 0) and np.all(b <= 64)
    assert 1.0 <= aff.sx <= 1.25 + 1e-9


def test_sample_batches_ratio_and_burn_in(small):
    rng = np.random.default_rng(0)
    lab, unl = next(sample_batches(small.train, 1.0, 8, rng))
    assert len(lab) == 4 and len(unl) == 4
    lab, unl = next(sample_batches(small.train, 1.0, 8, rng, burn_in=True))
    assert len(lab) == 8 and unl == []


def test_epoch_coverage(small):
    n = len(small.train.labeled)
    stream = sample_batches(small.train, 1.0, 4, np.random.default_rng(1), burn_in=True)
    seen = []
    while len(seen) < n:
        seen += next(stream)[0]
    assert sorted(seen[:n]) == list(range(n))


def test_csv_round_trip(tmp_path, small):
    path = tmp_path / "a.csv"
    write_ava_csv(path, small.train, (64, 64))
    back = load_ava_csv(path, (64, 64), 6, SMALL.fps)
    assert back.labeled == small.train.labeled
    assert len(back.unlabeled) == len(small.train.unlabeled)


def test_csv_empty(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    idx = load_ava_csv(p)
    assert idx.labeled == [] and idx.unlabeled == []


def test_csv_multi_hot_merge(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("v1,1.0,0.25,0.25,0.5,0.5,2,7\nv1,1.0,0.25,0.25,0.5,0.5,5,7\n")
    idx = load_ava_csv(p, (64, 64), 6)
    ann = idx.labeled[0].annotation
    assert len(ann) == 1
    assert ann.labels[0].tolist() == [0, 1, 0, 0, 1, 0]
    assert ann.boxes[0].tolist() == [16, 16, 32, 32]


def test_csv_fixture(tmp_path):
    rows = [
        "vidA,0.5,0.0,0.0,0.25,0.5,1,0",
        "vidA,0.5,0.0,0.0,0.25,0.5,3,0",
        "vidA,0.5,0.5,0.5,1.0,1.0,2,1",
        "vidA,1.5,0.125,0.0,0.375,0.5,1,0",
        "vidA,1.5,0.5,0.5,1.0,1.0,2,1",
        "vidA,1.5,0.5,0.5,1.0,1.0,6,1",
        "vidB,0.5,0.25,0.25,0.75,0.75,4,3",
        "vidB,1.5,0.25,0.25,0.75,0.75,4,3",
        "vidB,1.5,0.25,0.25,0.75,0.75,5,3",
        "vidB,2.5,0.0,0.25,0.5,0.75,5,3",
    ]
    p = tmp_path / "f.csv"
    p.write_text("\n".join(rows) + "\n")
    idx = load_ava_csv(p, (64, 64), 6, fps=8)
    # hand-parsed expectation
    expect = [
        ("vidA", 4, [[0, 0, 16, 32], [32, 32, 64, 64]], [[1, 0, 1, 0, 0, 0], [0, 1, 0, 0, 0, 0]], [0, 1]),
        ("vidA", 12, [[8, 0, 24, 32], [32, 32, 64, 64]], [[1, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 1]], [0, 1]),
        ("vidB", 4, [[16, 16, 48, 48]], [[0, 0, 0, 1, 0, 0]], [3]),
        ("vidB", 12, [[16, 16, 48, 48]], [[0, 0, 0, 1, 1, 0]], [3]),
        ("vidB", 20, [[0, 16, 32, 48]], [[0, 0, 0, 0, 1, 0]], [3]),
    ]
    assert len(idx.labeled) == 5
    for clip, (video, frame, boxes, labels, ids) in zip(idx.labeled, expect):
        assert (clip.video, clip.frame) == (video, frame)
        assert clip.annotation.boxes.tolist() == boxes
        assert clip.annotation.labels.tolist() == labels
        assert clip.annotation.entity_ids.tolist() == ids
    # 7 frames between each consecutive keyframe pair: A 4..12, B 4..12, B 12..20
    assert len(idx.unlabeled) == 21


def test_csv_malformed_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("v,0.5,0,0,1,1,1,0\nv,0.5,0,0,1\n")
    with pytest.raises(ValueError, match="row 2"):
        load_ava_csv(p)


def test_csv_clamps_out_of_range(tmp_path, caplog):
    p = tmp_path / "c.csv"
    p.write_text("v,0.5,-0.1,0,1.2,1,1,0\n")
    idx = load_ava_csv(p, (64, 64), 6)
    assert idx.labeled[0].annotation.boxes[0].tolist() == [0, 0, 64, 64]
    assert "clamped" in caplog.text


def test_dataset_directory_round_trip(tmp_path, small):
    save_dataset(small, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.config == small.config and back.seed == 5
    for k, v in small.videos.items():
        assert np.array_equal(back.videos[k], v)
    assert back.train.labeled == small.train.labeled
    assert back.test.labeled == small.test.labeled


def test_annotation_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        KeyframeAnnotation(0.0, [[0, 0, 1, 1], [2, 2, 3, 3]], [[1], [1]], [4, 4])
