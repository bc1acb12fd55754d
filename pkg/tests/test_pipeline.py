import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cyclingnet.imaging import write_image
from cyclingnet.optical_flow import FlowField
from cyclingnet.pipeline import (FLOW_MAGIC, ClipManifest, DatasetError, FlowCache, FlowFormatError,
                                 FusedSample, ManifestError, augment, build_dataset, compute_clip_flows,
                                 corpus_stats, encode_label_runs, fuse_inputs, load_manifest,
                                 parse_label_runs, parse_manifest, read_flow, resize_frame, write_flow,
                                 write_manifest)


def make_clip(root, clip_id, frames, labels=None, split=None, value=None, size=(24, 32)):
    directory = root / clip_id
    directory.mkdir(parents=True, exist_ok=True)
    r = np.random.default_rng(len(clip_id) + frames)
    for t in range(frames):
        img = np.full(size + (3,), value, np.uint8) if value is not None else \
            r.integers(0, 256, size + (3,), dtype=np.uint8)
        write_image(directory / f"{t:06d}.png", img)
    labels = np.zeros(frames, int) if labels is None else labels
    return ClipManifest(clip_id, directory, frames, labels, split)


# manifests

def test_manifest_accepts_matching_labels(tmp_path):
    make_clip(tmp_path / "frames", "a", 10)
    (tmp_path / "m.txt").write_text("clip_id=a dir=frames/a frames=10 labels=0:6,1:4 split=train\n")
    (clip,) = load_manifest(tmp_path / "m.txt")
    assert clip.frame_count == 10 and clip.labels.tolist() == [0] * 6 + [1] * 4
    assert len(clip.frame_paths()) == 10


def test_manifest_rejects_label_mismatch(tmp_path):
    with pytest.raises(ManifestError, match="9 labels"):
        parse_manifest("clip_id=a dir=a frames=10 labels=0:9", tmp_path)


@pytest.mark.parametrize("line,message", [
    ("clip_id=a dir=a frames=2 labels=0:2 colour=red", "unknown field"),
    ("clip_id=a dir=a labels=0:2", "missing fields"),
    ("clip_id=a dir=a frames=2 labels=0:2 split=dev", "unknown split"),
    ("clip_id=a dir=a frames=2 labels=0-2", "bad label run"),
    ("clip_id=a dir=a frames=2 labels=2:2", "labels must be 0 or 1"),
    ("clip_id=a dir=a frames=two labels=0:2", "line 1"),
])
def test_manifest_rejections(tmp_path, line, message):
    with pytest.raises(ManifestError, match=message):
        parse_manifest(line, tmp_path)


def test_manifest_duplicate_and_comments(tmp_path):
    text = "# header\n\nclip_id=a dir=a frames=1 labels=0:1  # trailing\nclip_id=a dir=b frames=1 labels=0:1\n"
    with pytest.raises(ManifestError, match="duplicate"):
        parse_manifest(text, tmp_path)


def test_manifest_missing_frame_files(tmp_path):
    make_clip(tmp_path, "a", 3)
    (tmp_path / "m.txt").write_text("clip_id=a dir=a frames=5 labels=0:5\n")
    with pytest.raises(ManifestError, match=r"missing frame files for indices \[3, 4\]"):
        load_manifest(tmp_path / "m.txt")


def test_manifest_roundtrip(tmp_path):
    clips = [make_clip(tmp_path / "f", "a", 6, [0, 0, 1, 1, 0, 1], "val"),
             make_clip(tmp_path / "f", "b", 5, [1] * 5)]
    write_manifest(tmp_path / "m.txt", clips)
    back = load_manifest(tmp_path / "m.txt")
    assert [c.clip_id for c in back] == ["a", "b"]
    assert back[0].labels.tolist() == [0, 0, 1, 1, 0, 1] and back[0].split == "val"
    assert back[1].frame_directory == clips[1].frame_directory


@given(st.lists(st.integers(0, 1), max_size=60))
def test_label_run_encoding_roundtrip(labels):
    assert parse_label_runs(encode_label_runs(labels)).tolist() == labels


def test_corpus_positive_rate():
    text = "clip_id=a dir=a frames=74477 labels=0:65910,1:8567 fps=30\n"
    stats = corpus_stats(parse_manifest(text))
    assert stats["frames"] == 74477 and stats["flows"] == 74476
    assert round(stats["positive_rate"] * 100, 1) == 11.5


# frames and fusion

def test_resize_halves():
    out = resize_frame(np.zeros((480, 640, 3), np.uint8))
    assert out.shape == (240, 320, 3) and out.dtype == np.float32


def test_resize_constant():
    out = resize_frame(np.full((100, 77, 3), 51, np.uint8))
    np.testing.assert_allclose(out, 0.2, atol=1e-6)


def test_resize_identity(rng):
    img = rng.random((240, 320, 3)).astype(np.float32)
    np.testing.assert_allclose(resize_frame(img), img, atol=1e-6)


def test_resize_grey_to_three_channels():
    assert resize_frame(np.zeros((10, 10), np.uint8), 5, 5).shape == (5, 5, 3)


def test_fuse_constant_example():
    rgb = np.full((240, 320, 3), 0.8, np.float32)
    flows = [np.full((240, 320, 3), 0.4, np.float32)] * 4
    np.testing.assert_allclose(fuse_inputs(rgb, flows), 0.6, atol=1e-7)


def test_fuse_static_scene(rng):
    rgb = rng.random((6, 8, 3)).astype(np.float32)
    zero = np.zeros_like(rgb)
    np.testing.assert_array_equal(fuse_inputs(rgb, [zero] * 4), rgb / 2)


def test_fuse_all_ones():
    ones = np.ones((240, 320, 3), np.float32)
    np.testing.assert_array_equal(fuse_inputs(ones, [ones] * 4), ones)


@pytest.mark.parametrize("n", [0, 3, 5])
def test_fuse_needs_four_flows(n):
    with pytest.raises(ValueError):
        fuse_inputs(np.zeros((2, 2, 3)), [np.zeros((2, 2, 3))] * n)


unit = arrays(np.float32, (3, 4, 3), elements=st.floats(0, 1, width=32))


@settings(max_examples=50, deadline=None)
@given(unit, unit, unit, unit, unit)
def test_fuse_exact_and_in_range(rgb, f0, f1, f2, f3):
    fused = fuse_inputs(rgb, [f0, f1, f2, f3])
    ref = rgb.astype(np.float64) / 2 + (f0.astype(np.float64) + f1 + f2 + f3) / 8
    np.testing.assert_allclose(fused, ref, rtol=0, atol=2 * np.finfo(np.float32).eps)
    assert fused.dtype == np.float32
    assert fused.min() >= 0 and fused.max() <= 1


# augmentation

def sample(rng, shape=(240, 320, 3)):
    return FusedSample(rng.random(shape).astype(np.float32), 1, "c", 4)


def test_flip_twice_is_identity(rng):
    s = sample(rng)
    twice = augment(augment(s, ["horizontal_flip"]), ["horizontal_flip"])
    np.testing.assert_array_equal(twice.x, s.x)


def test_flip_maps_columns(rng):
    s = sample(rng)
    flipped = augment(s, ["horizontal_flip"]).x
    for j in (0, 5, 319):
        np.testing.assert_array_equal(flipped[:, 319 - j], s.x[:, j])


def test_unit_scale_is_identity(rng):
    s = sample(rng)
    np.testing.assert_allclose(augment(s, ["scale"], scale_factor=1.0).x, s.x, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_scale_keeps_shape_and_label(seed, rng):
    s = sample(rng, (24, 32, 3))
    out = augment(s, ["horizontal_flip", "scale"], seed=seed)
    assert out.x.shape == s.x.shape and out.label == s.label and out.frame_index == 4


def test_unknown_augmentation(rng):
    with pytest.raises(ValueError):
        augment(sample(rng, (4, 4, 3)), ["rotate"])


# flow files and cache

def test_flow_file_roundtrip(tmp_path, rng):
    flow = FlowField(rng.standard_normal((5, 7)).astype(np.float32),
                     rng.standard_normal((5, 7)).astype(np.float32))
    write_flow(tmp_path / "f.flo", flow)
    blob = (tmp_path / "f.flo").read_bytes()
    assert blob[:8] == FLOW_MAGIC and len(blob) == 16 + 5 * 7 * 8
    assert int.from_bytes(blob[8:12], "little") == 7 and int.from_bytes(blob[12:16], "little") == 5
    np.testing.assert_array_equal(read_flow(tmp_path / "f.flo").as_array(), flow.as_array())


def test_flow_file_corruption(tmp_path):
    write_flow(tmp_path / "f.flo", FlowField(np.zeros((2, 2)), np.zeros((2, 2))))
    blob = (tmp_path / "f.flo").read_bytes()
    (tmp_path / "bad.flo").write_bytes(b"XXXXXXXX" + blob[8:])
    (tmp_path / "short.flo").write_bytes(blob[:-4])
    for name in ("bad.flo", "short.flo"):
        with pytest.raises(FlowFormatError):
            read_flow(tmp_path / name)


def test_clip_gives_n_minus_one_flows_and_is_idempotent(tmp_path):
    clip = make_clip(tmp_path, "a", 6)
    cache = FlowCache(tmp_path / "cache", frame_size=(24, 32))
    assert compute_clip_flows(clip, cache) == 5
    files = sorted((cache.directory / "a").glob("*.flo"))
    assert [f.stem for f in files] == [f"{t:06d}" for t in range(1, 6)]
    before = {f: f.read_bytes() for f in files}
    assert compute_clip_flows(clip, cache) == 0
    assert {f: f.read_bytes() for f in files} == before


def test_cache_is_keyed_by_params_and_size(tmp_path):
    from cyclingnet.optical_flow import FlowParams
    a = FlowCache(tmp_path, FlowParams(), (24, 32)).path("c", 1)
    b = FlowCache(tmp_path, FlowParams(window_size=9), (24, 32)).path("c", 1)
    c = FlowCache(tmp_path, FlowParams(), (48, 64)).path("c", 1)
    assert len({a, b, c}) == 3


# dataset

@pytest.mark.parametrize("frames,usable", [(10, 6), (4, 0), (5, 1), (0, 0)])
def test_usable_indices(frames, usable):
    clip = ClipManifest("c", None, frames, [0] * frames)
    assert len(clip.usable_indices()) == usable
    assert all(i >= 4 for i in clip.usable_indices())


def test_dataset_truncation_and_disjoint_splits(corpus):
    ds = build_dataset(corpus["clips"], corpus["cache"], batch_size=5, seed=0)
    keys = ds.split.train + ds.split.val + ds.split.test
    assert len(keys) == len(set(keys))
    assert all(i >= 4 for _, i in keys)
    assert len(ds.split.train) == 32 and len(ds.split.val) == 8
    for clip in corpus["clips"]:
        assert sum(c == clip.clip_id for c, _ in keys) == max(0, clip.frame_count - 4)


def test_batches_shapes_and_determinism(corpus):
    ds = build_dataset(corpus["clips"], corpus["cache"], batch_size=5, seed=3,
                       augment_ops=("horizontal_flip", "scale"))
    first = list(ds.batches("train", epoch=1))
    again = list(ds.batches("train", epoch=1))
    other = list(ds.batches("train", epoch=2))
    assert [len(y) for _, y, _ in first] == [5] * 6 + [2]
    x, y, _ = first[0]
    assert x.shape == (5, 24, 32, 3) and x.dtype == np.float32 and y.dtype == np.float32
    for (xa, _, ka), (xb, _, kb) in zip(first, again):
        np.testing.assert_array_equal(xa, xb)
        assert ka == kb
    assert [k for b in first for k in b[2]] != [k for b in other for k in b[2]]
    val = [k for b in ds.batches("val") for k in b[2]]
    assert val == ds.split.val


def test_labels_follow_manifest(corpus):
    ds = build_dataset(corpus["clips"], corpus["cache"])
    clips = {c.clip_id: c for c in corpus["clips"]}
    for x, y, keys in ds.batches("val"):
        assert y.tolist() == [clips[c].labels[i] for c, i in keys]


def test_missing_flow_names_clip_and_index(tmp_path):
    clip = make_clip(tmp_path, "lonely", 6)
    with pytest.raises(DatasetError, match=r"'lonely' frame 4.*`flow` command"):
        build_dataset([clip], FlowCache(tmp_path / "empty", frame_size=(24, 32)))


def test_random_split_policy_keeps_clips_whole(corpus):
    ds = build_dataset(corpus["clips"], corpus["cache"], split_policy="random", seed=1,
                       val_fraction=0.25, test_fraction=0.25)
    owners = {}
    for name in ("train", "val", "test"):
        for clip_id, _ in ds.split[name]:
            assert owners.setdefault(clip_id, name) == name
    assert {"train", "val", "test"} == set(owners.values())


def test_held_out_events_stay_in_test():
    # 81 one-frame events spread over test clips; training clips are all-safe
    lines = []
    for k in range(9):
        labels = "0:4," + ",".join(["1:1,0:1"] * 9)
        lines.append(f"clip_id=t{k} dir=t frames=22 labels={labels} split=test")
    lines += [f"clip_id=r{k} dir=r frames=22 labels=0:22 split=train" for k in range(5)]
    clips = parse_manifest("\n".join(lines))
    test_clips = [c for c in clips if c.split == "test"]
    train_clips = [c for c in clips if c.split == "train"]
    assert corpus_stats(test_clips)["events"] == 81
    assert corpus_stats(train_clips)["events"] == 0
