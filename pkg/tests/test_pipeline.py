import io
import json

import numpy as np
import pytest

from l2s.checks import benchmark_arithmetic, exhaustive_inertia, grouping_frequencies, split_leak_detection
from l2s.errors import IoError, MissingMetadata, MissingScore, NoSubject, SplitLeak, TooFewPoints, ValidationError
from l2s.layout import BoundingBox
from l2s.numerics import RngStream
from l2s.pipeline import PipelineSettings, run_pipeline
from l2s.pipeline.detect import FEATURE_DIM, detect_subject_stub, extract_features
from l2s.pipeline.grouping import annotate_stub, group_frames, sequence_probs, split_global_caption
from l2s.pipeline.kmeans import cluster_windows, kmeans, window_k
from l2s.pipeline.manifest import (FrameRef, ManifestRules, SequenceEntry, build_manifest, load_stories,
                                   read_manifest, save_stories, write_manifest)
from l2s.pipeline.records import (FrameRecord, filter_records, read_latent, read_records, validate_spacing,
                                  write_latent, write_records)
from l2s.pipeline.service import ServiceClient, handle, serve
from l2s.pipeline.synthetic import SyntheticConfig, VideoConfig, gen_synthetic_stories, gen_synthetic_videos


# records

def test_latent_roundtrip_and_corruption(tmp_path):
    x = np.random.default_rng(0).normal(size=(3, 5, 4)).astype(np.float32)
    write_latent(tmp_path / "a.l2sa", x)
    assert np.array_equal(read_latent(tmp_path / "a.l2sa"), x)
    (tmp_path / "b.l2sa").write_bytes((tmp_path / "a.l2sa").read_bytes()[:-4])
    with pytest.raises(IoError):
        read_latent(tmp_path / "b.l2sa")
    with pytest.raises(IoError):
        read_latent(tmp_path / "missing.l2sa")


def test_records_roundtrip(tmp_path):
    recs = gen_synthetic_videos(VideoConfig(n_videos=2, frames_per_video=12, shots_per_video=2), seed=1)
    write_records(tmp_path / "r.jsonl", recs)
    back = read_records(tmp_path / "r.jsonl")
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert (a.video_id, a.frame_index, a.timestamp_s, a.nsfw) == (b.video_id, b.frame_index, b.timestamp_s, b.nsfw)
        assert np.array_equal(np.asarray(a.latent, np.float32), b.latent)


def test_spacing_and_filtering():
    recs = [FrameRecord("v", i, 4.0 * i, aesthetic_score=s, nsfw=n)
            for i, (s, n) in enumerate([(5.0, False), (3.9, False), (6.0, True), (4.0, False)])]
    validate_spacing(recs)
    assert [r.frame_index for r in filter_records(recs, 4.0)] == [0, 3]
    with pytest.raises(ValidationError):
        validate_spacing([FrameRecord("v", 0, 0.0), FrameRecord("v", 1, 3.0)])
    with pytest.raises(MissingScore):
        filter_records([FrameRecord("v", 0, 0.0, aesthetic_score=5.0)], 4.0)
    with pytest.raises(ValidationError):
        FrameRecord("v", 0, -1.0)


# grouping

def test_grouping_frequencies():
    ok, detail = grouping_frequencies()
    assert ok, detail


def test_grouping_covers_members_in_order():
    rng = RngStream(0, "g")
    for n in range(0, 40):
        groups = group_frames(list(range(n)), rng.child(n))
        flat = [x for g in groups for x in g]
        assert flat == list(range(len(flat)))
        assert all(len(g) in (4, 5, 6) for g in groups)
        assert n - len(flat) < 4


def test_sequence_probs_frames_reading():
    p = sequence_probs({4: 0.5, 5: 0.3, 6: 0.2}, "frames")
    raw = {4: 0.5 / 4, 5: 0.3 / 5, 6: 0.2 / 6}
    assert all(abs(p[k] - raw[k] / sum(raw.values())) < 1e-12 for k in raw)
    with pytest.raises(ValueError):
        sequence_probs({4: 0.5})
    with pytest.raises(ValueError):
        sequence_probs({4: 1.0}, "bogus")


def test_annotate_stub():
    metas = [{"color": "red", "size": "small", "box": [0, 0, 0.3, 0.3], "motion": "moving right"},
             {"color": "red", "size": "small", "box": [0.6, 0.6, 0.9, 0.9], "motion": "moving right"}]
    caps = annotate_stub(metas)
    assert split_global_caption(caps["global_caption"]) == ("a small red blob", "moving right across the scene")
    assert caps["subject_captions"] == ["small red blob in the top-left", "small red blob in the bottom-right"]
    with pytest.raises(MissingMetadata):
        annotate_stub([{"color": "red"}])
    with pytest.raises(MissingMetadata):
        annotate_stub([])


# k-means

def test_kmeans_matches_exhaustive_optimum():
    g = np.random.default_rng(0)
    for i in range(60):
        n = int(g.integers(1, 9))
        k = int(g.integers(1, min(3, n) + 1))
        x = g.normal(size=(n, 2))
        assert abs(kmeans(x, k, seed=i).inertia - exhaustive_inertia(x, k)) <= 1e-9


def test_kmeans_separated_clusters_and_errors():
    g = np.random.default_rng(1)
    x = np.concatenate([g.normal(size=(20, 3)) * 0.1 + c for c in (0.0, 5.0, -5.0)])
    res = kmeans(x, 3)
    labels = res.assignments
    assert len({tuple(np.unique(labels[i * 20:(i + 1) * 20])) for i in range(3)}) == 3
    assert all(len(np.unique(labels[i * 20:(i + 1) * 20])) == 1 for i in range(3))
    with pytest.raises(TooFewPoints):
        kmeans(x[:2], 3)
    with pytest.raises(ValueError):
        kmeans(np.array([[np.nan, 0.0]]), 1)


def test_window_sizes():
    assert window_k(150) == 12 and window_k(149) == 6 and window_k(4) == 4
    x = np.random.default_rng(2).normal(size=(320, 2))
    wins = cluster_windows(x)
    assert [(w.start, w.stop, r.k) for w, r in wins] == [(0, 150, 12), (150, 300, 12), (300, 320, 6)]


# detector and features

def test_detector_on_rendered_blob():
    story = gen_synthetic_stories(1, SyntheticConfig(), seed=5)[0]
    truth = story.boxes[0]
    got = detect_subject_stub(story.frames[0])
    assert abs(got.x0 - truth.x0) <= 1 / 16 + 1e-9 and abs(got.x1 - truth.x1) <= 1 / 16 + 1e-9
    assert abs(got.y0 - truth.y0) <= 1 / 16 + 1e-9 and abs(got.y1 - truth.y1) <= 1 / 16 + 1e-9
    with pytest.raises(NoSubject):
        detect_subject_stub(np.zeros((4, 4, 4)))


def test_detector_picks_largest_component_first_on_ties():
    lat = np.zeros((6, 6, 4))
    lat[0, 0, 0] = 1.0
    lat[3:5, 3:5, 0] = 1.0
    assert detect_subject_stub(lat).to_list() == [0.5, 0.5, 5 / 6, 5 / 6]
    lat = np.zeros((6, 6, 4))
    lat[4, 4, 0] = lat[1, 2, 0] = 1.0
    assert detect_subject_stub(lat).to_list() == [2 / 6, 1 / 6, 3 / 6, 2 / 6]


def test_features_deterministic_and_box_dependent():
    lat = np.random.default_rng(3).normal(size=(16, 16, 4))
    a = extract_features(lat, BoundingBox(0, 0, 0.5, 0.5))
    assert a.shape == (FEATURE_DIM,)
    assert np.array_equal(a, extract_features(lat, BoundingBox(0, 0, 0.5, 0.5)))
    assert not np.allclose(a, extract_features(lat, BoundingBox(0.5, 0.5, 1, 1)))


# manifests

def entry(seq, video, cat, length, start=0):
    frames = [FrameRef(video, start + j, BoundingBox(0.1, 0.1, 0.5, 0.5), "a blob") for j in range(length)]
    return SequenceEntry(seq, video, cat, f"{video}/c0", "a blob | moving", frames)


def test_benchmark_arithmetic_and_split_leaks():
    for fn in (benchmark_arithmetic, split_leak_detection):
        ok, detail = fn()
        assert ok, detail


def test_manifest_rules():
    with pytest.raises(ValidationError):
        build_manifest([entry("a", "v", "c", 3)], "train")
    bad = entry("a", "v", "c", 4)
    bad.frames[2].frame_index = 0
    with pytest.raises(ValidationError):
        build_manifest([bad], "train")
    with pytest.raises(ValidationError):
        build_manifest([], "valid")
    with pytest.raises(SplitLeak) as exc:
        build_manifest([entry("a", "v1", "c", 4)], "bench", ManifestRules(exclude_video_ids=frozenset({"v1"})))
    assert exc.value.video_ids == ["v1"]
    capped = build_manifest([entry(f"s{i}", f"v{i}", "same", 4) for i in range(10)], "bench")
    assert capped.n_sets == 8
    assert build_manifest([entry(f"s{i}", f"v{i}", "same", 4) for i in range(10)], "train").n_sets == 10


def test_manifest_roundtrip(tmp_path):
    m = build_manifest([entry("a", "v1", "c", 4), entry("b", "v2", "c", 6)], "train", provenance={"seed": 3})
    write_manifest(tmp_path / "m.jsonl", m)
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.n_sets == 2 and back.n_prompts == 10 and back.provenance["seed"] == 3
    assert [s.to_json() for s in back.sequences] == [s.to_json() for s in m.sequences]
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    (tmp_path / "bad.jsonl").write_text("\n".join(lines[:2]) + "\n")
    with pytest.raises(IoError):
        read_manifest(tmp_path / "bad.jsonl")


def test_story_save_load(tmp_path):
    stories = gen_synthetic_stories(3, SyntheticConfig(h=8, w=8, radii=(1, 2), frame_counts=(4, 5)), seed=2)
    save_stories(tmp_path, "s.jsonl", stories, "train")
    back = load_stories(tmp_path / "s.jsonl")
    for a, b in zip(stories, back):
        assert np.array_equal(a.frames.astype(np.float32), b.frames)
        assert (a.global_caption, a.subject_captions, a.story_id) == (b.global_caption, b.subject_captions, b.story_id)
        assert [x.to_list() for x in a.boxes] == [x.to_list() for x in b.boxes]


# end to end

@pytest.fixture(scope="module")
def video_records():
    return gen_synthetic_videos(VideoConfig(n_videos=6, frames_per_video=60, shots_per_video=3), seed=4)


def test_pipeline_deterministic_and_disjoint(video_records):
    a = run_pipeline(video_records, PipelineSettings(), seed=1)
    b = run_pipeline(video_records, PipelineSettings(), seed=1)
    assert [s.to_json() for s in a.train.sequences] == [s.to_json() for s in b.train.sequences]
    assert not a.train.video_ids & a.bench.video_ids
    assert a.n_kept < a.n_input and a.train.n_sets > 0 and a.bench.n_sets > 0
    for s in a.train.sequences + a.bench.sequences:
        assert s.length in (4, 5, 6)
        idx = [f.frame_index for f in s.frames]
        assert idx == sorted(idx)


def test_pipeline_with_service_matches_stubs(video_records):
    recs = video_records[:60]
    local = run_pipeline(recs, PipelineSettings(bench_fraction=0.0), seed=2)
    for r in recs:
        r.bbox = r.feature = None
    with ServiceClient() as svc:
        remote = run_pipeline(recs, PipelineSettings(bench_fraction=0.0), seed=2, detector=svc.detect,
                              embedder=svc.feature, captioner=svc.caption)
    assert [s.global_caption for s in local.train.sequences] == [s.global_caption for s in remote.train.sequences]
    assert len(local.train.sequences) == len(remote.train.sequences)


def test_service_protocol_errors():
    assert handle({"id": 1, "op": "nope"})["ok"] is False
    resp = handle({"id": 2, "op": "detect", "latent": {"h": 1, "w": 1, "c": 4, "data": [0, 0, 0, 0]}})
    assert resp == {"id": 2, "ok": False, "error": "NoSubject", "message": "channel 0 is uniformly zero"}
    out = io.StringIO()
    serve(io.StringIO('not json\n\n{"id": 3, "op": "caption", "frames": []}\n'), out)
    rows = [json.loads(line) for line in out.getvalue().splitlines()]
    assert [r["ok"] for r in rows] == [False, False] and rows[1]["error"] == "MissingMetadata"
    with ServiceClient() as svc, pytest.raises(NoSubject):
        svc.detect(np.zeros((2, 2, 4)))
