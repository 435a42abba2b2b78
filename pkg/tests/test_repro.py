import json

import numpy as np
import pytest

from l2s.config import from_dict
from l2s.errors import CheckpointError, MissingStage1Checkpoint
from l2s.repro import (detected_boxes, generate, heldout_stories, layout_toggle_eval, load_model,
                       reference_stories, run_training, sample_spec, schedule_for, story_layout,
                       training_stories, training_wall_seconds, weights_echo)

RUN = from_dict({
    "model": {"n_global_blocks": 2, "d_model": 8, "n_heads": 2, "h": 8, "w": 8, "max_frames": 3,
              "vocab_dim": 8, "freq_dim": 8, "ffn_mult": 2},
    "training": {"batch": 4, "steps": 2, "stage2_batch": 2, "stage2_steps": 2, "log_every": 0},
    "data": {"n_train": 10, "frame_counts": [3], "radii": [1, 2]},
    "eval": {"n_samples": 4, "sample_batch": 2},
    "sample": {"steps": 3},
})


def test_story_sets_are_disjoint_and_seeded():
    train, held, ref = training_stories(RUN), heldout_stories(RUN), reference_stories(RUN)
    assert len(train) == 10 and len(held) == 4 and len(ref) == 256
    ids = [{s.video_id for s in x} for x in (train, held, ref)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert all(s.n_frames == 3 and s.frames.shape[1:] == (8, 8, 4) for s in held)
    again = heldout_stories(RUN)
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(held, again))


def test_weights_echo_ignores_sampling_sections():
    other = from_dict({**RUN.to_dict(), "sample": {"steps": 7}, "eval": {"n_samples": 9}})
    assert weights_echo(other) == weights_echo(RUN)
    assert set(weights_echo(RUN)) == {"model", "schedule", "training", "data", "seed"}


def test_training_round_trip(tmp_path):
    with pytest.raises(MissingStage1Checkpoint):
        run_training(RUN, 2, tmp_path)
    with pytest.raises(CheckpointError):
        load_model(tmp_path, RUN, 2)
    r1 = run_training(RUN, 1, tmp_path)
    r2 = run_training(RUN, 2, tmp_path)
    store, ck = load_model(tmp_path, RUN, 2)
    assert ck.stage == 2 and ck.step == 2
    for name, t in r2.store.items():
        assert np.array_equal(t.data.astype(np.float32), store[name].data)
    rows = [json.loads(line) for line in (tmp_path / "logs" / "train_stage1.jsonl").read_text().splitlines()]
    total = sum(r["wall_ms"] for r in rows) / 1e3
    assert total <= training_wall_seconds(tmp_path)
    assert r1.state.step == 2
    # retraining truncates the log instead of appending
    run_training(RUN, 1, tmp_path)
    assert len((tmp_path / "logs" / "train_stage1.jsonl").read_text().splitlines()) == 2


def test_generate_chunks_and_layout(tmp_path):
    run_training(RUN, 1, tmp_path)
    run_training(RUN, 2, tmp_path)
    store, _ = load_model(tmp_path, RUN, 2)
    held = heldout_stories(RUN)
    spec = sample_spec(RUN)
    z = generate(store, RUN.model, schedule_for(RUN), spec, held, True, chunk=2)
    assert z.shape == (4, 3, 8, 8, 4)
    z_first = generate(store, RUN.model, schedule_for(RUN), spec, held[:2], True, chunk=2)
    assert np.array_equal(z[:2], z_first)
    lay = story_layout(held)
    assert np.array_equal(lay.ref_latent[1], held[1].frames[0]) and len(lay.boxes[0]) == 3
    res = layout_toggle_eval(store, RUN.model, schedule_for(RUN), spec, held, reference_stories(RUN)[:16],
                             RUN.hash, RUN.seed, chunk=2)
    names = [r["metric"] for r in res.report.rows]
    for cond in ("with_layout", "without_layout", "no_subject_branch"):
        assert f"layout_adherence/{cond}" in names and f"toy_fid/{cond}" in names
    assert res.report.value("layout_adherence/ground_truth") == 1.0
    assert 0 < res.report.value("random_placement_baseline") < 1


def test_detected_boxes_fall_back_to_full_frame():
    held = heldout_stories(RUN)
    boxes = detected_boxes(np.concatenate([held[0].frames, np.zeros((1, 8, 8, 4))]))
    assert boxes[-1].to_list() == [0.0, 0.0, 1.0, 1.0] and len(boxes) == 4
