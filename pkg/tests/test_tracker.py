# tests/test_tracker.py
from collections import deque

import numpy as np
import pytest

from adaptrack.config import Config, ScenarioConfig
from adaptrack.geometry import Box2D
from adaptrack.metrics import evaluate
from adaptrack.pipeline import track_scenario
from adaptrack.simkit import PRESETS, generate_scenario
from adaptrack.temporal import TemporalAdapter
from adaptrack.tracker import (
    FrameDetections,
    IdPrediction,
    TrackerError,
    TrackRecord,
    TrackStore,
    associate,
    predict_ids,
    refine_store,
    track_sequence,
    update_store,
)


def frame(n, embeddings, boxes=None, scores=None):
    embeddings = np.asarray(embeddings, dtype=float).reshape(-1, np.shape(embeddings)[-1])
    count = embeddings.shape[0]
    if boxes is None:
        boxes = [[10.0 + 50.0 * i, 10.0, 20.0, 40.0] for i in range(count)]
    if scores is None:
        scores = np.ones(count)
    return FrameDetections(frame=n, boxes=boxes, scores=scores, embeddings=embeddings)


def store_with(T=3, max_misses=2, **embeddings):
    store = TrackStore(T=T, max_misses=max_misses)
    for name, emb in embeddings.items():
        identity = int(name[1:])
        store.windows[identity] = deque([(1, np.asarray(emb, dtype=float))], maxlen=T)
        store.misses[identity] = 0
        store.next_id = max(store.next_id, identity + 1)
    return store


class TestTrackRecord:
    def test_ids_start_at_one(self):
        with pytest.raises(TrackerError):
            TrackRecord(frame=1, id=0, box=Box2D(0, 0, 1, 1))

    def test_frames_start_at_one(self):
        with pytest.raises(TrackerError) as exc_info:
            TrackRecord(frame=0, id=1, box=Box2D(0, 0, 1, 1))
        assert "从 1 开始" in str(exc_info.value)


class TestFrameDetections:
    def test_score_count_mismatch(self):
        with pytest.raises(TrackerError):
            FrameDetections(frame=1, boxes=np.zeros((2, 4)), scores=[1.0])

    def test_empty(self):
        assert len(FrameDetections(frame=1, boxes=np.zeros((0, 4)), scores=[])) == 0


class TestAssociate:
    def test_crossed_similarities(self):
        result = associate(np.array([[0.9, 0.2], [0.3, 0.8]]), [5, 9], next_id=10, threshold=0.3)
        assert result.ids == [5, 9]
        assert result.new == [False, False]

    def test_no_tracks_gives_fresh_ids(self):
        result = associate(np.zeros((3, 0)), [], next_id=4, threshold=0.3)
        assert result.ids == [4, 5, 6]
        assert result.new == [True, True, True]

    def test_below_threshold_is_new(self):
        result = associate(np.array([[0.9], [0.1]]), [1], next_id=2, threshold=0.3)
        assert result.ids == [1, 2]
        assert result.new == [False, True]

    def test_more_detections_than_tracks(self):
        result = associate(np.array([[0.2], [0.95], [0.5]]), [3], next_id=4, threshold=0.3)
        assert result.ids == [4, 3, 5]


class TestPredictIds:
    def test_empty_store(self):
        store = TrackStore(T=3, max_misses=2)
        prediction = predict_ids(np.eye(2), store, refine_store(store))
        assert prediction.ids == [1, 2]

    def test_equal_embeddings_keep_identity(self):
        store = store_with(i1=[1.0, 0.0, 0.0], i2=[0.0, 1.0, 0.0])
        prediction = predict_ids(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]), store, refine_store(store))
        assert prediction.ids == [2, 1]
        assert not any(prediction.new)

    def test_no_detections(self):
        store = store_with(i1=[1.0, 0.0])
        assert predict_ids(np.zeros((0, 2)), store, refine_store(store)).ids == []


class TestUpdateStore:
    def test_matched_resets_misses(self):
        store = store_with(i1=[1.0, 0.0], i2=[0.0, 1.0])
        store.misses = {1: 1, 2: 1}
        updated = update_store(store, IdPrediction([1, 2], [False, False]), np.eye(2), frame=2)
        assert updated.misses == {1: 0, 2: 0}

    def test_input_store_untouched(self):
        store = store_with(i1=[1.0, 0.0])
        update_store(store, IdPrediction([], []), np.zeros((0, 2)), frame=2)
        assert len(store.windows[1]) == 1
        assert store.misses[1] == 0

    def test_retirement(self):
        store = store_with(max_misses=2, i1=[1.0, 0.0])
        store = update_store(store, IdPrediction([], []), np.zeros((0, 2)), frame=2)
        assert store.live_ids() == [1]
        assert store.windows[1][-1] == (2, None)
        store = update_store(store, IdPrediction([], []), np.zeros((0, 2)), frame=3)
        assert store.live_ids() == []

    def test_ring_drops_oldest(self):
        store = store_with(T=3, max_misses=5, i1=[1.0, 0.0])
        for f in range(2, 5):
            store = update_store(store, IdPrediction([1], [False]), np.array([[float(f), 0.0]]), frame=f)
        assert [slot[0] for slot in store.windows[1]] == [2, 3, 4]

    def test_new_identity_advances_next_id(self):
        store = TrackStore(T=3, max_misses=2)
        updated = update_store(store, IdPrediction([1, 2], [True, True]), np.eye(2), frame=1)
        assert updated.next_id == 3
        assert updated.live_ids() == [1, 2]


class TestRefineStore:
    def test_latest_present_embedding(self):
        store = store_with(T=4, max_misses=5, i1=[1.0, 0.0])
        store = update_store(store, IdPrediction([1], [False]), np.array([[0.0, 2.0]]), frame=2)
        store = update_store(store, IdPrediction([], []), np.zeros((0, 2)), frame=3)
        assert np.array_equal(refine_store(store)[1], [0.0, 2.0])

    def test_window_without_detections_skipped(self):
        store = store_with(T=2, max_misses=5, i1=[1.0, 0.0])
        for f in (2, 3):
            store = update_store(store, IdPrediction([], []), np.zeros((0, 2)), frame=f)
        assert store.live_ids() == [1]
        assert refine_store(store) == {}

    def test_temporal_refinement_shape(self):
        ta = TemporalAdapter(4, 2, 1, np.random.default_rng(0))
        store = store_with(T=3, max_misses=5, i1=np.ones(4))
        refined = refine_store(store, ta)
        assert refined[1].shape == (4,)


class TestTrackSequence:
    def test_single_object_constant_id(self):
        frames = [frame(f, [[1.0, 0.0]]) for f in range(1, 6)]
        records = track_sequence(frames)
        assert {r.id for r in records} == {1}
        assert [r.frame for r in records] == [1, 2, 3, 4, 5]

    def test_two_objects_no_switch(self):
        frames = [frame(f, [[1.0, 0.1], [0.1, 1.0]]) for f in range(1, 8)]
        records = track_sequence(frames)
        first = [r.id for r in records if r.box.x == 10.0]
        second = [r.id for r in records if r.box.x == 60.0]
        assert set(first) == {1}
        assert set(second) == {2}

    def test_low_scores_dropped(self):
        frames = [frame(1, [[1.0, 0.0], [0.0, 1.0]], scores=[0.9, 0.2])]
        records = track_sequence(frames, score_threshold=0.5)
        assert len(records) == 1
        assert records[0].confidence == pytest.approx(0.9)

    def test_non_increasing_frames(self):
        with pytest.raises(TrackerError) as exc_info:
            track_sequence([frame(2, [[1.0]]), frame(2, [[1.0]])])
        assert "递增" in str(exc_info.value)

    def test_missing_embeddings(self):
        with pytest.raises(TrackerError):
            track_sequence([FrameDetections(frame=1, boxes=np.zeros((1, 4)), scores=[1.0])])

    def test_short_window_with_long_gap(self):
        frames = [frame(1, [[1.0, 0.0]])] + [frame(f, np.zeros((0, 2))) for f in range(2, 6)]
        frames.append(frame(6, [[1.0, 0.0]]))
        records = track_sequence(frames, T=2, max_misses=30)
        assert [r.id for r in records] == [1, 2]

    def test_deterministic_with_temporal_adapter(self):
        rng = np.random.default_rng(3)
        frames = [frame(f, rng.normal(size=(3, 4))) for f in range(1, 10)]
        ta = TemporalAdapter(4, 2, 2, np.random.default_rng(1))
        assert track_sequence(frames, T=4, temporal=ta) == track_sequence(frames, T=4, temporal=ta)


class TestOracleTracking:
    @pytest.mark.parametrize("preset", PRESETS)
    def test_ground_truth_embeddings_score_perfectly(self, preset):
        scenario = generate_scenario(ScenarioConfig(preset=preset, n_objects=4, n_frames=40, seed=3))
        records = track_scenario(scenario, None, Config())
        result = evaluate(scenario.gt_records(), records)
        assert result.HOTA == pytest.approx(100.0)
        assert result.IDF1 == pytest.approx(100.0)
        assert result.MOTA == pytest.approx(100.0)
        assert result.IDSW == 0
