"""Streaming model behavior: branch scheduling, fusion reuse, inference."""

import numpy as np
import pytest

from evdetr.data import DatasetIndex
from evdetr.errors import NoPriorFrameError
from evdetr.events import EventTensor
from evdetr.model import StreamingDetector, infer_sequence
from evdetr.tensor import RngStream, no_grad

from conftest import MICRO


def micro_model(modality="fused", seed=0, **kw):
    import dataclasses

    return StreamingDetector(dataclasses.replace(MICRO, modality=modality, **kw), seed=seed)


def feed_event(model, state, rng, t):
    arr = rng.uniform(0.0, 1.0, (2, 16, 16))
    return model.process_event_bin(state, EventTensor("event_image", arr, t, 0))


class TestBranchScheduling:
    def test_frame_forward_counter(self):
        model = micro_model()
        state = model.new_state()
        rng = RngStream(0)
        with no_grad():
            for k in range(3):
                model.process_frame(state, rng.uniform(0, 1, (16, 16)), k * 40_000)
        assert state.counters["frame_forward"] == 3
        assert len(state.frame_history) == 1  # agg_size 2 -> capacity 1

    def test_fusion_reuses_cached_frame(self):
        model = micro_model()
        state = model.new_state()
        rng = RngStream(1)
        with no_grad():
            model.process_frame(state, rng.uniform(0, 1, (16, 16)), 40_000)
            for i, t in enumerate((40_000, 50_000, 60_000, 70_000)):
                feed_event(model, state, rng, t)
                model.detect_at(state, t, (2, 2))
        assert state.counters["frame_forward"] == 1
        assert state.counters["fusion"] == 4
        assert state.fusion_reuse == {40_000: 4}

    def test_event_only_fallback_before_first_frame(self):
        model = micro_model()
        state = model.new_state()
        rng = RngStream(2)
        with no_grad():
            feed_event(model, state, rng, 10_000)
            logits, boxes = model.detect_at(state, 10_000, (2, 2))
        assert state.counters["event_only"] == 1
        assert np.isfinite(logits.data).all() and np.isfinite(boxes.data).all()

    def test_frame_only_modality_needs_frames(self):
        model = micro_model(modality="frame")
        state = model.new_state()
        with pytest.raises(NoPriorFrameError):
            model.detect_at(state, 1000, (2, 2))

    def test_single_modality_has_no_other_branch(self):
        frame_only = micro_model(modality="frame")
        event_only = micro_model(modality="event")
        assert not any(n.startswith("backbone.event") for n in frame_only.store.names())
        assert not any(n.startswith("backbone.frame") for n in event_only.store.names())
        assert not any(n.startswith("fusion") for n in frame_only.store.names())

    def test_deterministic_outputs(self):
        outs = []
        for _ in range(2):
            model = micro_model(seed=5)
            state = model.new_state()
            rng = RngStream(3)
            with no_grad():
                model.process_frame(state, rng.uniform(0, 1, (16, 16)), 0)
                feed_event(model, state, rng, 10_000)
                logits, _ = model.detect_at(state, 10_000, (2, 2))
            outs.append(logits.data.copy())
        assert outs[0].tobytes() == outs[1].tobytes()


@pytest.fixture(scope="module")
def seq(tiny_dataset):
    return DatasetIndex(tiny_dataset).split("test")[0]


class TestInferSequence:

    def test_detections_at_all_query_times(self, seq, tiny_run_config):
        model = StreamingDetector(tiny_run_config.model, seed=0)
        times = [l.t_us for l in seq.labels][:5]
        results, state = infer_sequence(model, seq, times, confidence_threshold=None)
        assert [t for t, _ in results] == times
        assert all(len(dets) == tiny_run_config.model.n_queries for _, dets in results)

    def test_confidence_threshold_filters(self, seq, tiny_run_config):
        model = StreamingDetector(tiny_run_config.model, seed=0)
        times = [seq.labels[2].t_us]
        raw, _ = infer_sequence(model, seq, times, confidence_threshold=None)
        cut, _ = infer_sequence(model, seq, times, confidence_threshold=1.1)
        assert len(raw[0][1]) > 0 and len(cut[0][1]) == 0

    def test_frame_stride_reduces_frame_forwards(self, seq, tiny_run_config):
        model = StreamingDetector(tiny_run_config.model, seed=0)
        times = [l.t_us for l in seq.labels]
        _, full = infer_sequence(model, seq, times)
        _, half = infer_sequence(model, seq, times, frame_stride=2)
        assert half.counters["frame_forward"] == -(-full.counters["frame_forward"] // 2)
