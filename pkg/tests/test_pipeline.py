import numpy as np
import pytest

from flowmod.condition import ConditionConfig
from flowmod.detector import DetectorConfig
from flowmod.pipeline import (LinkParams, build_streams, evaluate_streams,
                              evaluate_tubes, frame_detections, gt_tubes_of,
                              link_dataset, run_experiment, split_samples,
                              train_streams)
from flowmod.synthdata import GenConfig, generate
from flowmod.training import TrainSchedule

TINY_GEN = GenConfig(num_videos=4, num_test=2, frames_per_video=6, resolution=32,
                     sprite_size_range=(8, 12), flow_quality="fast",
                     noise_level=0.005)
TINY_DET = DetectorConfig(image_size=32, num_classes=4,
                          backbone_channels=(4, 6, 8, 10),
                          anchor_scales=(0.35, 0.6))
TINY_SCHED = TrainSchedule(epochs=2, batch_size=4, frames_per_video=2, lr=0.002)
TINY_COND = ConditionConfig(channels=(3, 3))


@pytest.fixture(scope="module")
def tiny_samples():
    return generate(TINY_GEN)


class TestStreams:
    def test_single_stream_modes(self, tiny_samples):
        for mode in ("rgb", "flow", "two_in_one"):
            streams = build_streams(mode, TINY_DET, TINY_COND, seed=0)
            assert streams.flow is None
            assert streams.primary.mode == mode

    def test_fused_modes_carry_flow_stream(self):
        for mode, appearance in (("two_stream", "rgb"),
                                 ("two_in_one_two_stream", "two_in_one")):
            streams = build_streams(mode, TINY_DET, TINY_COND, seed=0)
            assert streams.primary.mode == appearance
            assert streams.flow is not None and streams.flow.mode == "flow"

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            build_streams("quad_stream", TINY_DET)

    def test_parameter_count_sums_streams(self):
        solo = build_streams("rgb", TINY_DET, seed=0)
        flow = build_streams("flow", TINY_DET, seed=0)
        pair = build_streams("two_stream", TINY_DET, seed=0)
        assert pair.parameter_count() == \
            solo.parameter_count() + flow.parameter_count()


class TestEndToEnd:
    def test_run_experiment_produces_report(self, tiny_samples):
        streams, report = run_experiment("two_in_one", tiny_samples, TINY_DET,
                                         TINY_SCHED, TINY_COND, seed=0)
        for key in ("map@0.2", "map@0.5", "map@0.75", "map@0.5:0.95"):
            assert 0.0 <= report[key] <= 1.0
        assert report["parameters"] == streams.parameter_count()
        assert report["seconds_per_frame"] > 0
        assert len(streams.logs["primary"].epochs) == 2

    def test_detections_carry_video_and_frame_ids(self, tiny_samples):
        streams = build_streams("rgb", TINY_DET, seed=1)
        test = split_samples(tiny_samples, "test")
        per_video = frame_detections(streams, test, conf_thresh=0.05)
        assert set(per_video) == {s.video_id for s in test}
        for vid, frames in per_video.items():
            assert len(frames) == 6
            for t, dets in enumerate(frames):
                for d in dets:
                    assert d.video_id == vid and d.frame_index == t

    def test_identity_at_init_extends_to_detections(self, tiny_samples):
        rgb = build_streams("rgb", TINY_DET, TINY_COND, seed=4)
        tio = build_streams("two_in_one", TINY_DET, TINY_COND, seed=4)
        test = split_samples(tiny_samples, "test")
        d_rgb = frame_detections(rgb, test, conf_thresh=0.05)
        d_tio = frame_detections(tio, test, conf_thresh=0.05)
        for vid in d_rgb:
            for dets_a, dets_b in zip(d_rgb[vid], d_tio[vid]):
                assert len(dets_a) == len(dets_b)
                for a, b in zip(dets_a, dets_b):
                    assert a.score == b.score and a.class_id == b.class_id
                    np.testing.assert_array_equal(a.box, b.box)

    def test_gt_as_tubes_scores_one(self, tiny_samples):
        test = split_samples(tiny_samples, "test")
        gt = gt_tubes_of(test)
        from flowmod.tubes import ActionTube
        tubes = [ActionTube(video_id=g.video_id, class_id=g.class_id, score=1.0,
                            start_frame=g.start_frame, boxes=g.boxes) for g in gt]
        report = evaluate_tubes(tubes, gt)
        assert report["map@0.5"] == 1.0 and report["map@0.5:0.95"] == 1.0

    def test_train_streams_trains_both_networks(self, tiny_samples):
        streams = build_streams("two_stream", TINY_DET, seed=2)
        train_streams(streams, split_samples(tiny_samples, "train"),
                      TINY_SCHED, seed=2)
        assert "primary" in streams.logs and "flow" in streams.logs
