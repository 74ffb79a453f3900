import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmod.flow import (FlowFormatError, estimate_flow, read_flow, read_ppm,
                          write_flow, write_ppm)


def textured_frame(seed, h=64, w=64):
    rng = np.random.default_rng(seed)
    return rng.random((h, w, 3))


class TestEstimateFlow:
    @pytest.mark.parametrize("quality", ["fast", "iterative"])
    def test_identical_frames_give_exact_zeros(self, quality):
        a = textured_frame(0)
        flow = estimate_flow(a, a, quality)
        assert flow.shape == (64, 64, 2)
        assert np.all(flow == 0.0)

    @pytest.mark.parametrize("quality", ["fast", "iterative"])
    def test_uniform_frames_give_zeros(self, quality):
        a = np.full((32, 32, 3), 0.5)
        flow = estimate_flow(a, a.copy(), quality)
        assert np.all(flow == 0.0)

    def test_periodic_translation_recovered(self):
        a = textured_frame(1)
        b = np.roll(a, 3, axis=1)  # content moves +3 in x
        flow = estimate_flow(a, b, "fast")
        interior = flow[8:-8, 8:-8]
        assert abs(np.abs(interior[..., 0] - 3.0).mean()) < 0.5
        assert abs(np.abs(interior[..., 1]).mean()) < 0.5

    def test_iterative_recovers_direction_of_small_shift(self):
        rng = np.random.default_rng(2)
        base = rng.random((64, 64, 3))
        k = np.ones((5, 5)) / 25.0
        from scipy.signal import convolve2d
        smooth = np.stack([convolve2d(base[..., c], k, mode="same", boundary="wrap")
                           for c in range(3)], axis=2)
        b = np.roll(smooth, 1, axis=1)  # content moves +1 in x
        flow = estimate_flow(smooth, b, "iterative")
        assert flow[8:-8, 8:-8, 0].mean() > 0.3
        assert abs(flow[8:-8, 8:-8, 1].mean()) < 0.2

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(ValueError, match="resolutions"):
            estimate_flow(textured_frame(0, 32, 32), textured_frame(0, 64, 64))

    def test_unknown_quality_rejected(self):
        a = textured_frame(0)
        with pytest.raises(ValueError, match="quality"):
            estimate_flow(a, a, "best")

    def test_output_matches_input_resolution(self):
        a = textured_frame(3, 48, 40)
        assert estimate_flow(a, a, "fast").shape == (48, 40, 2)

    def test_frame_validation(self):
        bad = np.full((16, 16, 3), 1.5)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            estimate_flow(bad, bad)


class TestFlowFormat:
    def test_single_pixel_file_is_20_bytes_and_round_trips(self, tmp_path):
        field = np.array([[[0.5, -1.0]]])
        path = tmp_path / "one.flo"
        write_flow(field, path)
        assert path.stat().st_size == 20
        np.testing.assert_array_equal(read_flow(path), field)

    def test_degenerate_field_rejected_at_write(self, tmp_path):
        with pytest.raises(FlowFormatError, match="degenerate"):
            write_flow(np.zeros((0, 4, 2)), tmp_path / "bad.flo")

    def test_round_trip_within_float32(self, tmp_path):
        rng = np.random.default_rng(9)
        field = rng.standard_normal((16, 16, 2)) * 10
        path = tmp_path / "f.flo"
        write_flow(field, path)
        back = read_flow(path)
        np.testing.assert_array_equal(back, field.astype(np.float32).astype(np.float64))

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FlowFormatError, match="byte 0"):
            read_flow(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "t.flo"
        write_flow(np.ones((4, 4, 2)), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FlowFormatError, match="truncated payload"):
            read_flow(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.flo"
        write_flow(np.ones((2, 2, 2)), path)
        path.write_bytes(path.read_bytes() + b"zz")
        with pytest.raises(FlowFormatError, match="trailing"):
            read_flow(path)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, h, w, seed):
        import tempfile
        rng = np.random.default_rng(seed)
        field = (rng.standard_normal((h, w, 2)) * 100).astype(np.float32).astype(np.float64)
        with tempfile.TemporaryDirectory() as d:
            path = f"{d}/f.flo"
            write_flow(field, path)
            np.testing.assert_array_equal(read_flow(path), field)


class TestPpm:
    def test_round_trip_within_quantization(self, tmp_path):
        frame = textured_frame(4, 8, 10)
        path = tmp_path / "f.ppm"
        write_ppm(frame, path)
        back = read_ppm(path)
        assert back.shape == frame.shape
        assert np.abs(back - frame).max() <= 0.5 / 255 + 1e-12

    def test_exact_for_quantized_values(self, tmp_path):
        frame = (np.arange(8 * 4 * 3).reshape(8, 4, 3) % 256) / 255.0
        path = tmp_path / "q.ppm"
        write_ppm(frame, path)
        np.testing.assert_array_equal(read_ppm(path), frame)

    def test_non_p6_rejected(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(FlowFormatError, match="P6"):
            read_ppm(path)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = tmp_path / "x.ppm"
        write_ppm(textured_frame(5, 4, 4), path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(FlowFormatError, match="truncated"):
            read_ppm(path)
