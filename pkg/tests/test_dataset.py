import logging

import numpy as np
import pytest
from PIL import Image

from ssfwin.data_model import ModelConfig, validate_clip
from ssfwin.dataset import (
    ClipSource,
    EmptySourceError,
    load_clips,
    make_synthetic_clip,
    random_crop,
    worker_rng,
)


def _write_images(root, n, size=32, dtype=np.uint16):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        arr = rng.integers(0, np.iinfo(dtype).max, (size, size)).astype(dtype)
        Image.fromarray(arr).save(root / f"2011-01-01T{i:02d}0000.png")


class TestLoadClips:
    def test_disjoint_windows(self, tmp_path):
        _write_images(tmp_path / "a", 8)
        src = ClipSource(kind="directory_archive", root=str(tmp_path / "a"), clip_length=4)
        clips = list(load_clips(src))
        assert len(clips) == 2
        assert all(c.gop_size == 4 for c in clips)

    def test_sliding_windows_when_overlap_enabled(self, tmp_path):
        _write_images(tmp_path / "a", 8)
        src = ClipSource(kind="directory_archive", root=str(tmp_path / "a"),
                         clip_length=4, overlap_stride=1)
        assert len(list(load_clips(src))) == 5

    def test_insufficient_frames_yield_nothing_with_warning(self, tmp_path, caplog):
        _write_images(tmp_path / "a", 3)
        src = ClipSource(kind="directory_archive", root=str(tmp_path / "a"), clip_length=4)
        with caplog.at_level(logging.WARNING):
            assert list(load_clips(src)) == []
        assert any("need 4" in r.message for r in caplog.records)

    def test_empty_source_raises(self, tmp_path):
        (tmp_path / "empty").mkdir()
        src = ClipSource(kind="directory_archive", root=str(tmp_path / "empty"))
        with pytest.raises(EmptySourceError):
            list(load_clips(src))

    def test_corrupt_image_skips_clip_with_log(self, tmp_path, caplog):
        _write_images(tmp_path / "a", 8)
        (tmp_path / "a" / "2011-01-01T010000.png").write_bytes(b"not a png")
        src = ClipSource(kind="directory_archive", root=str(tmp_path / "a"), clip_length=4)
        with caplog.at_level(logging.WARNING):
            clips = list(load_clips(src))
        assert len(clips) == 1  # first window contains the corrupt frame
        assert any("skipping clip" in r.message for r in caplog.records)

    def test_synthetic_determinism_byte_level(self):
        src = ClipSource(kind="synthetic", seed=7, clip_length=4, n_clips=3, frame_size=32)
        a = [c.as_array().tobytes() for c in load_clips(src)]
        b = [c.as_array().tobytes() for c in load_clips(src)]
        assert a == b

    def test_loaded_clips_validate(self, tmp_path):
        _write_images(tmp_path / "a", 4, size=64)
        src = ClipSource(kind="directory_archive", root=str(tmp_path / "a"), clip_length=4)
        cfg = ModelConfig()
        for clip in load_clips(src):
            validate_clip(clip, cfg)

    def test_source_crop_applied(self):
        src = ClipSource(kind="synthetic", seed=1, clip_length=2, n_clips=2,
                         frame_size=64, crop=32)
        for clip in load_clips(src):
            assert (clip.height, clip.width) == (32, 32)


class TestRandomCrop:
    def test_same_offset_for_all_frames(self):
        clip = make_synthetic_clip(3, 4, 64, 64)
        out = random_crop(clip, 32, np.random.default_rng(5))
        assert out.height == out.width == 32
        # the crop must be a translated window of the source, identical across frames
        src = clip.as_array()
        dst = out.as_array()
        found = False
        for top in range(33):
            for left in range(33):
                if np.array_equal(src[:, top:top + 32, left:left + 32], dst):
                    found = True
        assert found

    def test_identity_when_side_equals_frame(self):
        clip = make_synthetic_clip(3, 2, 32, 32)
        out = random_crop(clip, 32, np.random.default_rng(0))
        np.testing.assert_array_equal(out.as_array(), clip.as_array())

    def test_deterministic_given_rng_state(self):
        clip = make_synthetic_clip(3, 2, 64, 64)
        a = random_crop(clip, 32, np.random.default_rng(9)).as_array()
        b = random_crop(clip, 32, np.random.default_rng(9)).as_array()
        np.testing.assert_array_equal(a, b)

    def test_oversized_crop_rejected(self):
        clip = make_synthetic_clip(3, 2, 32, 32)
        with pytest.raises(ValueError, match="exceeds"):
            random_crop(clip, 48, np.random.default_rng(0))


class TestSyntheticClips:
    def test_translate_matches_array_shift_oracle(self):
        # 1 px/frame: frame 3 equals frame 0 shifted 3 px, away from borders
        clip = make_synthetic_clip(5, 4, 64, 64, motion="translate", shift=(1.0, 0.0))
        f0 = clip.frames[0].pixels
        f3 = clip.frames[3].pixels
        shifted = np.zeros_like(f0)
        shifted[:, 3:] = f0[:, :-3]
        band = 8
        np.testing.assert_allclose(
            f3[:, band:-band], shifted[:, band:-band], atol=1e-6
        )

    def test_single_frame_clip(self):
        clip = make_synthetic_clip(1, 1, 32, 32)
        assert clip.gop_size == 1

    def test_different_seeds_differ(self):
        a = make_synthetic_clip(1, 2, 32, 32).as_array()
        b = make_synthetic_clip(2, 2, 32, 32).as_array()
        assert not np.array_equal(a, b)

    def test_values_in_unit_range_and_finite(self):
        for motion in ("translate", "rotate", "brighten"):
            clip = make_synthetic_clip(4, 3, 32, 32, motion=motion)
            arr = clip.as_array()
            assert np.all(np.isfinite(arr)) and arr.min() >= 0 and arr.max() <= 1

    def test_dimension_check(self):
        with pytest.raises(ValueError, match="divisible"):
            make_synthetic_clip(0, 2, 30, 32)


def test_worker_rng_independent_and_reproducible():
    a = worker_rng(3, 0).integers(0, 1 << 30, 8)
    b = worker_rng(3, 1).integers(0, 1 << 30, 8)
    a2 = worker_rng(3, 0).integers(0, 1 << 30, 8)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, a2)
