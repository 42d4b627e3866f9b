import subprocess
import sys

import numpy as np
import pytest

from ssfwin.data_model import (
    Clip,
    ClipValidationError,
    Frame,
    ModelConfig,
    RDPoint,
    validate_clip,
)


def _clip(h, w, n=30, fill=0.5):
    return Clip(frames=tuple(Frame(pixels=np.full((h, w), fill, np.float32)) for _ in range(n)))


class TestValidateClip:
    def test_valid_clip_accepted(self):
        cfg = ModelConfig()
        clip = _clip(512, 512, n=30)
        assert validate_clip(clip, cfg) is clip

    def test_divisibility_error_cites_factor(self):
        cfg = ModelConfig()
        clip = _clip(500, 512, n=2)
        with pytest.raises(ClipValidationError, match="16"):
            validate_clip(clip, cfg)

    def test_nan_names_frame_index(self):
        cfg = ModelConfig()
        frames = [Frame(pixels=np.full((64, 64), 0.5, np.float32)) for _ in range(3)]
        bad = np.full((64, 64), 0.5, np.float32)
        bad[1, 1] = np.nan
        frames[2] = Frame(pixels=bad)
        with pytest.raises(ClipValidationError, match="frame 2"):
            validate_clip(Clip(frames=tuple(frames)), cfg)

    def test_shape_mismatch_names_frame(self):
        cfg = ModelConfig()
        frames = (
            Frame(pixels=np.zeros((64, 64), np.float32)),
            Frame(pixels=np.zeros((64, 32), np.float32)),
        )
        with pytest.raises(ClipValidationError, match="frame 1"):
            validate_clip(Clip(frames=frames), cfg)

    def test_out_of_range_pixels_rejected(self):
        cfg = ModelConfig()
        clip = _clip(64, 64, n=1, fill=1.5)
        with pytest.raises(ClipValidationError, match="frame 0"):
            validate_clip(clip, cfg)

    def test_idempotent_and_side_effect_free(self):
        cfg = ModelConfig()
        clip = _clip(64, 64, n=4)
        before = clip.as_array().copy()
        validate_clip(validate_clip(clip, cfg), cfg)
        np.testing.assert_array_equal(clip.as_array(), before)


class TestModelConfig:
    def test_json_round_trip_identity(self):
        cfg = ModelConfig.mini(lambda_rd=0.02)
        again = ModelConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_hash_stable_across_processes(self):
        cfg = ModelConfig()
        code = (
            "from ssfwin.data_model import ModelConfig; "
            "print(ModelConfig().config_hash().hex())"
        )
        out = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, check=True
        )
        assert out.stdout.strip() == cfg.config_hash().hex()

    def test_hash_sensitive_to_fields(self):
        assert ModelConfig().config_hash() != ModelConfig(lambda_rd=0.02).config_hash()

    def test_segment_plan_must_sum_to_latent_channels(self):
        with pytest.raises(ValueError, match="segment plan"):
            ModelConfig(segment_plan=(8, 8, 16, 32, 16))

    def test_odd_depth_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ModelConfig(stage_depths=(2, 2, 3, 2))

    def test_heads_must_divide_dims(self):
        with pytest.raises(ValueError, match="divide"):
            ModelConfig(stage_heads=(3, 4, 4, 8))

    def test_downsample_factor(self):
        assert ModelConfig().downsample_factor == 16

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown config fields"):
            ModelConfig.from_dict({"latent_channels": 96, "bogus": 1})


class TestValueTypes:
    def test_rd_point_requires_positive_bpp(self):
        with pytest.raises(ValueError):
            RDPoint(bpp=0.0, psnr_db=30.0, msssim_log_db=10.0)

    def test_latent_kind_checked_for_finiteness(self):
        from ssfwin.data_model import LatentKind, LatentTensor

        with pytest.raises(ValueError, match="non-finite"):
            LatentTensor(data=np.full((1, 2, 2, 2), np.inf), kind=LatentKind.Y_INTRA)

    def test_flow_field_shape_agreement(self):
        from ssfwin.data_model import FlowField

        with pytest.raises(ValueError, match="share shape"):
            FlowField(fx=np.zeros((4, 4)), fy=np.zeros((4, 4)), fz=np.zeros((4, 5)))

    def test_clip_frames_share_dims_via_validate(self):
        clip = _clip(64, 64, n=2)
        assert clip.gop_size == 2 and clip.height == 64 and clip.width == 64
