import math

import numpy as np
import pytest
import scipy.special
import torch

from ssfwin.data_model import ModelConfig
from ssfwin.entropy_model import (
    ChannelCheckerboardEntropy,
    CheckerboardConv,
    FactorizedPrior,
    GlobalContext,
    anchor_mask,
    checkerboard_kernel_mask,
    default_segment_plan,
    gaussian_conditional_likelihood,
    lower_bound,
    merge_channels,
    split_channels,
)
from ssfwin.quantization import round_quantize


def _em(latent_channels=64, mean_offset=True, seed=0) -> ChannelCheckerboardEntropy:
    torch.manual_seed(seed)
    cfg = ModelConfig.mini(mean_offset_coding=mean_offset)
    if latent_channels != cfg.latent_channels:
        cfg = ModelConfig(
            stage_dims=(96, 144, 192, latent_channels),
            stage_heads=(3, 6, 12, 24),
            latent_channels=latent_channels,
            hyper_channels=96,
            segment_plan=default_segment_plan(latent_channels),
        )
    return ChannelCheckerboardEntropy(cfg).eval()


class TestGaussianLikelihood:
    def test_center_value_matches_erf_oracle(self):
        p = gaussian_conditional_likelihood(
            torch.tensor(0.0, dtype=torch.float64),
            torch.tensor(0.0, dtype=torch.float64),
            torch.tensor(1.0, dtype=torch.float64),
        )
        assert float(p) == pytest.approx(0.3829249, abs=1e-7)

    def test_erf_oracle_grid(self):
        # mu in [-3, 3], sigma in [1e-2, 64], y integer in [-20, 20]
        mus = torch.linspace(-3, 3, 13, dtype=torch.float64)
        sigmas = torch.tensor(
            np.exp(np.linspace(math.log(1e-2), math.log(64), 9)), dtype=torch.float64
        )
        ys = torch.arange(-20, 21, dtype=torch.float64)
        y, m, s = torch.meshgrid(ys, mus, sigmas, indexing="ij")
        p = gaussian_conditional_likelihood(y, m, s, floor=0.0)
        oracle = scipy.special.ndtr((y.numpy() + 0.5 - m.numpy()) / s.numpy()) - \
            scipy.special.ndtr((y.numpy() - 0.5 - m.numpy()) / s.numpy())
        np.testing.assert_allclose(p.numpy(), oracle, atol=1e-6, rtol=0)

    def test_mean_maximizes_over_integers(self):
        for sigma in (0.05, 0.7, 3.0, 40.0):
            for mu in (-2.3, 0.0, 1.5):
                ys = torch.arange(-50, 51, dtype=torch.float64)
                p = gaussian_conditional_likelihood(
                    ys, torch.tensor(float(mu), dtype=torch.float64),
                    torch.tensor(float(sigma), dtype=torch.float64), floor=0.0,
                )
                best = int(ys[p.argmax()])
                assert best == round(mu) or abs(best - mu) <= 0.5 + 1e-9

    def test_integer_sum_is_one(self):
        # sum over all integers within 40 sigma of the mean, pre-floor
        for sigma in (1e-2, 0.3, 1.0, 8.0, 64.0):
            mu = 0.37
            half = max(3, int(math.ceil(40 * sigma)))
            ys = torch.arange(-half, half + 1, dtype=torch.float64) + round(mu)
            p = gaussian_conditional_likelihood(
                ys, torch.tensor(mu, dtype=torch.float64),
                torch.tensor(sigma, dtype=torch.float64), floor=0.0,
            )
            assert float(p.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_floor_applied(self):
        p = gaussian_conditional_likelihood(
            torch.tensor(500.0), torch.tensor(0.0), torch.tensor(0.1)
        )
        assert float(p) == pytest.approx(1e-9)

    def test_sigma_lower_bound(self):
        a = gaussian_conditional_likelihood(
            torch.tensor(0.0), torch.tensor(0.0), torch.tensor(1e-7)
        )
        b = gaussian_conditional_likelihood(
            torch.tensor(0.0), torch.tensor(0.0), torch.tensor(1e-2)
        )
        assert torch.equal(a, b)

    def test_lower_bound_gradient_semantics(self):
        x = torch.tensor([-1.0, 2.0], requires_grad=True)
        out = lower_bound(x, 0.5)
        out.sum().backward()
        # clamped entry passes gradient only when it pushes upward
        assert x.grad[0] == 0.0 and x.grad[1] == 1.0
        x2 = torch.tensor([-1.0], requires_grad=True)
        lower_bound(x2, 0.5).sum().neg().backward()
        assert x2.grad[0] == -1.0


class TestFactorizedPrior:
    def test_fresh_channels_integrate_to_one(self):
        prior = FactorizedPrior(4)
        z = torch.arange(-50, 51, dtype=torch.float32)
        z = z.view(1, 1, 1, -1).expand(1, 4, 1, 101).contiguous()
        with torch.no_grad():
            p = prior.likelihood(z, floor=0.0)
        sums = p.sum(dim=-1).squeeze()
        for c in range(4):
            assert float(sums[c]) == pytest.approx(1.0, abs=1e-4)

    def test_floor_everywhere(self):
        prior = FactorizedPrior(2)
        z = torch.tensor([[-1e4, 1e4]]).view(1, 2, 1, 1)
        assert torch.all(prior.likelihood(z) >= 1e-9)

    def test_cdf_monotone_and_saturating(self):
        prior = FactorizedPrior(3)
        grid = torch.linspace(-60, 60, 241, dtype=torch.float64).repeat(3, 1)
        cdf = prior.cdf(grid)
        assert torch.all(cdf.diff(dim=1) >= -1e-12)
        far = prior.cdf(torch.tensor([[-1e4, 1e4]] * 3, dtype=torch.float64))
        assert torch.all(far[:, 0] < 1e-6) and torch.all(far[:, 1] > 1 - 1e-6)

    def test_quantized_rows_track_density(self):
        prior = FactorizedPrior(4)
        cdf = prior.build_cdf()
        assert cdf.n_rows == 4
        for c in range(4):
            row, off = cdf.rows[c], int(cdf.offsets[c])
            z = torch.arange(off, off + len(row) - 2, dtype=torch.float32)
            with torch.no_grad():
                p = prior.likelihood(z.view(1, 1, 1, -1).expand(1, 4, 1, -1).contiguous(),
                                     floor=0.0)[0, c, 0]
            counts = np.diff(row)[:-1] / 65536
            np.testing.assert_allclose(counts, p.numpy(), atol=2e-3)

    def test_gradients_flow(self):
        prior = FactorizedPrior(2)
        z = torch.randn(1, 2, 4, 4)
        loss = -torch.log2(prior.likelihood(z)).sum()
        loss.backward()
        for name, p in prior.named_parameters():
            assert p.grad is not None and torch.any(p.grad != 0), name


class TestSegmentPlan:
    def test_paper_grouping_at_320(self):
        assert default_segment_plan(320) == (16, 16, 32, 64, 192)

    def test_grouping_at_192(self):
        assert default_segment_plan(192) == (16, 16, 32, 64, 64)

    def test_128_channels_rejected(self):
        with pytest.raises(ValueError, match="128"):
            default_segment_plan(128)

    def test_split_merge_bitwise(self):
        y = torch.randn(2, 192, 4, 4)
        segs = split_channels(y, (16, 16, 32, 64, 64))
        assert [s.shape[1] for s in segs] == [16, 16, 32, 64, 64]
        assert torch.equal(merge_channels(segs), y)

    def test_sum_mismatch_rejected(self):
        with pytest.raises(ValueError, match="sums to"):
            split_channels(torch.randn(1, 100, 2, 2), (16, 16, 32, 64, 64))


class TestCheckerboardStructures:
    def test_anchor_mask_partition(self):
        m = anchor_mask(6, 7)
        assert m.shape == (6, 7)
        assert bool(m[0, 0]) and not bool(m[0, 1])
        total = m.numel()
        n_anchor = int(m.sum())
        # parity classes partition the grid; even-sized grids balance
        assert n_anchor + int((~m).sum()) == total
        assert n_anchor - (total - n_anchor) == (6 % 2) * (7 % 2)

    def test_kernel_mask_parity(self):
        km = checkerboard_kernel_mask(5)
        assert km[2, 2] == 0  # center tap always zero
        for r in range(5):
            for c in range(5):
                assert km[r, c] == ((r + c) % 2 == 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            checkerboard_kernel_mask(4)


class TestCheckerboardConv:
    def test_zero_input_zero_output(self):
        conv = CheckerboardConv(4, 8)
        out = conv(torch.zeros(1, 4, 6, 6))
        assert torch.all(out == 0)

    def test_same_parity_positions_do_not_interact(self):
        # output at non-anchor positions ignores non-anchor inputs
        torch.manual_seed(0)
        conv = CheckerboardConv(2, 4)
        x = torch.randn(1, 2, 8, 8)
        mask = anchor_mask(8, 8)
        x2 = x.clone()
        x2[:, :, ~mask] += torch.randn_like(x2[:, :, ~mask])
        a, b = conv(x), conv(x2)
        assert torch.equal(a[:, :, ~mask], b[:, :, ~mask])

    def test_impulse_footprint_matches_direct_oracle(self):
        torch.manual_seed(1)
        conv = CheckerboardConv(1, 1, kernel=5)
        x = torch.zeros(1, 1, 9, 9)
        x[0, 0, 4, 4] = 1.0  # anchor position (4+4 even)
        out = conv(x)[0, 0]
        w = (conv.conv.weight * conv.kernel_mask)[0, 0]
        # direct correlation oracle: out[p] = w[4 + 4 - p] flipped
        expected = torch.zeros(9, 9)
        for r in range(9):
            for c in range(9):
                dr, dc = 4 - r, 4 - c
                if abs(dr) <= 2 and abs(dc) <= 2:
                    expected[r, c] = w[2 + dr, 2 + dc]
        torch.testing.assert_close(out, expected, atol=1e-6, rtol=0)
        # footprint: only odd-parity offsets within the 5x5 window
        nz = out.nonzero()
        for r, c in nz.tolist():
            assert (abs(r - 4) + abs(c - 4)) % 2 == 1
            assert abs(r - 4) <= 2 and abs(c - 4) <= 2


def _dense_masked_attention_oracle(gc: GlobalContext, local, anchors):
    """Additive -inf mask over non-anchor keys, full softmax."""
    b, c, h, w = local.shape
    tokens = gc.norm(local.permute(0, 2, 3, 1).reshape(b, h * w, c))
    amask = anchors.reshape(-1)
    q = gc.q(tokens)
    k = gc.k(tokens)
    v = gc.v(tokens)
    heads = gc.num_heads
    d = c // heads
    out = torch.zeros_like(tokens)
    for bi in range(b):
        for hd in range(heads):
            qh = q[bi, :, hd * d:(hd + 1) * d]
            kh = k[bi, :, hd * d:(hd + 1) * d]
            vh = v[bi, :, hd * d:(hd + 1) * d]
            scores = qh @ kh.T * gc.scale
            scores[:, ~amask] = float("-inf")
            weights = torch.softmax(scores, dim=-1)
            out[bi, :, hd * d:(hd + 1) * d] = weights @ vh
    out = gc.proj(out)
    out[:, amask] = 0.0  # anchor-query rows are unused
    return out.reshape(b, h, w, c).permute(0, 3, 1, 2)


class TestGlobalContext:
    def test_2x2_attends_over_two_anchor_keys(self):
        torch.manual_seed(0)
        gc = GlobalContext(8, 2).double()
        local = torch.randn(1, 8, 2, 2, dtype=torch.float64)
        anchors = anchor_mask(2, 2)
        out = gc(local, anchors)
        oracle = _dense_masked_attention_oracle(gc, local, anchors)
        torch.testing.assert_close(out, oracle, atol=1e-6, rtol=0)
        # anchor positions carry zeros
        assert torch.all(out[:, :, anchors] == 0)

    def test_permuting_non_anchor_keys_leaves_output_unchanged(self):
        torch.manual_seed(1)
        gc = GlobalContext(8, 4)
        anchors = anchor_mask(4, 4)
        local = torch.randn(1, 8, 4, 4)
        swapped = local.clone()
        # swap two non-anchor positions' values: keys unchanged (they are
        # anchors only), queries permute with their outputs
        na = (~anchors).nonzero()
        p1, p2 = na[0], na[1]
        swapped[:, :, p1[0], p1[1]] = local[:, :, p2[0], p2[1]]
        swapped[:, :, p2[0], p2[1]] = local[:, :, p1[0], p1[1]]
        a = gc(local, anchors)
        b = gc(swapped, anchors)
        torch.testing.assert_close(
            a[:, :, p1[0], p1[1]], b[:, :, p2[0], p2[1]], atol=1e-6, rtol=0
        )
        torch.testing.assert_close(
            a[:, :, p2[0], p2[1]], b[:, :, p1[0], p1[1]], atol=1e-6, rtol=0
        )
        rest = torch.ones_like(anchors)
        rest[p1[0], p1[1]] = False
        rest[p2[0], p2[1]] = False
        torch.testing.assert_close(a[:, :, rest], b[:, :, rest], atol=1e-6, rtol=0)

    def test_3x3_matches_dense_oracle(self):
        torch.manual_seed(2)
        gc = GlobalContext(12, 4).double()
        local = torch.randn(2, 12, 3, 3, dtype=torch.float64)
        anchors = anchor_mask(3, 3)
        torch.testing.assert_close(
            gc(local, anchors), _dense_masked_attention_oracle(gc, local, anchors),
            atol=1e-6, rtol=0,
        )

    def test_leakage_from_non_anchor_keys_exactly_zero(self):
        # gradient of any output w.r.t. value/key content at non-anchor
        # positions must be exactly zero through the k/v path: perturbing a
        # non-anchor token changes only that query's own output
        torch.manual_seed(3)
        gc = GlobalContext(8, 2)
        anchors = anchor_mask(4, 4)
        local = torch.randn(1, 8, 4, 4)
        out = gc(local, anchors)
        perturbed = local.clone()
        na = (~anchors).nonzero()
        tgt = na[3]
        perturbed[:, :, tgt[0], tgt[1]] += 10.0
        out2 = gc(perturbed, anchors)
        changed = (out != out2).any(dim=1)[0]
        assert bool(changed[tgt[0], tgt[1]])
        changed[tgt[0], tgt[1]] = False
        assert not bool(changed.any())

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divide"):
            GlobalContext(10, 4)

    def test_anchor_latents_inform_keys_without_breaking_causality(self):
        # with the anchor-latent embedding, perturbing a decoded anchor
        # changes the keys (outputs move), while perturbing the zeroed
        # non-anchor slots of the visible map still changes nothing
        torch.manual_seed(4)
        gc = GlobalContext(8, 2, latent_channels=4)
        anchors = anchor_mask(4, 4)
        vis = torch.randn(1, 4, 4, 4) * anchors[None, None].float()
        local = torch.randn(1, 8, 4, 4)
        out = gc(local, anchors, vis)
        vis2 = vis.clone()
        a0 = anchors.nonzero()[0]
        vis2[:, :, a0[0], a0[1]] += 1.0
        out2 = gc(local, anchors, vis2)
        assert not torch.equal(out[:, :, ~anchors], out2[:, :, ~anchors])
        vis3 = vis.clone()
        n0 = (~anchors).nonzero()[0]
        vis3[:, :, n0[0], n0[1]] += 0.0  # non-anchor slots stay zero by contract
        assert torch.equal(gc(local, anchors, vis3), out)


class TestScheduleCausality:
    def test_stream_count_is_segments_times_passes(self):
        em = _em()
        coded = em.compress(torch.randn(1, 64, 8, 8) * 0.7)
        assert len(coded.streams) == 2 * len(em.plan) == 10

    def test_anchor_params_ignore_current_segment_content(self):
        em = _em()
        torch.manual_seed(5)
        z_hat = round_quantize(torch.randn(1, em.prior.channels, 2, 2) * 2)
        hyper = em._hyper_features(z_hat, 8, 8)
        prev = [torch.randn(1, 8, 8, 8)]
        ch = em._segment_channel_ctx(1, prev, hyper)
        mu1, s1 = em._pass_params(1, hyper, ch, None, None)
        mu2, s2 = em._pass_params(1, hyper, ch, None, None)
        assert torch.equal(mu1, mu2) and torch.equal(s1, s2)

    def test_non_anchor_params_ignore_non_anchor_latents(self):
        em = _em()
        torch.manual_seed(6)
        z_hat = round_quantize(torch.randn(1, em.prior.channels, 2, 2) * 2)
        hyper = em._hyper_features(z_hat, 8, 8)
        anchors = anchor_mask(8, 8)
        ch = em._segment_channel_ctx(0, [], hyper)
        y_seg = torch.randn(1, 8, 8, 8)
        vis = y_seg * anchors[None, None].to(y_seg.dtype)
        local, global_ = em._spatial_ctx(0, vis, anchors)
        mu_a, s_a = em._pass_params(0, hyper, ch, local, global_)
        # garbage at non-anchor latent positions does not reach the inputs
        y2 = y_seg.clone()
        y2[:, :, ~anchors] = 999.0
        vis2 = y2 * anchors[None, None].to(y2.dtype)
        local2, global2 = em._spatial_ctx(0, vis2, anchors)
        mu_b, s_b = em._pass_params(0, hyper, ch, local2, global2)
        assert torch.equal(mu_a, mu_b) and torch.equal(s_a, s_b)

    def test_channel_context_zero_for_first_segment(self):
        em = _em()
        hyper = torch.randn(1, 128, 4, 4)
        ctx = em._segment_channel_ctx(0, [], hyper)
        assert torch.all(ctx == 0)
        assert ctx.shape == (1, 2 * em.plan[0], 4, 4)

    def test_sigma_lower_bounded_everywhere(self):
        em = _em()
        out = em(torch.randn(1, 64, 8, 8), training=False)
        assert torch.all(out["sigma"] >= 1e-2)

    def test_anchor_merged_params_ignore_spatial_ctx(self):
        # merged (mu, sigma) at anchors must equal the zero-context pass
        em = _em()
        y = torch.randn(1, 64, 8, 8) * 0.6
        out = em(y, training=False)
        anchors = anchor_mask(8, 8)
        z_hat = round_quantize(em.hyper_encoder(y))
        hyper = em._hyper_features(z_hat, 8, 8)
        ch = em._segment_channel_ctx(0, [], hyper)
        mu_a, s_a = em._pass_params(0, hyper, ch, None, None)
        assert torch.equal(out["mu"][:, :8][:, :, anchors], mu_a[:, :, anchors])


@pytest.mark.parametrize("mean_offset", [True, False], ids=["mean_offset", "plain_round"])
class TestCodingRoundTrip:
    def test_bitwise_round_trip_and_blind_params(self, mean_offset):
        em = _em(mean_offset=mean_offset)
        y = torch.randn(1, 64, 8, 8, generator=torch.Generator().manual_seed(2)) * 0.8
        coded = em.compress(y)
        y_hat, z_hat, dec_params = em.decompress(
            coded.streams, coded.z_stream, (8, 8), return_params=True
        )
        assert torch.equal(coded.y_hat, y_hat)
        assert torch.equal(coded.z_hat, z_hat)
        enc_params = em.schedule_params(y)
        assert len(enc_params) == len(dec_params) == 10
        for (mu_e, s_e), (mu_d, s_d) in zip(enc_params, dec_params):
            assert torch.equal(mu_e, mu_d) and torch.equal(s_e, s_d)

    def test_eval_forward_matches_compress_single_code_path(self, mean_offset):
        em = _em(mean_offset=mean_offset)
        y = torch.randn(1, 64, 8, 8, generator=torch.Generator().manual_seed(3)) * 0.8
        coded = em.compress(y)
        out = em(y, training=False)
        assert torch.equal(out["y_likelihood"], coded.likelihood)
        assert torch.equal(out["y_hat"], coded.y_hat)

    def test_plain_mode_reconstruction_is_integer(self, mean_offset):
        em = _em(mean_offset=mean_offset)
        y = torch.randn(1, 64, 8, 8) * 0.8
        coded = em.compress(y)
        if mean_offset:
            assert not torch.all(coded.y_hat == coded.y_hat.round())
        else:
            assert torch.all(coded.y_hat == round_quantize(y))


class TestHyperShapes:
    def test_hyper_downsample_and_feature_shape(self):
        em = _em(latent_channels=192)
        y = torch.randn(1, 192, 16, 16) * 0.5
        z = em.hyper_encoder(y)
        assert z.shape == (1, em.prior.channels, 4, 4)
        feats = em._hyper_features(round_quantize(z), 16, 16)
        assert feats.shape == (1, 384, 16, 16)

    def test_odd_latent_shapes_supported(self):
        em = _em()
        y = torch.randn(1, 64, 6, 10) * 0.5
        coded = em.compress(y)
        y_hat = em.decompress(coded.streams, coded.z_stream, (6, 10))
        assert torch.equal(coded.y_hat, y_hat)

    def test_training_forward_shapes(self):
        em = _em()
        out = em(torch.randn(2, 64, 8, 8), training=True,
                 generator=torch.Generator().manual_seed(0))
        assert out["y_hat"].shape == (2, 64, 8, 8)
        assert out["y_likelihood"].shape == (2, 64, 8, 8)
        assert out["z_likelihood"].shape[1] == em.prior.channels
        assert torch.all(out["y_likelihood"] > 0)
