"""Interchange contract between the reference coder and the native
backend: all four encode/decode pairings must be bit-identical. The
whole module skips when the native library has not been built
(cargo build --release inside native/)."""

import time

import numpy as np
import pytest

from ssfwin import _native
from ssfwin import entropy_coding as ec

pytestmark = pytest.mark.skipif(
    not _native.is_available(), reason="native coder library not built"
)


@pytest.fixture(scope="module")
def gauss_cdf():
    return ec.build_cdf_gaussian()


def _random_case(rng, cdf, n):
    rows = rng.integers(0, cdf.n_rows, n)
    spread = rng.choice([2, 30, 700])
    symbols = rng.integers(-spread, spread + 1, n)
    return symbols, rows


class TestInterchange:
    def test_encoders_byte_identical(self, gauss_cdf, rng):
        for _ in range(8):
            symbols, rows = _random_case(rng, gauss_cdf, int(rng.integers(0, 3000)))
            ref = ec.encode_symbols(symbols, gauss_cdf, rows, backend="reference")
            nat = ec.encode_symbols(symbols, gauss_cdf, rows, backend="native")
            assert ref == nat

    def test_four_pairings_on_large_stream(self, gauss_cdf, rng):
        n = 1_000_000
        symbols, rows = _random_case(rng, gauss_cdf, n)
        t0 = time.time()
        ref_stream = ec.encode_symbols(symbols, gauss_cdf, rows, backend="reference")
        t_ref_enc = time.time() - t0
        t0 = time.time()
        nat_stream = ec.encode_symbols(symbols, gauss_cdf, rows, backend="native")
        t_nat_enc = time.time() - t0
        assert ref_stream == nat_stream

        t0 = time.time()
        out_rr = ec.decode_symbols(ref_stream, gauss_cdf, rows, n, backend="reference")
        t_ref_dec = time.time() - t0
        t0 = time.time()
        out_nn = ec.decode_symbols(nat_stream, gauss_cdf, rows, n, backend="native")
        t_nat_dec = time.time() - t0
        out_rn = ec.decode_symbols(ref_stream, gauss_cdf, rows, n, backend="native")
        out_nr = ec.decode_symbols(nat_stream, gauss_cdf, rows, n, backend="reference")
        for out in (out_rr, out_nn, out_rn, out_nr):
            np.testing.assert_array_equal(out, symbols)

        # informational throughput report, not a hard gate
        print(
            f"\n[throughput 1e6 symbols] encode: reference {n / t_ref_enc / 1e6:.2f} "
            f"Msym/s, native {n / t_nat_enc / 1e6:.2f} Msym/s "
            f"({t_ref_enc / t_nat_enc:.0f}x); decode: reference "
            f"{n / t_ref_dec / 1e6:.2f} Msym/s, native {n / t_nat_dec / 1e6:.2f} "
            f"Msym/s ({t_ref_dec / t_nat_dec:.0f}x)"
        )

    def test_empty_stream_identical(self, gauss_cdf):
        ref = ec.encode_symbols(np.array([]), gauss_cdf, np.array([]), backend="reference")
        nat = ec.encode_symbols(np.array([]), gauss_cdf, np.array([]), backend="native")
        assert ref == nat == b"\x00"

    def test_escape_heavy_streams_identical(self, gauss_cdf, rng):
        n = 5000
        rows = np.zeros(n, dtype=int)  # tiniest row: almost everything escapes
        symbols = rng.integers(-10 ** 6, 10 ** 6, n)
        ref = ec.encode_symbols(symbols, gauss_cdf, rows, backend="reference")
        nat = ec.encode_symbols(symbols, gauss_cdf, rows, backend="native")
        assert ref == nat
        np.testing.assert_array_equal(
            ec.decode_symbols(nat, gauss_cdf, rows, n, backend="native"), symbols
        )

    def test_factorized_rows_identical(self, rng):
        import torch

        from ssfwin.entropy_model import FactorizedPrior

        torch.manual_seed(0)
        prior = FactorizedPrior(8)
        cdf = prior.build_cdf()
        n = 4000
        rows = rng.integers(0, 8, n)
        symbols = rng.integers(-12, 12, n)
        ref = ec.encode_symbols(symbols, cdf, rows, backend="reference")
        nat = ec.encode_symbols(symbols, cdf, rows, backend="native")
        assert ref == nat


class TestNativeErrors:
    def test_corrupt_stream_same_error_class(self, gauss_cdf, rng):
        symbols, rows = _random_case(rng, gauss_cdf, 200)
        blob = bytearray(ec.encode_symbols(symbols, gauss_cdf, rows, backend="native"))
        blob[len(blob) // 2] ^= 0x10
        with pytest.raises(ec.CorruptStreamError):
            ec.decode_symbols(bytes(blob), gauss_cdf, rows, 200, backend="native")

    def test_row_range_error(self, gauss_cdf):
        with pytest.raises(ec.CoderError):
            _native.encode(np.array([0], dtype=np.int64), gauss_cdf,
                           np.array([999], dtype=np.int64))

    def test_count_mismatch_error(self, gauss_cdf, rng):
        symbols, rows = _random_case(rng, gauss_cdf, 50)
        blob = ec.encode_symbols(symbols, gauss_cdf, rows, backend="native")
        with pytest.raises(ec.CorruptStreamError):
            ec.decode_symbols(blob, gauss_cdf, rows[:49], 49, backend="native")


class TestEndToEndWithNative:
    def test_gop_closed_loop_native_backend(self):
        import torch

        from ssfwin.data_model import Clip, Frame, ModelConfig
        from ssfwin.video_codec import VideoModel, decode_gop, encode_gop

        torch.manual_seed(0)
        model = VideoModel(ModelConfig.mini()).eval()
        rng = np.random.default_rng(1)
        clip = Clip(frames=tuple(
            Frame(pixels=rng.random((32, 32), dtype=np.float32)) for _ in range(2)
        ))
        c_ref, recons_ref = encode_gop(model, clip, backend="reference")
        c_nat, recons_nat = encode_gop(model, clip, backend="native")
        assert c_ref.serialize() == c_nat.serialize()
        _, dec = decode_gop(model, c_nat, backend="reference")
        for a, b in zip(recons_nat, dec):
            assert torch.equal(a, b)
