import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icae.metrics import MetricRow, aggregate, bpp, ms_ssim, mse, psnr

from oracles import column_means, ms_ssim_direct


def rand_image(seed, h=180, w=180, channels=3):
    rng = np.random.default_rng(seed)
    shape = (h, w, channels) if channels else (h, w)
    return rng.integers(0, 256, size=shape).astype(np.uint8)


class TestMse:
    def test_identical(self):
        a = rand_image(0)
        assert mse(a, a) == 0.0

    def test_unit_offset(self):
        a = rand_image(1, 32, 32)
        a = np.clip(a, 0, 254)
        assert mse(a, a + 1) == 1.0

    def test_against_extended_precision_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.random((64, 64, 3)) * 255
        b = rng.random((64, 64, 3)) * 255
        oracle = math.fsum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert mse(a, b) == pytest.approx(oracle, rel=1e-10)

    def test_dimension_mismatch_rejected(self):
        # guards against silently comparing images that lost a row or column
        with pytest.raises(ValueError, match="dimensions differ"):
            mse(np.zeros((10, 10, 3)), np.zeros((9, 10, 3)))


class TestPsnr:
    def test_unit_mse(self):
        a = np.zeros((16, 16), dtype=np.uint8)
        b = np.ones((16, 16), dtype=np.uint8)
        assert psnr(a, b) == pytest.approx(48.1308, abs=1e-3)
        assert psnr(a, b) == pytest.approx(20 * math.log10(255.0), abs=1e-9)

    def test_identical_sentinel(self):
        a = rand_image(3)
        assert psnr(a, a) == 100.0

    def test_full_scale_error(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 255.0)
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        a, b = rand_image(4), rand_image(5)
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreasing_in_mse(self):
        a = np.zeros((32, 32))
        values = [psnr(a, np.full((32, 32), level)) for level in (1.0, 2.0, 4.0, 16.0, 64.0)]
        assert all(x > y for x, y in zip(values, values[1:]))


class TestMsSsim:
    def test_self_similarity_exact(self):
        a = rand_image(6)
        assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_constant_images(self):
        a = np.full((180, 180, 3), 77, dtype=np.uint8)
        assert ms_ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_midcontrast_image(self):
        rng = np.random.default_rng(7)
        a = rng.integers(60, 196, size=(180, 180)).astype(np.uint8)
        b = (255 - a).astype(np.uint8)
        value = ms_ssim(a, b)
        assert value < 0.5
        assert value == pytest.approx(ms_ssim_direct(a, b), abs=1e-9)

    def test_noisy_pair_matches_direct_formula_oracle(self):
        rng = np.random.default_rng(8)
        a = rng.integers(0, 256, size=(180, 200, 3)).astype(np.uint8)
        noise = rng.normal(0, 20, size=a.shape)
        b = np.clip(a.astype(np.float64) + noise, 0, 255).astype(np.uint8)
        assert ms_ssim(a, b) == pytest.approx(ms_ssim_direct(a, b), abs=1e-9)

    def test_symmetry(self):
        a, b = rand_image(9), rand_image(10)
        assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), abs=1e-12)

    def test_undersized_rejected_with_requirement(self):
        with pytest.raises(ValueError, match="176"):
            ms_ssim(np.zeros((100, 300)), np.zeros((100, 300)))

    def test_bounds(self):
        a, b = rand_image(11), rand_image(12)
        assert 0.0 <= ms_ssim(a, b) <= 1.0


class TestBpp:
    def test_kodak_sized(self):
        assert bpp(1000, 512, 768) == pytest.approx(0.020345052083333332, abs=1e-9)
        assert bpp(1000, 512, 768) == pytest.approx(8 * 1000 / (512 * 768), abs=1e-12)

    def test_zero_bytes(self):
        assert bpp(0, 100, 100) == 0.0

    def test_zero_area_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            bpp(10, 0, 100)


class TestAggregate:
    def row(self, i):
        return MetricRow(f"img{i:02d}.png", 0.4 + 0.01 * i, 30.0 + 0.1 * i, 0.95 + 0.001 * i, 0.1 * i, 0.2 * i)

    def test_single_row_average_is_row(self):
        row = self.row(1)
        report = aggregate([row])
        assert report.average.values() == pytest.approx(row.values())
        assert report.average.name == "average"

    def test_24_rows_against_spreadsheet_oracle(self):
        rows = [self.row(i) for i in range(24)]
        report = aggregate(rows)
        assert list(report.average.values()) == pytest.approx(column_means(rows))
        assert len(report.rows) == 24

    def test_csv_column_order(self):
        report = aggregate([self.row(0)])
        csv = report.to_csv()
        assert csv.splitlines()[0] == "name,bpp,psnr_db,ms_ssim,encode_s,decode_s"
        assert csv.splitlines()[-1].startswith("average,")

    def test_text_table_aligned(self):
        report = aggregate([self.row(i) for i in range(3)])
        lines = report.to_text().splitlines()
        assert lines[0].split()[:4] == ["name", "bpp", "psnr_db", "ms_ssim"]
        assert len(lines) == 1 + 3 + 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            aggregate([])

    def test_invalid_ms_ssim_rejected(self):
        bad = MetricRow("x", 0.1, 30.0, 1.5, 0.0, 0.0)
        with pytest.raises(ValueError, match="ms_ssim"):
            aggregate([bad])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_ms_ssim_self_similarity_property(seed):
    img = rand_image(seed, 176, 176)
    assert ms_ssim(img, img) == pytest.approx(1.0, abs=1e-9)
