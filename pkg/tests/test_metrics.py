import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import distance_transform_cdt

from rosam.data import AnnotationRecord, InstanceAnnotation, tight_bbox
from rosam.errors import InputError
from rosam.metrics import (biou, boundary_region, default_boundary_width,
                           evaluate, iou)

from helpers import random_mask


def brute_iou(p, g):
    inter = sum(1 for y in range(p.shape[0]) for x in range(p.shape[1])
                if p[y, x] and g[y, x])
    union = sum(1 for y in range(p.shape[0]) for x in range(p.shape[1])
                if p[y, x] or g[y, x])
    return 1.0 if union == 0 else inter / union


def brute_band(mask, d):
    """Chebyshev distance transform (with zero-padded border) as an
    independent construction of the boundary band."""
    padded = np.pad(mask.astype(np.uint8), 1)
    dist = distance_transform_cdt(padded, metric="chessboard")[1:-1, 1:-1]
    return mask.astype(bool) & (dist <= d)


def brute_biou(p, g, d):
    pb = p & brute_band(p, d)
    gb = g & brute_band(g, d)
    return brute_iou(pb, gb)


class TestIoU:
    def test_identical(self):
        m = np.zeros((8, 8), bool)
        m[2:6, 2:6] = True
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8), bool)
        a[:2] = True
        b = np.zeros((8, 8), bool)
        b[6:] = True
        assert iou(a, b) == 0.0

    def test_half_overlap(self):
        gt = np.zeros((8, 8), bool)
        gt[:, :] = True
        pred = np.zeros((8, 8), bool)
        pred[:, :4] = True
        assert iou(pred, gt) == 0.5

    def test_empty_conventions(self):
        empty = np.zeros((4, 4), bool)
        full = np.ones((4, 4), bool)
        assert iou(empty, empty) == 1.0
        assert iou(empty, full) == 0.0
        assert iou(full, empty) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            iou(np.zeros((3, 3), bool), np.zeros((4, 4), bool))


class TestBoundaryRegion:
    def test_large_d_band_is_whole_mask(self):
        m = np.zeros((12, 12), bool)
        m[3:9, 3:9] = True
        assert np.array_equal(boundary_region(m, 3), m)

    def test_square_ring(self):
        m = np.ones((10, 10), bool)
        band = boundary_region(m, 1)
        assert band.sum() == 36  # 100 - 8^2, border counts as contour
        assert not band[1:-1, 1:-1].any()

    def test_empty(self):
        assert not boundary_region(np.zeros((5, 5), bool), 2).any()

    def test_monotone_in_d(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m = random_mask(rng)
            b1 = boundary_region(m, 1)
            b3 = boundary_region(m, 3)
            assert not (b1 & ~b3).any()

    def test_d_below_one_rejected(self):
        with pytest.raises(InputError):
            boundary_region(np.ones((4, 4), bool), 0)


class TestBIoU:
    def test_identical(self):
        rng = np.random.default_rng(1)
        m = random_mask(rng)
        assert biou(m, m, 2) == 1.0

    def test_disjoint(self):
        a = np.zeros((12, 12), bool)
        a[:3, :3] = True
        b = np.zeros((12, 12), bool)
        b[8:, 8:] = True
        assert biou(a, b, 2) == 0.0

    def test_equals_iou_when_d_exceeds_inradii(self):
        a = np.zeros((16, 16), bool)
        a[2:9, 3:10] = True
        b = np.zeros((16, 16), bool)
        b[4:12, 5:13] = True
        d = 8  # > both inradii, bands cover the full masks
        assert np.array_equal(boundary_region(a, d), a)
        assert np.array_equal(boundary_region(b, d), b)
        assert biou(a, b, d) == iou(a, b)

    def test_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(2)
        for i in range(100):
            p, g = random_mask(rng), random_mask(rng)
            d = int(rng.integers(1, 5))
            assert np.array_equal(boundary_region(p, d), brute_band(p, d)), i
            assert iou(p, g) == brute_iou(p, g)
            assert biou(p, g, d) == brute_biou(p, g, d)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_metric_symmetry_and_range(seed, d):
    rng = np.random.default_rng(seed)
    a, b = random_mask(rng, 16), random_mask(rng, 16)
    assert iou(a, b) == iou(b, a)
    assert biou(a, b, d) == biou(b, a, d)
    assert 0.0 <= iou(a, b) <= 1.0
    assert 0.0 <= biou(a, b, d) <= 1.0


def test_default_boundary_width():
    assert default_boundary_width((1024, 1024)) == round(0.02 * np.hypot(1024, 1024))
    assert default_boundary_width((4, 4)) == 1


def make_records():
    masks = []
    for spec in [((2, 10), (2, 10)), ((12, 20), (12, 20))]:
        m = np.zeros((24, 24), bool)
        (y0, y1), (x0, x1) = spec
        m[y0:y1, x0:x1] = True
        masks.append(m)
    record = AnnotationRecord(
        image_path="img.png", image_size=(24, 24),
        objects=[InstanceAnnotation(box=tight_bbox(m), mask=m, category=c)
                 for m, c in zip(masks, ["ship", "plane"])])
    return [record], masks


class TestEvaluate:
    def test_perfect_predictions(self):
        records, masks = make_records()
        preds = {("img.png", i): m for i, m in enumerate(masks)}
        report = evaluate(preds, records, d=2)
        assert report.mean_iou == 1.0 and report.mean_biou == 1.0
        assert report.per_category["ship"]["iou"] == 1.0

    def test_all_empty_predictions(self):
        records, masks = make_records()
        preds = {("img.png", i): np.zeros((24, 24), bool) for i in range(2)}
        report = evaluate(preds, records, d=2)
        assert report.mean_iou == 0.0 and report.mean_biou == 0.0

    def test_mean_of_two(self):
        records, masks = make_records()
        half0 = masks[0].copy()
        xs = np.nonzero(half0.any(axis=0))[0]
        half0[:, xs[len(xs) // 2]:] = False  # keep left half
        preds = {("img.png", 0): half0, ("img.png", 1): masks[1]}
        report = evaluate(preds, records, d=2)
        row_ious = sorted(r.iou for r in report.rows)
        assert report.mean_iou == pytest.approx(np.mean(row_ious))
        assert report.mean_iou < 1.0

    def test_missing_prediction_flagged_as_zero(self):
        records, masks = make_records()
        preds = {("img.png", 0): masks[0]}
        report = evaluate(preds, records, d=2)
        missing = [r for r in report.rows if r.missing]
        assert len(missing) == 1
        assert missing[0].iou == 0.0 and missing[0].biou == 0.0
        assert report.mean_iou == pytest.approx(0.5)

    def test_report_files(self, tmp_path):
        records, masks = make_records()
        preds = {("img.png", i): m for i, m in enumerate(masks)}
        report = evaluate(preds, records, d=3)
        report.write(tmp_path)
        assert (tmp_path / "report.csv").is_file()
        summary = (tmp_path / "summary.json").read_text()
        assert '"d": 3' in summary and '"n_objects": 2' in summary
