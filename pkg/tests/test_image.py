import numpy as np
import pytest

from deepgmm.errors import ShapeError, ZeroVariance
from deepgmm.image import (
    MultiChannelImage,
    PixelDomain,
    ResponsibilityField,
    SegmentationMask,
    argmax_labeling,
    check_label_count,
    normalize_image,
)

from conftest import image_from


def field(rows):
    rows = np.asarray(rows, dtype=float)
    return ResponsibilityField(PixelDomain.full(1, rows.shape[0]), rows)


class TestArgmax:
    def test_unique_max(self):
        assert argmax_labeling(field([[0.1, 0.7, 0.2]])).labels.tolist() == [1]

    def test_tie_goes_to_smallest_index(self):
        assert argmax_labeling(field([[0.5, 0.5]])).labels.tolist() == [0]

    def test_one_hot_rows(self):
        w = np.zeros((5, 3))
        w[:, 2] = 1
        assert (argmax_labeling(field(w)).labels == 2).all()


class TestNormalize:
    def test_two_pixels(self):
        out = normalize_image(image_from([[1.0, 3.0]]))
        np.testing.assert_allclose(out.pixels[:, 0], [-1.0, 1.0])

    def test_fixed_point(self, rng):
        img = normalize_image(image_from(rng.normal(size=(2, 5, 6))))
        again = normalize_image(img)
        np.testing.assert_allclose(again.values, img.values, atol=1e-6)
        np.testing.assert_allclose(img.pixels.mean(axis=0), 0, atol=1e-6)
        np.testing.assert_allclose(img.pixels.std(axis=0), 1, atol=1e-6)

    def test_constant_channel(self):
        with pytest.raises(ZeroVariance):
            normalize_image(image_from([[5.0, 5.0]]))

    def test_outside_roi_is_zero_and_ignored(self):
        roi = np.array([[1, 1, 0]], dtype=bool)
        img = normalize_image(image_from([[1.0, 3.0, 100.0]], roi))
        np.testing.assert_allclose(img.values[0], [[-1.0, 1.0, 0.0]])


class TestContainers:
    def test_empty_roi_rejected(self):
        with pytest.raises(ShapeError):
            PixelDomain(np.zeros((2, 2), dtype=bool))

    def test_flatten_round_trip(self, rng):
        roi = rng.random((4, 5)) < 0.6
        roi[0, 0] = True
        d = PixelDomain(roi)
        grid = rng.normal(size=(3, 4, 5))
        flat = d.flatten(grid)
        assert flat.shape == (d.n_pixels, 3)
        back = d.unflatten(flat, fill=0.0)
        np.testing.assert_array_equal(back[:, roi], grid[:, roi])

    def test_row_major_order(self):
        roi = np.array([[0, 1], [1, 1]], dtype=bool)
        d = PixelDomain(roi)
        assert d.flatten(np.arange(4).reshape(2, 2)).tolist() == [1, 2, 3]

    def test_nonfinite_in_roi_rejected(self):
        with pytest.raises(ValueError):
            image_from([[1.0, np.nan]])

    def test_nonfinite_outside_roi_allowed(self):
        img = image_from([[1.0, np.nan]], np.array([[True, False]]))
        assert img.n_pixels == 1

    def test_pixels_read_only(self):
        img = image_from([[1.0, 2.0]])
        with pytest.raises(ValueError):
            img.pixels[0, 0] = 5

    def test_responsibility_row_sum_checked(self):
        with pytest.raises(ValueError):
            field([[0.5, 0.6]])

    def test_responsibility_range_checked(self):
        with pytest.raises(ValueError):
            field([[1.5, -0.5]])

    def test_mask_label_range(self):
        with pytest.raises(ValueError):
            SegmentationMask(PixelDomain.full(1, 2), [0, 2], 2)

    def test_label_set_needs_two(self):
        with pytest.raises(ValueError):
            check_label_count(1)

    def test_multichannel_shape(self):
        img = MultiChannelImage.from_array(np.zeros((3, 4, 5)))
        assert img.channels == 3 and img.pixels.shape == (20, 3)
