"""Gradient-weighted heatmaps, branch divergence, PGM export."""

import numpy as np
import pytest

from chromatile.errors import UsageError
from chromatile.explain import (
    Heatmap,
    divergence_score,
    gradcam,
    write_composite_pgm,
    write_pgm,
)
from chromatile.models import EncoderConfig, build_encoder, build_head
from chromatile.numerics import Tensor, global_avg_pool, mul


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


TINY = EncoderConfig(in_channels=2, stage_widths=(4, 8), input_extent=16)


def tiny_pair(n_classes=3, seed=0):
    encoder = build_encoder(TINY, seed=seed)
    head = build_head(TINY.bottleneck_width(), n_classes, seed=seed + 1)
    return encoder, head


class ToyDiagonalModel:
    """Per-channel gain (a diagonal 1x1 conv) followed by average pooling.

    The class score is y_c = sum_k v[k, c] * mean_ij(A_k) + b_c for the
    activation A_k = gain_k * x_k, so the spatially averaged gradient has
    the closed form alpha_k = v[k, c] / (E * E).
    """

    def __init__(self, gains):
        self.gains = Tensor(
            np.asarray(gains, dtype=np.float64).reshape(1, -1, 1, 1),
            requires_grad=True,
        )

    def forward(self, x, mode="eval"):
        a = mul(x, self.gains)
        return [a], global_avg_pool(a)


def toy_setup(gains, v, n_classes=2):
    model = ToyDiagonalModel(gains)
    head = build_head(len(gains), n_classes, seed=0)
    head.w.data[:] = np.asarray(v, dtype=np.float64)
    head.b.data[:] = 0.0
    return model, head


def toy_expected_grid(gains, v, x, class_index):
    e = x.shape[-1]
    a = np.asarray(gains, dtype=np.float64).reshape(-1, 1, 1) * x
    alpha = np.asarray(v, dtype=np.float64)[:, class_index] / (e * e)
    cam = np.maximum((alpha[:, None, None] * a).sum(axis=0), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


class TestGradcam:
    def test_zero_head_row_gives_zero_map(self):
        encoder, head = tiny_pair()
        head.w.data[:, 1] = 0.0
        heatmap = gradcam(encoder, head, rng(0).normal(size=(2, 16, 16)), 1)
        assert heatmap.grid.shape == (16, 16)
        assert np.all(heatmap.grid == 0.0)

    def test_toy_model_matches_closed_form(self):
        gains = (2.0, -1.0, 0.5)
        v = [[1.0, 0.5], [0.2, -0.3], [-0.4, 0.8]]
        model, head = toy_setup(gains, v)
        x = rng(1).normal(size=(3, 4, 4))
        for class_index in (0, 1):
            heatmap = gradcam(model, head, x, class_index)
            want = toy_expected_grid(gains, v, x, class_index)
            assert np.allclose(heatmap.grid, want, atol=1e-6)

    def test_toy_hot_pixel_is_heatmap_argmax(self):
        gains = (1.0, 0.5)
        v = [[1.0], [1.0]]
        model, head = toy_setup(gains, v, n_classes=1)
        x = np.zeros((2, 6, 6))
        x[:, 4, 2] = 1.0
        heatmap = gradcam(model, head, x, 0)
        assert heatmap.grid[4, 2] == 1.0
        assert np.unravel_index(np.argmax(heatmap.grid), (6, 6)) == (4, 2)
        assert heatmap.grid.sum() == 1.0  # all other cells exactly zero

    def test_positive_head_rescale_leaves_map_unchanged(self):
        encoder, head = tiny_pair(seed=3)
        x = rng(2).normal(size=(2, 16, 16)).astype(np.float32)
        base = gradcam(encoder, head, x, 0).grid
        head.w.data[:, 0] *= 7.5
        head.b.data[0] *= 7.5
        scaled = gradcam(encoder, head, x, 0).grid
        assert np.allclose(base, scaled, atol=1e-9)

    def test_grid_nonnegative_normalized_and_upsampled(self):
        encoder, head = tiny_pair(seed=4)
        x = rng(3).normal(size=(2, 16, 16)).astype(np.float32)
        heatmap = gradcam(encoder, head, x, 2, branch="rgb")
        grid = heatmap.grid
        assert grid.shape == (16, 16)
        assert grid.min() >= 0.0
        assert grid.max() == 1.0
        # nearest upsampling from the 4x4 stage map leaves 4x4 constant blocks
        blocks = grid.reshape(4, 4, 4, 4)
        assert np.all(blocks == blocks[:, :1, :, :1])
        assert heatmap.branch == "rgb" and heatmap.class_index == 2
        heatmap.validate()

    def test_accepts_leading_batch_axis_of_one(self):
        encoder, head = tiny_pair()
        x = rng(4).normal(size=(2, 16, 16)).astype(np.float32)
        a = gradcam(encoder, head, x, 0).grid
        b = gradcam(encoder, head, x[None], 0).grid
        assert np.array_equal(a, b)

    def test_invalid_class_errors(self):
        encoder, head = tiny_pair(n_classes=3)
        x = np.zeros((2, 16, 16), dtype=np.float32)
        with pytest.raises(UsageError):
            gradcam(encoder, head, x, 3)
        with pytest.raises(UsageError):
            gradcam(encoder, head, x, -1)

    def test_batch_of_many_errors(self):
        encoder, head = tiny_pair()
        with pytest.raises(UsageError):
            gradcam(encoder, head, np.zeros((2, 2, 16, 16), dtype=np.float32), 0)

    def test_unknown_branch_tag_errors(self):
        encoder, head = tiny_pair()
        with pytest.raises(UsageError):
            gradcam(encoder, head, np.zeros((2, 16, 16)), 0, branch="thermal")


class TestDivergenceScore:
    def heatmap(self, grid, branch="rgb"):
        return Heatmap(np.asarray(grid, dtype=np.float64), 0, branch)

    def test_identical_maps_score_zero(self):
        g = rng(5).random((8, 8))
        assert divergence_score(self.heatmap(g), self.heatmap(g)) == 0.0

    def test_disjoint_supports_score_one(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[:2] = 1.0
        b[2:] = 1.0
        assert divergence_score(self.heatmap(a), self.heatmap(b)) == 1.0

    def test_scale_invariance(self):
        g = rng(6).random((8, 8))
        score = divergence_score(self.heatmap(g), self.heatmap(0.5 * g))
        assert abs(score) < 1e-12

    def test_both_zero_errors(self):
        z = self.heatmap(np.zeros((4, 4)))
        with pytest.raises(UsageError):
            divergence_score(z, z)

    def test_single_zero_is_maximal(self):
        z = self.heatmap(np.zeros((4, 4)))
        g = self.heatmap(rng(7).random((4, 4)))
        assert divergence_score(z, g) == 1.0
        assert divergence_score(g, z) == 1.0

    def test_extent_mismatch_errors(self):
        with pytest.raises(UsageError):
            divergence_score(
                self.heatmap(np.ones((4, 4))), self.heatmap(np.ones((8, 8)))
            )

    def test_clamped_to_unit_interval(self):
        r = rng(8)
        for _ in range(50):
            a = self.heatmap(r.random((6, 6)))
            b = self.heatmap(r.random((6, 6)))
            score = divergence_score(a, b)
            assert 0.0 <= score <= 1.0


class TestHeatmapValidate:
    def test_rejects_non_square(self):
        with pytest.raises(UsageError):
            Heatmap(np.zeros((4, 5)), 0, "rgb").validate()

    def test_rejects_out_of_range_values(self):
        with pytest.raises(UsageError):
            Heatmap(np.full((4, 4), 1.5), 0, "rgb").validate()

    def test_rejects_unknown_branch(self):
        with pytest.raises(UsageError):
            Heatmap(np.zeros((4, 4)), 0, "thermal").validate()


class TestPgmExport:
    def test_pgm_bytes(self, tmp_path):
        grid = np.array([[0.0, 1.0], [0.5, 0.25]])
        path = tmp_path / "map.pgm"
        write_pgm(path, grid)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert blob[len(b"P5\n2 2\n255\n") :] == bytes([0, 255, 128, 64])

    def test_composite_layout(self, tmp_path):
        heatmap = Heatmap(np.zeros((3, 3)), 0, "rgb")
        preview = np.ones((3, 3))
        path = tmp_path / "composite.pgm"
        write_composite_pgm(path, preview, heatmap)
        blob = path.read_bytes()
        header = b"P5\n7 3\n255\n"
        assert blob.startswith(header)
        pixels = np.frombuffer(blob[len(header) :], np.uint8).reshape(3, 7)
        assert np.all(pixels[:, :3] == 255)  # preview
        assert np.all(pixels[:, 3] == 255)  # separator bar
        assert np.all(pixels[:, 4:] == 0)  # heatmap

    def test_composite_extent_mismatch_errors(self, tmp_path):
        heatmap = Heatmap(np.zeros((4, 4)), 0, "rgb")
        with pytest.raises(UsageError):
            write_composite_pgm(tmp_path / "c.pgm", np.ones((3, 3)), heatmap)

    def test_rejects_non_2d_grid(self, tmp_path):
        with pytest.raises(UsageError):
            write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 2)))
