import numpy as np
import pytest

from matselect import encoder as enc
from matselect import pyramid as pyr
from matselect.autodiff import Tensor
from matselect.core import make_rng, resample_area


def toy():
    return enc.ToyEncoder.create(enc.TOY_PROFILE, make_rng(200))


class TestBuildPyramid:
    def test_1024_input_external_profile(self):
        img = make_rng(1).random((1024, 1024, 3))
        levels = pyr.build_pyramid(img, pyr.PyramidConfig(), enc.EXTERNAL_PROFILE)
        assert levels.level_images[0].shape == (518, 518, 3)
        assert levels.level_images[1].shape == (1036, 1036, 3)
        assert len(levels.tiles[0]) == 1
        assert len(levels.tiles[1]) == 4
        assert all(t.shape == (518, 518, 3) for _, _, t in levels.tiles[1])

    def test_native_input_single_level_untouched(self):
        img = make_rng(2).random((518, 518, 3))
        levels = pyr.build_pyramid(img, pyr.PyramidConfig(levels=1), enc.EXTERNAL_PROFILE)
        assert len(levels.tiles) == 1
        assert len(levels.tiles[0]) == 1
        np.testing.assert_array_equal(levels.tiles[0][0][2], img)

    def test_anisotropic_input_tiles_partition_level(self):
        img = make_rng(3).random((700, 900, 3))
        levels = pyr.build_pyramid(img, pyr.PyramidConfig(), enc.EXTERNAL_PROFILE)
        level2 = levels.level_images[1]
        assert level2.shape == (1036, 1036, 3)
        assert len(levels.tiles[1]) == 4
        seen = np.zeros(level2.shape[:2], dtype=int)
        for row, col, tile in levels.tiles[1]:
            np.testing.assert_array_equal(tile, level2[row * 518:(row + 1) * 518,
                                                       col * 518:(col + 1) * 518])
            seen[row * 518:(row + 1) * 518, col * 518:(col + 1) * 518] += 1
        np.testing.assert_array_equal(seen, 1)  # disjoint and covering

    def test_split_then_reassemble_level_image(self):
        img = make_rng(4).random((200, 160, 3))
        levels = pyr.build_pyramid(img, pyr.PyramidConfig(), enc.TOY_PROFILE)
        stitched = pyr.reassemble_tiles(
            [(r, c, Tensor(t)) for r, c, t in levels.tiles[1]]).data
        np.testing.assert_array_equal(stitched, levels.level_images[1])


class TestEncodePyramid:
    def test_tile_count_toy_profile(self):
        e = toy()
        levels = pyr.build_pyramid(make_rng(5).random((112, 112, 3)),
                                   pyr.PyramidConfig(), enc.TOY_PROFILE)
        encoded = pyr.encode_pyramid(levels, e)
        assert e.forward_tiles == 5  # 1 + 4
        assert len(encoded[0]) == 1 and len(encoded[1]) == 4
        for _, _, out in encoded[1]:
            assert [f.shape for f in out.features] == [(7, 7, 32)] * 4

    def test_mosaic_tiles_encode_identically(self):
        e = toy()
        base = make_rng(6).random((56, 56, 3))
        mosaic = np.tile(base, (2, 2, 1))
        levels = pyr.PyramidLevels(level_images=[base, mosaic],
                                   tiles=[[(0, 0, base)], pyr.split_tiles(mosaic, 2)])
        encoded = pyr.encode_pyramid(levels, e)
        first = encoded[1][0][2].features[1].data
        for _, _, out in encoded[1][1:]:
            np.testing.assert_array_equal(out.features[1].data, first)

    def test_mosaic_reassembled_features_periodic(self):
        e = toy()
        base = make_rng(7).random((56, 56, 3))
        mosaic = np.tile(base, (2, 2, 1))
        levels = pyr.PyramidLevels(level_images=[base, mosaic],
                                   tiles=[[(0, 0, base)], pyr.split_tiles(mosaic, 2)])
        encoded = pyr.encode_pyramid(levels, e)
        stitched = pyr.reassemble_tiles([(r, c, out.features[0])
                                         for r, c, out in encoded[1]]).data
        np.testing.assert_array_equal(stitched[:7, :7], stitched[7:, :7])
        np.testing.assert_array_equal(stitched[:7, :7], stitched[:7, 7:])
        np.testing.assert_array_equal(stitched[:7, :7], stitched[7:, 7:])

    def test_single_level_config(self):
        e = toy()
        levels = pyr.build_pyramid(make_rng(8).random((80, 80, 3)),
                                   pyr.PyramidConfig(levels=1), enc.TOY_PROFILE)
        encoded = pyr.encode_pyramid(levels, e)
        assert len(encoded) == 1 and e.forward_tiles == 1


class TestReassemble:
    def test_quadrant_constants(self):
        tiles = [(r, c, Tensor(np.full((3, 3, 2), float(1 + r * 2 + c))))
                 for r in range(2) for c in range(2)]
        out = pyr.reassemble_tiles(tiles).data
        assert out.shape == (6, 6, 2)
        np.testing.assert_array_equal(out[:3, :3], 1.0)
        np.testing.assert_array_equal(out[:3, 3:], 2.0)
        np.testing.assert_array_equal(out[3:, :3], 3.0)
        np.testing.assert_array_equal(out[3:, 3:], 4.0)

    def test_inverse_of_split(self):
        grid = make_rng(9).random((8, 8, 5))
        tiles = [(r, c, Tensor(t)) for r, c, t in pyr.split_tiles(grid, 2)]
        np.testing.assert_array_equal(pyr.reassemble_tiles(tiles).data, grid)

    def test_order_independent(self):
        rng = make_rng(10)
        tiles = [(r, c, Tensor(rng.random((2, 2, 3)))) for r in range(2) for c in range(2)]
        shuffled = [tiles[i] for i in (2, 0, 3, 1)]
        np.testing.assert_array_equal(pyr.reassemble_tiles(tiles).data,
                                      pyr.reassemble_tiles(shuffled).data)

    def test_inconsistent_shapes_rejected(self):
        tiles = [(0, 0, Tensor(np.zeros((2, 2, 1)))), (0, 1, Tensor(np.zeros((2, 3, 1)))),
                 (1, 0, Tensor(np.zeros((2, 2, 1)))), (1, 1, Tensor(np.zeros((2, 2, 1))))]
        with pytest.raises(ValueError):
            pyr.reassemble_tiles(tiles)


class TestAggregate:
    def test_upsample_level1_passthrough_level2(self):
        rng = make_rng(11)
        f1 = Tensor(rng.random((37, 37, 8)))
        f2 = Tensor(rng.random((74, 74, 8)))
        out = pyr.aggregate([f1, f2], 74, 74)
        assert out.shape == (74, 74, 16)
        np.testing.assert_array_equal(out.data[:, :, 8:], f2.data)  # no resampling on level 2

    def test_constant_inputs_stay_constant(self):
        f1 = Tensor(np.full((7, 7, 4), 0.3))
        f2 = Tensor(np.full((14, 14, 4), 0.3))
        out = pyr.aggregate([f1, f2], 10, 10)
        np.testing.assert_allclose(out.data, 0.3, atol=1e-12)

    def test_downsample_to_level1_is_block_mean(self):
        rng = make_rng(12)
        f1 = Tensor(rng.random((7, 7, 4)))
        f2 = Tensor(rng.random((14, 14, 4)))
        out = pyr.aggregate([f1, f2], 7, 7)
        np.testing.assert_array_equal(out.data[:, :, :4], f1.data)
        expected = f2.data.reshape(7, 2, 7, 2, 4).mean(axis=(1, 3))
        np.testing.assert_allclose(out.data[:, :, 4:], expected, atol=1e-12)

    def test_channel_order_level1_first(self):
        f1 = Tensor(np.zeros((4, 4, 3)))
        f2 = Tensor(np.ones((8, 8, 3)))
        out = pyr.aggregate([f1, f2], 8, 8)
        np.testing.assert_array_equal(out.data[:, :, :3], 0.0)
        np.testing.assert_array_equal(out.data[:, :, 3:], 1.0)

    def test_single_level_identity(self):
        f1 = Tensor(make_rng(13).random((7, 7, 6)))
        out = pyr.aggregate([f1], 7, 7)
        np.testing.assert_array_equal(out.data, f1.data)
        assert out.shape == (7, 7, 6)


class TestAggregatePyramid:
    def test_toy_shapes_and_channel_provenance(self):
        e = toy()
        img = make_rng(14).random((112, 112, 3))
        levels = pyr.build_pyramid(img, pyr.PyramidConfig(), enc.TOY_PROFILE)
        encoded = pyr.encode_pyramid(levels, e)
        per_tap = pyr.aggregate_pyramid(encoded, pyr.PyramidConfig(), enc.TOY_PROFILE)
        assert [t.shape for t in per_tap] == [(14, 14, 64)] * 4
        # channels [0, d) come from level 1: area-downsampling them back to
        # the level-1 grid must reproduce the level-1 tap bilinearly upsampled
        level1 = encoded[0][0][2].features[0].data
        up = np.stack([resample_area(per_tap[0].data[:, :, c], 7, 7) for c in range(32)], axis=-1)
        expected = np.stack([resample_area(
            pyr.resample_features(Tensor(level1), 14, 14).data[:, :, c], 7, 7) for c in range(32)], axis=-1)
        np.testing.assert_allclose(up, expected, atol=1e-10)

    def test_single_resolution_path(self):
        e = toy()
        img = make_rng(15).random((90, 90, 3))
        cfg = pyr.PyramidConfig(levels=1)
        levels = pyr.build_pyramid(img, cfg, enc.TOY_PROFILE)
        per_tap = pyr.aggregate_pyramid(pyr.encode_pyramid(levels, e), cfg, enc.TOY_PROFILE)
        assert [t.shape for t in per_tap] == [(7, 7, 32)] * 4
