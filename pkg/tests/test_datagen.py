import json

import numpy as np
import pytest

from matselect import datagen as dg
from matselect.core import make_rng, read_id_grid_png


class TestReflectance:
    def test_solid_is_constant(self):
        r = dg.gen_reflectance("solid", make_rng(1), 5,
                               params={"color": np.array([0.2, 0.4, 0.6])})
        patch = r.patch(16)
        np.testing.assert_allclose(patch, np.broadcast_to([0.2, 0.4, 0.6], (16, 16, 3)))

    def test_stripes_periodicity(self):
        r = dg.gen_reflectance("stripes", make_rng(2), 6, params={
            "color": np.array([1.0, 0.0, 0.0]), "color2": np.array([0.0, 0.0, 1.0]),
            "period": 4.0, "angle": 0.0, "duty": 0.5})
        yy, xx = np.mgrid[0:12, 0:12].astype(float)
        np.testing.assert_array_equal(r.evaluate(xx, yy), r.evaluate(xx + 4.0, yy))

    def test_seeded_rerun_bitwise_identical(self):
        a = dg.gen_reflectance("value_noise", make_rng(3), 7).patch(24)
        b = dg.gen_reflectance("value_noise", make_rng(3), 7).patch(24)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("family", dg.REFLECTANCE_FAMILIES)
    def test_all_families_stationary_statistics(self, family):
        """Mean color over disjoint windows should agree (translation
        invariance of the statistics, not of the values)."""
        r = dg.gen_reflectance(family, make_rng(4), 8)
        yy, xx = np.mgrid[0:64, 0:400].astype(float)
        patch = r.evaluate(xx, yy)
        means = [patch[:, i * 100:(i + 1) * 100].mean() for i in range(4)]
        assert np.ptp(means) < 0.15

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            dg.gen_reflectance("plaid", make_rng(5), 9)


class TestPatternMask:
    def test_checker_exact_balance(self):
        m = dg.gen_pattern_mask("checker", make_rng(6), 1, size=64, params={"cell": 8.0})
        assert m.grid(64).mean() == 0.5

    def test_noise_threshold_near_median(self):
        grid_size = 64
        m = dg.gen_pattern_mask("noise_threshold", make_rng(7), 2, size=grid_size,
                                params={"scale": 9.0, "threshold": 0.5, "seed": 11})
        cover = m.grid(grid_size).mean()
        assert 0.2 < cover < 0.8

    @pytest.mark.parametrize("family", dg.PATTERN_FAMILIES)
    def test_occupancy_floor_all_families(self, family):
        m = dg.gen_pattern_mask(family, make_rng(8), 3, size=96)
        cover = m.grid(96).mean()
        assert 0.05 <= cover <= 0.95
        assert set(np.unique(m.grid(96))) <= {0, 1}

    def test_degenerate_params_error_names_family(self):
        with pytest.raises(dg.OccupancyError, match="noise_threshold"):
            dg.gen_pattern_mask("noise_threshold", make_rng(9), 4, size=32,
                                params={"scale": 8.0, "threshold": 2.0, "seed": 1})


class TestComposeTexture:
    def _solids(self):
        a = dg.gen_reflectance("solid", make_rng(10), 1, params={"color": np.array([1.0, 0, 0])})
        b = dg.gen_reflectance("solid", make_rng(11), 2, params={"color": np.array([0, 0, 1.0])})
        return a, b

    def test_full_mask_yields_first_component(self):
        a, b = self._solids()
        ones = dg.PatternMask(id=1, family="stripes",
                              params={"period": 8.0, "angle": 0.0, "duty": 1.0})
        _, patch = dg.compose_texture(ones, a, b, dg.TEXTURE_ID_BASE, patch_size=8)
        np.testing.assert_allclose(patch, np.broadcast_to([1.0, 0, 0], (8, 8, 3)))

    def test_checker_two_color(self):
        a, b = self._solids()
        checker = dg.PatternMask(id=2, family="checker", params={"cell": 1.0})
        mat, patch = dg.compose_texture(checker, a, b, dg.TEXTURE_ID_BASE, patch_size=4)
        assert patch[0, 0, 0] == 1.0 and patch[0, 1, 2] == 1.0

    def test_subtexture_ids_follow_mask(self):
        a, b = self._solids()
        checker = dg.PatternMask(id=3, family="checker", params={"cell": 1.0})
        mat, _ = dg.compose_texture(checker, a, b, dg.TEXTURE_ID_BASE)
        yy, xx = np.mgrid[0:6, 0:6].astype(float)
        ids = mat.subtexture_ids(xx, yy)
        mask = checker.evaluate(xx, yy)
        np.testing.assert_array_equal(ids, np.where(mask, a.id, b.id))

    def test_identical_components_rejected(self):
        a, _ = self._solids()
        checker = dg.PatternMask(id=4, family="checker", params={"cell": 2.0})
        with pytest.raises(ValueError):
            dg.compose_texture(checker, a, a, dg.TEXTURE_ID_BASE)


def flat_scene(material, size=32, shading=0.0):
    return dg.SceneSpec(size=size, regions=(dg.Region("fill", {}, material),),
                        shading_seed=1, shading_strength=shading, highlight=None,
                        camera_zoom=1.0, camera_cx=size / 2, camera_cy=size / 2, seed=0)


class TestRenderScene:
    def test_full_canvas_texture_annotations(self):
        a = dg.gen_reflectance("solid", make_rng(12), 1, params={"color": np.array([1.0, 0, 0])})
        b = dg.gen_reflectance("solid", make_rng(13), 2, params={"color": np.array([0, 0, 1.0])})
        checker = dg.PatternMask(id=1, family="checker", params={"cell": 4.0})
        mat, _ = dg.compose_texture(checker, a, b, dg.TEXTURE_ID_BASE)
        image, ann = dg.render_scene(flat_scene(mat))
        assert (ann.texture_ids == dg.TEXTURE_ID_BASE).all()
        assert set(np.unique(ann.subtexture_ids)) == {1, 2}

    def test_lighting_changes_image_not_labels(self):
        mat = dg.gen_reflectance("value_noise", make_rng(14), 3)
        spec_a = flat_scene(mat, shading=1.0)
        spec_b = dg.SceneSpec(**{**spec_a.__dict__, "shading_seed": 999})
        img_a, ann_a = dg.render_scene(spec_a)
        img_b, ann_b = dg.render_scene(spec_b)
        assert not np.array_equal(img_a, img_b)
        np.testing.assert_array_equal(ann_a.subtexture_ids, ann_b.subtexture_ids)
        np.testing.assert_array_equal(ann_a.texture_ids, ann_b.texture_ids)

    def test_level_disagreement_implies_texture_material(self):
        bank = dg.build_bank(5, size=64)
        spec = dg.make_scene_spec(5, 0, 0, 0, bank, 64, thin=False)
        _, ann = dg.render_scene(spec)
        differs = ann.subtexture_ids != ann.texture_ids
        # exhaustive: wherever the levels disagree the texture id must come
        # from the texture id range, and agreement must be reflectance-range
        assert (ann.texture_ids[differs] >= dg.TEXTURE_ID_BASE).all()
        same = ~differs
        assert (ann.texture_ids[same] < dg.TEXTURE_ID_BASE).all()

    def test_subtexture_refines_texture(self):
        """Every subtexture-id class must sit inside exactly one texture-id
        class: the texture id is a function of the subtexture id per image."""
        bank = dg.build_bank(6, size=64)
        for layout in range(6):
            spec = dg.make_scene_spec(6, layout, 0, 0, bank, 64, thin=False)
            _, ann = dg.render_scene(spec)
            for s in np.unique(ann.subtexture_ids):
                assert len(np.unique(ann.texture_ids[ann.subtexture_ids == s])) == 1

    def test_shading_bounds(self):
        spec = flat_scene(dg.gen_reflectance("solid", make_rng(15), 4,
                                             params={"color": np.ones(3)}), shading=1.0)
        field = dg.shading_field(spec)
        assert field.min() >= 0.3 - 1e-12 and field.max() <= 1.2 + 1e-12


class TestGenDataset:
    def test_counts_and_layout(self, tmp_path):
        cfg = dg.DatasetConfig(train_standard=3, train_thin=1, holdout_standard=1,
                               holdout_thin=1, assignments=1, illuminations=1,
                               size=48, seed=3)
        manifest = dg.gen_dataset(cfg, tmp_path / "data")
        assert len(manifest["scenes"]) == 6
        scene_dirs = sorted((tmp_path / "data").glob("scene_*"))
        assert len(scene_dirs) == 6
        for d in scene_dirs:
            assert (d / "img_k0.png").exists()
            assert (d / "ann_subtexture.png").exists()
            assert (d / "ann_texture.png").exists()
            assert (d / "meta.json").exists()
        assert not (tmp_path / "data" / ".incomplete").exists()

    def test_illumination_variants_share_annotation(self, tmp_path):
        cfg = dg.DatasetConfig(train_standard=1, holdout_standard=0, assignments=1,
                               illuminations=3, size=40, seed=4)
        dg.gen_dataset(cfg, tmp_path / "data")
        scene = tmp_path / "data" / "scene_0000"
        assert len(sorted(scene.glob("img_k*.png"))) == 3
        assert len(sorted(scene.glob("ann_*.png"))) == 2  # one annotation pair

    def test_same_seed_identical_tree_hash(self, tmp_path):
        cfg = dg.DatasetConfig(train_standard=2, holdout_standard=1, size=40, seed=5)
        dg.gen_dataset(cfg, tmp_path / "a")
        dg.gen_dataset(cfg, tmp_path / "b")
        assert dg.tree_hash(tmp_path / "a") == dg.tree_hash(tmp_path / "b")

    def test_different_seed_different_tree(self, tmp_path):
        dg.gen_dataset(dg.DatasetConfig(train_standard=1, holdout_standard=0, size=40, seed=6),
                       tmp_path / "a")
        dg.gen_dataset(dg.DatasetConfig(train_standard=1, holdout_standard=0, size=40, seed=7),
                       tmp_path / "b")
        assert dg.tree_hash(tmp_path / "a") != dg.tree_hash(tmp_path / "b")

    def test_loader_round_trip(self, tmp_path):
        cfg = dg.DatasetConfig(train_standard=2, train_thin=1, holdout_standard=1,
                               size=40, seed=8, illuminations=2)
        dg.gen_dataset(cfg, tmp_path / "data")
        manifest, records = dg.load_dataset(tmp_path / "data")
        assert [r.split for r in records] == ["train", "train", "train", "holdout"]
        assert [r.subset for r in records] == ["standard", "standard", "thin", "standard"]
        imgs = records[0].images()
        assert len(imgs) == 2 and imgs[0].shape == (40, 40, 3)
        ann = records[2].annotation()
        assert ann.subtexture_ids.shape == (40, 40)

    def test_thin_scenes_have_thin_bands(self, tmp_path):
        cfg = dg.DatasetConfig(train_standard=0, train_thin=2, holdout_standard=0,
                               size=64, seed=9)
        dg.gen_dataset(cfg, tmp_path / "data")
        _, records = dg.load_dataset(tmp_path / "data")
        for rec in records:
            meta = json.loads((rec.path / "meta.json").read_text())
            kinds = [r["kind"] for r in meta["spec"]["regions"]]
            assert kinds[0] == "fill" and all(k == "band" for k in kinds[1:])
            ann = rec.annotation()
            # both levels identical on reflectance-only scenes
            np.testing.assert_array_equal(ann.subtexture_ids, ann.texture_ids)

    def test_id_grids_survive_png(self, tmp_path):
        cfg = dg.DatasetConfig(train_standard=1, holdout_standard=0, size=40, seed=10)
        dg.gen_dataset(cfg, tmp_path / "data")
        scene = tmp_path / "data" / "scene_0000"
        meta = json.loads((scene / "meta.json").read_text())
        spec_size = meta["spec"]["size"]
        ids = read_id_grid_png(scene / "ann_texture.png")
        assert ids.shape == (spec_size, spec_size)
        assert ids.max() < 65536
