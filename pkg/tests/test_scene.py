import numpy as np
import pytest

from freeedit import tensor as T
from freeedit.geometry import project_points
from freeedit.ppm import PPMFormatError, decode_ppm, encode_ppm, quantize, read_ppm, to_float, write_ppm
from freeedit.rng import SplitMix64
from freeedit.scene import (BACKGROUND, EDIT_NAMES, ManifestError, SCENE_CENTER, SCENE_RADIUS,
                            apply_edit_oracle, depth_map, generate_synthetic_scene, get_edit, load_scene,
                            nearest_views, pixel_rays, read_manifest, save_scene, select_disjoint_sources,
                            select_views)


@pytest.fixture(scope="module")
def scene():
    return generate_synthetic_scene(7, 10, 32)


class TestGeneration:
    def test_same_seed_is_bit_identical(self, scene):
        again = generate_synthetic_scene(7, 10, 32)
        assert again.images.tobytes() == scene.images.tobytes()
        for a, b in zip(again.poses, scene.poses):
            assert a.R.tobytes() == b.R.tobytes() and a.t.tobytes() == b.t.tobytes()
        for name in EDIT_NAMES:
            assert again.edits[name].tobytes() == scene.edits[name].tobytes()

    def test_different_seeds_differ(self, scene):
        assert generate_synthetic_scene(8, 10, 32).images.tobytes() != scene.images.tobytes()

    def test_cameras_are_valid_and_look_at_centre(self, scene):
        for pose in scene.poses:
            pose.validate()
            uv, _, ok = project_points(SCENE_CENTER, pose)
            assert ok
            np.testing.assert_allclose(uv, [16.0, 16.0], atol=1e-9)

    def test_missed_rays_show_background(self, scene):
        pose = scene.poses[0]
        # the top image row looks above the scene for every generated camera
        o, d = pixel_rays(pose, np.arange(32) + 0.5, np.full(32, 0.5))
        _, kind = scene.geometry.intersect(o, d)
        missed = kind == -1
        assert missed.any()
        expect = to_float(quantize(BACKGROUND))
        np.testing.assert_array_equal(scene.images[0, 0][missed], np.broadcast_to(expect, (missed.sum(), 3)))

    def test_sphere_centre_depth(self):
        checked = 0
        for seed in range(6):
            sc = generate_synthetic_scene(seed, 8, 48)
            geo = sc.geometry
            for pose in sc.poses:
                for c, r in zip(geo.centers, geo.radii):
                    uv, _, ok = project_points(c, pose)
                    o, d = pixel_rays(pose, uv[None, 0], uv[None, 1])
                    _, kind = geo.intersect(o, d)
                    if not ok or geo.radii[kind[0]] != r:
                        continue  # occluded by another sphere
                    depth = depth_map(geo, pose, uv[0], uv[1])
                    assert abs(depth - (np.linalg.norm(pose.center - c) - r)) < 1e-6
                    checked += 1
        assert checked > 10

    def test_geometry_inside_bounding_sphere(self):
        for seed in range(10):
            geo = generate_synthetic_scene(seed, 4, 32).geometry
            reach = np.linalg.norm(geo.centers - SCENE_CENTER, axis=-1) + geo.radii
            assert np.all(reach <= SCENE_RADIUS)
            # the ground disk edge as well
            assert np.hypot(2.0, SCENE_CENTER[2]) <= SCENE_RADIUS

    def test_minimum_size(self):
        with pytest.raises(T.ContractError):
            generate_synthetic_scene(0, 8, 16)

    def test_images_are_quantised(self, scene):
        np.testing.assert_array_equal(to_float(quantize(scene.images)), scene.images)


class TestEdits:
    def test_identity_is_exact(self):
        img = np.random.default_rng(0).random((5, 5, 3)).astype(np.float32)
        out = apply_edit_oracle(img, "identity")
        assert out.tobytes() == img.tobytes() and out is not img

    def test_invert(self):
        img = np.random.default_rng(1).random((4, 4, 3))
        np.testing.assert_allclose(apply_edit_oracle(img, "invert"), 1 - img, atol=1e-15)

    def test_grayscale_channels_equal(self):
        img = np.random.default_rng(2).random((4, 4, 3))
        out = apply_edit_oracle(img, "grayscale")
        luma = img @ np.array([0.299, 0.587, 0.114])
        for ch in range(3):
            np.testing.assert_allclose(out[..., ch], luma, atol=1e-12)

    def test_hue_rotation_cycles_channels(self):
        np.testing.assert_array_equal(apply_edit_oracle(np.array([0.1, 0.5, 0.9]), "hue-rotate-120"),
                                      [0.9, 0.1, 0.5])

    def test_outputs_are_clamped(self):
        out = apply_edit_oracle(np.ones((3, 3)), "sepia")
        assert out.max() <= 1.0 and out.min() >= 0.0

    def test_unknown_edit_lists_choices(self):
        with pytest.raises(KeyError) as err:
            get_edit("posterize")
        assert "warm-tint" in str(err.value)

    def test_six_edits(self):
        assert EDIT_NAMES == ("identity", "grayscale", "sepia", "hue-rotate-120", "invert", "warm-tint")

    def test_commutes_with_view_selection(self, scene):
        start, sources = select_views(scene, 4, SplitMix64(3), 2)
        edited_all = apply_edit_oracle(scene.images, "sepia")[[start, *sources]]
        edited_sel = apply_edit_oracle(scene.images[[start, *sources]], "sepia")
        np.testing.assert_array_equal(edited_all, edited_sel)


class TestViewSelection:
    def test_nearest_matches_sort(self, scene):
        c = scene.poses[3].center
        dists = {i: np.linalg.norm(p.center - c) for i, p in enumerate(scene.poses) if i != 3}
        assert nearest_views(scene.poses, 3) == sorted(dists, key=dists.get)

    def test_smallest_pool(self, scene):
        pool = nearest_views(scene.poses, 0)[:3]
        for seed in range(20):
            start, sources = select_views(scene, 0, SplitMix64(seed), 2, m=1)
            assert {start, *sources} == set(pool)

    def test_disjointness(self, scene):
        for seed in range(50):
            rng = SplitMix64(seed)
            target = seed % scene.n_views
            start, sources = select_views(scene, target, rng, 3)
            assert len({target, start, *sources}) == 5
            more = select_disjoint_sources(scene, target, rng, 3, taken=[start, *sources])
            assert not set(more) & {target, start, *sources}
            assert len(set(more)) == 3

    def test_pool_size_follows_m(self, scene):
        seen = set()
        for seed in range(200):
            start, sources = select_views(scene, 5, SplitMix64(seed), 2)
            seen.update([start, *sources])
        assert seen == set(nearest_views(scene.poses, 5)[:9])

    def test_excluded_views_never_chosen(self, scene):
        for seed in range(30):
            start, sources = select_views(scene, 1, SplitMix64(seed), 2, exclude=(2, 3))
            assert not {start, *sources} & {2, 3}

    def test_too_few_views(self, scene):
        with pytest.raises(T.ContractError):
            select_views(scene.poses[:3], 0, SplitMix64(0), 3)


class TestPPM:
    def test_header(self):
        assert encode_ppm(np.zeros((64, 64, 3))).startswith(b"P6\n64 64\n255\n")

    def test_rounding(self):
        np.testing.assert_array_equal(quantize(np.array([0.0, 0.5 / 255, 0.49 / 255, 1.0, 1.5, -0.2])),
                                      [0, 1, 0, 255, 255, 0])

    def test_round_trip(self, tmp_path):
        img8 = np.random.default_rng(0).integers(0, 256, (7, 5, 3)).astype(np.uint8)
        write_ppm(tmp_path / "a.ppm", img8)
        back = read_ppm(tmp_path / "a.ppm")
        np.testing.assert_array_equal(quantize(back), img8)

    def test_comments_in_header(self):
        buf = b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6))
        np.testing.assert_array_equal(decode_ppm(buf).ravel(), np.arange(6))

    def test_truncated_payload_offset(self):
        buf = encode_ppm(np.zeros((4, 4, 3)))
        header = len(b"P6\n4 4\n255\n")
        with pytest.raises(PPMFormatError) as err:
            decode_ppm(buf[:header + 10], "x.ppm")
        assert err.value.offset == header + 10
        assert "x.ppm" in str(err.value) and f"byte {header + 10}" in str(err.value)

    @pytest.mark.parametrize("buf,offset", [(b"P5\n1 1\n255\n\0\0\0", 0), (b"P6\n1 1\n65535\n", 7),
                                            (b"P6\nx", 3)])
    def test_malformed_headers(self, buf, offset):
        with pytest.raises(PPMFormatError) as err:
            decode_ppm(buf)
        assert err.value.offset == offset


class TestSceneFiles:
    def test_round_trip(self, scene, tmp_path):
        save_scene(scene, tmp_path / "s")
        back = load_scene(tmp_path / "s")
        assert back.id == scene.id and back.n_views == scene.n_views
        assert back.images.tobytes() == scene.images.tobytes()
        for a, b in zip(back.poses, scene.poses):
            np.testing.assert_allclose(a.R, b.R, atol=1e-9)
            np.testing.assert_allclose(a.t, b.t, atol=1e-9)
        for name in EDIT_NAMES:
            assert back.edits[name].tobytes() == scene.edits[name].tobytes()
        np.testing.assert_allclose(back.center, scene.center)

    def test_layout(self, scene, tmp_path):
        save_scene(scene, tmp_path / "s")
        names = {p.relative_to(tmp_path / "s").as_posix() for p in (tmp_path / "s").rglob("*") if p.is_file()}
        assert {"scene.txt", "cam_000.txt", "img_009.ppm", "edit_invert/img_000.ppm"} <= names
        man = read_manifest(tmp_path / "s" / "scene.txt")
        assert man["edits"].split(",") == list(EDIT_NAMES)
        assert man["n_views"] == "10"

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "scene.txt").write_text("id = a\nn_views 3\n")
        with pytest.raises(ManifestError) as err:
            read_manifest(tmp_path / "scene.txt")
        assert "line 2" in str(err.value) and "byte 7" in str(err.value)

    def test_truncated_image_names_file(self, scene, tmp_path):
        save_scene(scene, tmp_path / "s")
        path = tmp_path / "s" / "img_002.ppm"
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(PPMFormatError) as err:
            load_scene(tmp_path / "s")
        assert "img_002.ppm" in str(err.value)
