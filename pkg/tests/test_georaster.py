import datetime as dt

import numpy as np
import pytest

from habfuse.errors import GridMismatchError, SceneFormatError
from habfuse.georaster import (
    FILL_VALUE,
    GridDef,
    OceanMask,
    apply_mask,
    colocate_stack,
    read_mask,
    read_scene,
    resample_nearest,
    scenes_equal,
    write_mask,
    write_scene,
)

from conftest import make_grid, make_scene, random_scene


def brute_force_nearest(scene, target):
    """Independent oracle: exhaustive distance scan over every source cell."""
    src = scene.grid
    slat, slon = src.lat_centers(), src.lon_centers()
    gate = max(abs(src.dlat), abs(src.dlon))
    out = np.full((scene.data.shape[0], target.rows, target.cols),
                  np.float32(scene.fill_value), dtype=np.float32)
    for tr, tlat in enumerate(target.lat_centers()):
        for tc, tlon in enumerate(target.lon_centers()):
            d2 = (slat[:, None] - tlat) ** 2 + (slon[None, :] - tlon) ** 2
            flat = int(np.argmin(d2))
            r, c = divmod(flat, src.cols)
            if d2[r, c] < gate * gate * (1 - 1e-9):
                out[:, tr, tc] = scene.data[:, r, c]
    return out


class TestResampleNearest:
    def test_identity_grid(self):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]], grid=make_grid(2, 2))
        out = resample_nearest(scene, scene.grid)
        assert np.array_equal(out.data, scene.data)

    def test_single_cell_to_3x3_only_center_within_gate(self):
        # source cell center at (10, -80); 3x3 target at the same 0.1 deg
        # resolution centered there. Neighbors sit exactly one cell away,
        # which is outside the strict gate.
        src = make_scene([[5.0]], grid=make_grid(1, 1, lat0=10.0, lon0=-80.0))
        target = make_grid(3, 3, lat0=10.1, lon0=-80.1)
        out = resample_nearest(src, target)
        expected = np.full((3, 3), np.float32(FILL_VALUE))
        expected[1, 1] = 5.0
        assert np.array_equal(out.data[0], expected)

    def test_downsample_matches_exhaustive_scan(self):
        rng = np.random.default_rng(7)
        src = make_scene(rng.random((4, 4)).astype(np.float32),
                         grid=make_grid(4, 4, lat0=30.0, lon0=-85.0, dlat=-0.063, dlon=0.063))
        target = GridDef(lat0=29.97, lon0=-84.98, dlat=-0.126, dlon=0.126, rows=2, cols=2)
        out = resample_nearest(src, target)
        assert np.array_equal(out.data, brute_force_nearest(src, target))

    def test_random_grids_match_exhaustive_scan(self):
        rng = np.random.default_rng(21)
        for trial in range(10):
            src = random_scene(rng, rows=5, cols=6,
                               grid=make_grid(5, 6, lat0=20.0, lon0=-70.0,
                                              dlat=-0.08, dlon=0.09))
            target = GridDef(
                lat0=20.0 - rng.random() * 0.1,
                lon0=-70.0 + rng.random() * 0.1,
                dlat=-(0.05 + rng.random() * 0.1),
                dlon=0.05 + rng.random() * 0.1,
                rows=int(rng.integers(2, 8)),
                cols=int(rng.integers(2, 8)),
            )
            out = resample_nearest(src, target)
            assert np.array_equal(out.data, brute_force_nearest(src, target)), f"trial {trial}"

    def test_fill_propagates(self):
        data = np.array([[1.0, FILL_VALUE], [3.0, 4.0]], dtype=np.float32)
        scene = make_scene(data, grid=make_grid(2, 2))
        out = resample_nearest(scene, scene.grid)
        assert out.data[0, 0, 1] == np.float32(FILL_VALUE)

    def test_idempotent_on_same_grid(self):
        rng = np.random.default_rng(3)
        scene = random_scene(rng)
        once = resample_nearest(scene, scene.grid)
        twice = resample_nearest(once, scene.grid)
        assert np.array_equal(once.data, twice.data)

    def test_fine_roundtrip_recovers_where_indices_agree(self):
        rng = np.random.default_rng(5)
        scene = random_scene(rng, rows=5, cols=5, fill_frac=0.0,
                             grid=make_grid(5, 5, dlat=-0.2, dlon=0.2))
        fine = GridDef(lat0=30.02, lon0=-85.03, dlat=-0.05, dlon=0.05, rows=20, cols=20)
        back = resample_nearest(resample_nearest(scene, fine), scene.grid)

        src = scene.grid

        def nearest(vals, origin, step, n):
            f = (vals - origin) / step
            base = np.floor(f)
            return np.clip(base + (f - base > 0.5), 0, n - 1).astype(int)

        fr = nearest(fine.lat_centers(), src.lat0, src.dlat, src.rows)
        fc = nearest(fine.lon_centers(), src.lon0, src.dlon, src.cols)
        br = nearest(src.lat_centers(), fine.lat0, fine.dlat, fine.rows)
        bc = nearest(src.lon_centers(), fine.lon0, fine.dlon, fine.cols)
        for r in range(src.rows):
            for c in range(src.cols):
                if fr[br[r]] == r and fc[bc[c]] == c:
                    assert back.data[0, r, c] == scene.data[0, r, c]


class TestApplyMask:
    def test_all_true_identity(self):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]])
        mask = OceanMask(grid=scene.grid, keep=np.ones((2, 2), bool))
        assert np.array_equal(apply_mask(scene, mask).data, scene.data)

    def test_all_false_fills(self):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]])
        mask = OceanMask(grid=scene.grid, keep=np.zeros((2, 2), bool))
        assert np.all(apply_mask(scene, mask).data == np.float32(FILL_VALUE))

    def test_checkerboard(self):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]])
        keep = np.array([[True, False], [False, True]])
        out = apply_mask(scene, OceanMask(grid=scene.grid, keep=keep))
        assert out.data[0, 0, 0] == 1.0 and out.data[0, 1, 1] == 4.0
        assert out.data[0, 0, 1] == np.float32(FILL_VALUE)
        assert out.data[0, 1, 0] == np.float32(FILL_VALUE)

    def test_grid_mismatch_rejected(self):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]])
        other = OceanMask(grid=make_grid(2, 2, lat0=0.0), keep=np.ones((2, 2), bool))
        with pytest.raises(GridMismatchError):
            apply_mask(scene, other)

    def test_idempotent_and_commutes_with_stack(self):
        rng = np.random.default_rng(11)
        grid = make_grid(4, 5)
        a = random_scene(rng, 4, 5, channels=2, grid=grid)
        b = random_scene(rng, 4, 5, channels=1, grid=grid)
        b = make_scene(b.data, grid=grid, instrument="other")
        keep = rng.random((4, 5)) > 0.4
        mask = OceanMask(grid=grid, keep=keep)
        once = apply_mask(a, mask)
        assert np.array_equal(apply_mask(once, mask).data, once.data)
        pre = colocate_stack([apply_mask(a, mask), apply_mask(b, mask)])
        post = apply_mask(colocate_stack([a, b]), mask)
        assert np.array_equal(pre.data, post.data)


class TestColocateStack:
    def test_single_scene_prefixes_names(self):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]], instrument="viirs")
        out = colocate_stack([scene])
        assert out.channel_names == ["viirs:c0"]
        assert np.array_equal(out.data, scene.data)

    def test_joint_fill_rule(self):
        grid = make_grid(2, 2)
        a = make_scene([[1.0, 2.0], [3.0, 4.0]], grid=grid, instrument="a")
        b_data = np.array([[FILL_VALUE, 6.0], [7.0, 8.0]], dtype=np.float32)
        b = make_scene(b_data, grid=grid, instrument="b")
        out = colocate_stack([a, b])
        assert out.data.shape == (2, 2, 2)
        assert out.data[0, 0, 0] == np.float32(FILL_VALUE)
        assert out.data[1, 0, 0] == np.float32(FILL_VALUE)
        assert out.data[0, 0, 1] == 2.0

    def test_oc_plus_sif_channel_count(self):
        grid = make_grid(3, 3)
        rng = np.random.default_rng(0)
        oc = make_scene(rng.random((5, 3, 3)).astype(np.float32), grid=grid, instrument="oc")
        sif = make_scene(rng.random((1, 3, 3)).astype(np.float32), grid=grid, instrument="sif")
        fused = colocate_stack([oc, sif])
        assert len(fused.channel_names) == 6
        assert fused.instrument_id == "oc+sif"

    def test_date_mismatch_rejected(self):
        grid = make_grid(2, 2)
        a = make_scene([[1.0, 2.0], [3.0, 4.0]], grid=grid, date=dt.date(2021, 6, 1))
        b = make_scene([[1.0, 2.0], [3.0, 4.0]], grid=grid, instrument="b",
                       date=dt.date(2021, 6, 2))
        with pytest.raises(GridMismatchError):
            colocate_stack([a, b])

    def test_duplicate_prefixed_names_rejected(self):
        grid = make_grid(2, 2)
        a = make_scene([[1.0, 2.0], [3.0, 4.0]], grid=grid, instrument="x")
        b = make_scene([[5.0, 6.0], [7.0, 8.0]], grid=grid, instrument="x")
        with pytest.raises(ValueError, match="duplicate"):
            colocate_stack([a, b])


class TestSceneContainer:
    def test_roundtrip_field_for_field(self, tmp_path):
        rng = np.random.default_rng(13)
        scene = random_scene(rng, rows=3, cols=4, channels=2)
        p = tmp_path / "scene.sfg"
        write_scene(scene, p)
        back = read_scene(p)
        assert scenes_equal(scene, back)

    def test_roundtrip_bytes_identical(self, tmp_path):
        rng = np.random.default_rng(17)
        scene = random_scene(rng)
        p1, p2 = tmp_path / "a.sfg", tmp_path / "b.sfg"
        write_scene(scene, p1)
        write_scene(read_scene(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_raster_rejected(self, tmp_path):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]])
        p = tmp_path / "scene.sfg"
        write_scene(scene, p)
        blob = p.read_bytes()
        p.write_bytes(blob[:-4])
        with pytest.raises(SceneFormatError, match="size mismatch"):
            read_scene(p)

    def test_bad_magic_rejected(self, tmp_path):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]])
        p = tmp_path / "scene.sfg"
        write_scene(scene, p)
        blob = bytearray(p.read_bytes())
        blob[:4] = b"NOPE"
        p.write_bytes(bytes(blob))
        with pytest.raises(SceneFormatError, match="magic"):
            read_scene(p)

    def test_trailing_bytes_rejected(self, tmp_path):
        scene = make_scene([[1.0, 2.0], [3.0, 4.0]])
        p = tmp_path / "scene.sfg"
        write_scene(scene, p)
        p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(SceneFormatError, match="size mismatch"):
            read_scene(p)

    def test_mask_roundtrip(self, tmp_path):
        rng = np.random.default_rng(19)
        keep = rng.random((4, 4)) > 0.5
        mask = OceanMask(grid=make_grid(4, 4), keep=keep)
        p = tmp_path / "mask.sfg"
        write_mask(mask, p)
        back = read_mask(p)
        assert back.grid == mask.grid
        assert np.array_equal(back.keep, keep)


class TestSceneValidation:
    def test_nonfinite_rejected(self):
        data = np.array([[np.inf, 1.0], [2.0, 3.0]], dtype=np.float32)
        with pytest.raises(ValueError, match="finite"):
            make_scene(data)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            make_scene(np.zeros((1, 2, 2), dtype=np.float32), grid=make_grid(3, 3))
