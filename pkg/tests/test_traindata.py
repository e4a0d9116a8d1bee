import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from carflow.binio import BadMagicError, InconsistentSizeError, TruncatedFileError, VersionMismatchError
from carflow.traindata import (Box, Ellipsoid, MissingGroundTruthError, DataError, Placed, ScenePair,
                               SceneDataset, SceneRecipe, decode_scene, encode_scene, generate_scene,
                               make_batches, read_scene, shelf_ambiguity_holds, shelf_geometry, write_scene)


def _on_surfaces(points, objs, moved):
    """Distance of each point to the nearest object surface, optionally after the motion."""
    best = np.full(len(points), np.inf)
    for o in objs:
        p = points
        if moved:
            p = (p - o.motion_t) @ o.motion_r       # undo x -> R x + t
        local = (p - o.center) @ o.rotation
        best = np.minimum(best, o.shape.surface_distance(local))
    return best


def test_static_scene_has_zero_flow_and_congruent_frames():
    pair, objs, _ = generate_scene(SceneRecipe(motion_scale=0.0, seed=3), return_objects=True)
    assert np.array_equal(pair.gt_flow, np.zeros_like(pair.gt_flow))
    assert _on_surfaces(pair.pc2.astype(np.float64), objs, moved=False).max() < 1e-5


def test_pure_translation_gives_exact_flow():
    t = np.array([0.25, -0.5, 0.125])
    obj = Placed(Box(np.array([0.2, 0.1, 0.3])), np.eye(3), np.array([0.0, 0.0, 4.0]))
    obj.motion_t = t
    x = obj.world(obj.shape.sample(np.random.default_rng(0), 50))
    assert np.array_equal(obj.flow(x), np.broadcast_to(t, x.shape))


def test_rigid_flow_matches_transform_oracle():
    pair, objs, owner = generate_scene(SceneRecipe(seed=5, max_rotation_deg=25), return_objects=True)
    pc1 = pair.pc1.astype(np.float64)
    for i, o in enumerate(objs):
        sel = owner == i
        # oracle: rotate about the origin with scipy and subtract the start point
        r = Rotation.from_matrix(o.motion_r)
        expect = r.apply(pc1[sel]) + o.motion_t - pc1[sel]
        np.testing.assert_allclose(pair.gt_flow[sel], expect, atol=1e-6)


def test_pc2_is_resampled_moved_surface():
    pair, objs, _ = generate_scene(SceneRecipe(seed=6), return_objects=True)
    assert _on_surfaces(pair.pc2.astype(np.float64), objs, moved=True).max() < 1e-4
    assert _on_surfaces((pair.pc1 + pair.gt_flow).astype(np.float64), objs, moved=True).max() < 1e-4


def test_noise_touches_coordinates_only():
    clean = generate_scene(SceneRecipe(seed=7))
    noisy = generate_scene(SceneRecipe(seed=7, noise=0.01))
    assert np.array_equal(clean.gt_flow, noisy.gt_flow)
    assert not np.array_equal(clean.pc1, noisy.pc1)


def test_generation_is_deterministic_per_seed():
    a, b = generate_scene(SceneRecipe(seed=9)), generate_scene(SceneRecipe(seed=9))
    assert encode_scene(a) == encode_scene(b)
    assert encode_scene(a) != encode_scene(generate_scene(SceneRecipe(seed=10)))


def test_min_motion_bounds_translation():
    pair, objs, _ = generate_scene(SceneRecipe(seed=1, min_motion=2.0, motion_scale=2.5, max_rotation_deg=0),
                                   return_objects=True)
    for o in objs:
        assert 2.0 <= np.linalg.norm(o.motion_t) <= 2.5


@pytest.mark.parametrize("kw", [dict(n_points=0), dict(pattern="spiral"), dict(motion_scale=-1.0),
                                dict(noise=-0.1), dict(pattern="shelf", n_objects=2), dict(n_objects=0),
                                dict(min_motion=1.0, motion_scale=0.5)])
def test_invalid_recipes_raise(kw):
    with pytest.raises(ValueError):
        generate_scene(SceneRecipe(**kw))


def test_shelf_has_parallel_slabs_with_gap_equal_to_thickness():
    ys, half, gap = shelf_geometry(4)
    assert np.allclose(np.diff(ys), 2 * half[1] + gap)
    assert gap == pytest.approx(2 * half[1])


@pytest.mark.parametrize("seed", range(5))
def test_shelf_defeats_nearest_neighbour_matching(seed):
    pair = generate_scene(SceneRecipe(pattern="shelf", n_objects=4, seed=seed))
    holds, epe = shelf_ambiguity_holds(pair)
    assert holds, epe


def test_mixed_pattern_generates():
    pair = generate_scene(SceneRecipe(pattern="mixed", seed=2))
    assert pair.pc1.shape == (512, 3) and np.isfinite(pair.gt_flow).all()


def test_shapes_sample_on_their_surfaces():
    rng = np.random.default_rng(0)
    for shape in (Box(np.array([0.3, 0.1, 0.2])), Ellipsoid(np.array([0.3, 0.1, 0.2]))):
        assert shape.surface_distance(shape.sample(rng, 200)).max() < 1e-12
        assert shape.area() > 0


def test_scene_pair_validation():
    with pytest.raises(ValueError):
        ScenePair(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ScenePair(np.zeros((3, 3)), np.zeros((3, 3)), np.full((3, 3), np.nan))
    with pytest.raises(ValueError):
        ScenePair(np.zeros((3, 3)), np.zeros((3, 3)), mask=np.ones(2))


# -- SFPC format ----------------------------------------------------------------

def _random_pair(seed, gt=True, mask=True):
    rng = np.random.default_rng(seed)
    return ScenePair(rng.normal(size=(7, 3)), rng.normal(size=(5, 3)),
                     rng.normal(size=(7, 3)) if gt else None,
                     rng.random(7) < 0.5 if mask else None)


@pytest.mark.parametrize("gt,mask", [(True, True), (True, False), (False, True), (False, False)])
def test_sfpc_round_trip_is_bitwise(tmp_path, gt, mask):
    pair = _random_pair(0, gt, mask)
    path = tmp_path / "a.sfpc"
    write_scene(pair, path)
    back = read_scene(path)
    for name in ("pc1", "pc2", "gt_flow", "mask"):
        a, b = getattr(pair, name), getattr(back, name)
        assert (a is None) == (b is None)
        if a is not None:
            assert a.tobytes() == b.tobytes()
    assert encode_scene(back) == path.read_bytes()


def test_sfpc_header_layout():
    data = encode_scene(_random_pair(1))
    assert data[:4] == b"SFPC"
    assert np.frombuffer(data[4:20], "<u4").tolist() == [1, 7, 5, 3]
    assert len(data) == 20 + 12 * 7 + 12 * 5 + 12 * 7 + 7


def test_sfpc_errors():
    data = encode_scene(_random_pair(2))
    with pytest.raises(BadMagicError):
        decode_scene(b"XFPC" + data[4:])
    with pytest.raises(VersionMismatchError):
        decode_scene(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(TruncatedFileError, match="gt_flow"):
        decode_scene(data[:20 + 12 * 12 + 5])
    with pytest.raises(TruncatedFileError, match="mask"):
        decode_scene(data[:-1])
    with pytest.raises(InconsistentSizeError):
        decode_scene(data + b"\0")
    with pytest.raises(InconsistentSizeError):
        decode_scene(data[:16] + (8).to_bytes(4, "little") + data[20:])


# -- datasets and batches ---------------------------------------------------------

@pytest.fixture
def scene_dir(tmp_path):
    for i in range(10):
        write_scene(generate_scene(SceneRecipe(seed=i, n_points=40)), tmp_path / f"s{i:02d}.sfpc")
    return tmp_path


def test_batch_sizes(scene_dir):
    sizes = [len(b.names) for b in make_batches(scene_dir, 4, seed=0, n_input=32)]
    assert sizes == [4, 4, 2]


def test_same_seed_same_order(scene_dir):
    a = [b.names for b in make_batches(scene_dir, 4, seed=3, n_input=32)]
    b = [b.names for b in make_batches(scene_dir, 4, seed=3, n_input=32)]
    c = [b.names for b in make_batches(scene_dir, 4, seed=3, n_input=32, epoch=1)]
    assert a == b and a != c


def test_subsampled_gt_rows_match_original(scene_dir):
    ds = SceneDataset(scene_dir, 32)
    for i in range(len(ds)):
        pc1, _, gt, _, idx = ds.subsample(i, seed=1, epoch=2)
        assert np.array_equal(gt, ds.pairs[i].gt_flow[idx])
        assert np.array_equal(pc1, ds.pairs[i].pc1[idx])


def test_malformed_and_small_files_are_skipped(scene_dir):
    (scene_dir / "zz_bad.sfpc").write_bytes(b"junk")
    write_scene(generate_scene(SceneRecipe(seed=0, n_points=8)), scene_dir / "zz_small.sfpc")
    ds = SceneDataset(scene_dir, 32)
    assert len(ds) == 10
    assert sorted(n for n, _ in ds.skipped) == ["zz_bad.sfpc", "zz_small.sfpc"]


def test_empty_directory_raises(tmp_path):
    with pytest.raises(DataError):
        SceneDataset(tmp_path, 16)


def test_missing_ground_truth_rejected_for_training(tmp_path):
    write_scene(_random_pair(3, gt=False), tmp_path / "a.sfpc")
    with pytest.raises(MissingGroundTruthError):
        SceneDataset(tmp_path, 4)
    assert len(SceneDataset(tmp_path, 4, require_gt=False)) == 1
