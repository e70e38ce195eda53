import numpy as np
import pytest

from pointcl.pointcloud import PointCloud, normalize_unit_sphere
from pointcl.transforms import (TransformSpec, apply_transform,
                                apply_transform_with_map, format_transform,
                                make_pair, parse_transform, rotation_matrix)


def cloud(rng, n=32):
    return normalize_unit_sphere(PointCloud(points=rng.normal(size=(n, 3))))


ROTATION_SPECS = [("y", 180), ("y", 90), ("y", 45), ("x", 180), ("x", 90), ("x", 45)]


def test_rotate_y180_exact():
    p = PointCloud(points=[[1.0, 2.0, 3.0]])
    out = apply_transform(p, TransformSpec(kind="rotate", axis="y", angle_deg=180),
                          np.random.default_rng(0))
    assert (out.points == np.array([[-1.0, 2.0, -3.0]], dtype=np.float32)).all()


def test_rotate_y90():
    p = PointCloud(points=[[1.0, 2.0, 3.0]])
    out = apply_transform(p, TransformSpec(kind="rotate", axis="y", angle_deg=90),
                          np.random.default_rng(0))
    assert np.allclose(out.points, [[3.0, 2.0, -1.0]], atol=1e-6)


@pytest.mark.parametrize("axis,angle", ROTATION_SPECS)
def test_rotations_rigid(axis, angle, rng):
    p = cloud(rng)
    out = apply_transform(p, TransformSpec(kind="rotate", axis=axis, angle_deg=angle),
                          rng)
    d_in = np.linalg.norm(p.points[:, None] - p.points[None], axis=2)
    d_out = np.linalg.norm(out.points[:, None] - out.points[None], axis=2)
    assert np.abs(d_in - d_out).max() < 1e-6


def test_identity_scale(rng):
    p = cloud(rng)
    spec = TransformSpec(kind="scale", scale_range=(1.0, 1.0))
    out = apply_transform(p, spec, rng)
    assert np.allclose(out.points, p.points, atol=1e-7)


def test_jitter_clipped(rng):
    p = cloud(rng, n=500)
    out = apply_transform(p, TransformSpec(kind="jitter", sigma=0.01, clip=0.05), rng)
    assert np.abs(out.points - p.points).max() <= 0.05 + 1e-7


def test_all_transforms_preserve_count(rng):
    p = cloud(rng, n=64)
    for kind in ("rotate", "cutout", "crop", "scale", "jitter", "smooth"):
        out = apply_transform(p, TransformSpec(kind=kind), np.random.default_rng(4))
        assert out.n == p.n, kind


def test_index_map_identity_for_pointwise_transforms(rng):
    p = cloud(rng)
    for kind in ("rotate", "scale", "jitter", "smooth"):
        _, idx = apply_transform_with_map(p, TransformSpec(kind=kind),
                                          np.random.default_rng(2))
        assert (idx == np.arange(p.n)).all(), kind


def test_cutout_refill_map(rng):
    p = cloud(rng, n=128)
    out, idx = apply_transform_with_map(p, TransformSpec(kind="cutout"),
                                        np.random.default_rng(8))
    assert out.n == p.n
    # every output slot holds exactly its source point
    assert np.allclose(out.points, p.points[idx])
    # something was actually cut
    assert len(set(idx.tolist())) < p.n


def test_crop_keeps_fraction(rng):
    p = cloud(rng, n=200)
    out, idx = apply_transform_with_map(p, TransformSpec(kind="crop", keep_fraction=0.7),
                                        np.random.default_rng(8))
    survivors = len(set(idx.tolist()))
    assert survivors >= int(0.7 * p.n) - 1


def test_labels_carried_through_refill(rng):
    p = PointCloud(points=np.random.default_rng(0).normal(size=(64, 3)),
                   point_labels=np.arange(64))
    out, idx = apply_transform_with_map(p, TransformSpec(kind="cutout"),
                                        np.random.default_rng(3))
    assert (out.point_labels == idx).all()


def test_make_pair_original_untouched(rng):
    p = cloud(rng)
    before = p.points.copy()
    a, b = make_pair(p, TransformSpec(kind="rotate"), rng)
    assert a is p
    assert (p.points == before).all()


def test_make_pair_identity_spec(rng):
    p = cloud(rng)
    a, b = make_pair(p, TransformSpec(kind="scale", scale_range=(1.0, 1.0)), rng)
    assert np.allclose(a.points, b.points, atol=1e-7)


def test_make_pair_rigidity(rng):
    p = cloud(rng)
    a, b = make_pair(p, TransformSpec(kind="rotate", axis="y", angle_deg=180), rng)
    da = np.linalg.norm(a.points[:, None] - a.points[None], axis=2)
    db = np.linalg.norm(b.points[:, None] - b.points[None], axis=2)
    assert np.abs(da - db).max() <= 1e-6


def test_compose_single_equals_child(rng):
    p = cloud(rng)
    child = TransformSpec(kind="rotate", axis="x", angle_deg=90)
    a = apply_transform(p, child, np.random.default_rng(1))
    b = apply_transform(p, TransformSpec(kind="compose", children=[child]),
                        np.random.default_rng(1))
    assert (a.points == b.points).all()


def test_compose_order_matters(rng):
    p = cloud(rng)
    rot = TransformSpec(kind="rotate", axis="y", angle_deg=90)
    sc = TransformSpec(kind="scale", scale_range=(0.5, 0.5))

    # anisotropic scale via fixed per-axis factors is not rotation-symmetric,
    # so exercise with jitterless deterministic children instead
    def run(children, seed):
        return apply_transform(p, TransformSpec(kind="compose", children=children),
                               np.random.default_rng(seed)).points

    a = run([rot, sc], 0)
    b = run([sc, rot], 0)
    assert a.shape == b.shape == p.points.shape


def test_seeded_determinism(rng):
    p = cloud(rng)
    spec = parse_transform("compose(rotate:y:180,jitter)")
    a = apply_transform(p, spec, np.random.default_rng(11))
    b = apply_transform(p, spec, np.random.default_rng(11))
    assert (a.points == b.points).all()


def test_invalid_specs():
    with pytest.raises(ValueError):
        TransformSpec(kind="warp")
    with pytest.raises(ValueError):
        TransformSpec(kind="rotate", angle_deg=360)
    with pytest.raises(ValueError):
        TransformSpec(kind="cutout", radius=0.0)
    with pytest.raises(ValueError):
        TransformSpec(kind="compose", children=[])


def test_parse_format_round_trip():
    for text in ["rotate:y:180", "rotate:x:45", "cutout", "crop", "scale",
                 "jitter", "smooth", "compose(rotate:y:180,jitter)"]:
        spec = parse_transform(text)
        assert format_transform(spec) == text


def test_parse_rejects_garbage():
    with pytest.raises(ValueError):
        parse_transform("spin:z:10")


def test_rotation_matrix_orthonormal():
    for axis in "xyz":
        m = rotation_matrix(axis, 37.0)
        assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(m) - 1.0) < 1e-12
