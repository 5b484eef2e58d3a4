import numpy as np
import pytest

from rwnet.errors import InvalidInputError, ParseError
from rwnet.geometry import (
    CORRUPTIONS,
    DEPTH_LEVELS,
    SHAPE_KINDS,
    VIEW_NAMES,
    PointCloud,
    ViewSet,
    corrupt,
    load_point_cloud,
    normalize_unit_cube,
    project_six_views,
    synth_shape,
)

# (depth axis, viewer on + side?, column axis, column flipped?, row axis)
FRAMES = {
    "top": (2, True, 0, False, 1),
    "bottom": (2, False, 0, True, 1),
    "front": (1, False, 0, False, 2),
    "back": (1, True, 0, True, 2),
    "left": (0, False, 1, True, 2),
    "right": (0, True, 1, False, 2),
}


def brute_force_view(points, name, n):
    """Per-point z-buffer loop, used as the projection oracle."""
    d_ax, positive, c_ax, flip, r_ax = FRAMES[name]
    img = np.zeros((n, n))
    for p in points:
        dist = 0.5 - p[d_ax] if positive else 0.5 + p[d_ax]
        value = round((1.0 - dist) * DEPTH_LEVELS) / DEPTH_LEVELS
        col = min(max(int(np.floor((p[c_ax] + 0.5) * n)), 0), n - 1)
        row = n - 1 - min(max(int(np.floor((p[r_ax] + 0.5) * n)), 0), n - 1)
        if flip:
            col = n - 1 - col
        img[row, col] = max(img[row, col], value)
    return img


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- loading ----------------------------------------------------------------------


def test_xyz_single_point(tmp_path):
    pc = load_point_cloud(write(tmp_path, "one.xyz", "0 0 0\n"))
    assert pc.points.tolist() == [[0.0, 0.0, 0.0]]
    assert pc.sample_id.endswith("one")


def test_xyz_skips_comments(tmp_path):
    pc = load_point_cloud(write(tmp_path, "c.xyz", "# header\n1 2 3\n\n# more\n4 5 6\n"))
    assert pc.points.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_off_cube_vertices(tmp_path):
    corners = [(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    body = "OFF\n8 6 0\n" + "".join(f"{x} {y} {z}\n" for x, y, z in corners) + "4 0 1 3 2\n" * 6
    pc = load_point_cloud(write(tmp_path, "cube.off", body))
    np.testing.assert_array_equal(pc.points, np.array(corners, dtype=float))


def test_off_counts_on_header_line(tmp_path):
    pc = load_point_cloud(write(tmp_path, "h.off", "OFF 2 0 0\n0 0 0\n1 1 1\n"))
    assert len(pc) == 2


def test_bad_token_reports_line(tmp_path):
    path = write(tmp_path, "bad.xyz", "0 0 0\n1 1 1\na b c\n")
    with pytest.raises(ParseError, match="line 3"):
        load_point_cloud(path)


@pytest.mark.parametrize("text, line", [
    ("OFX\n1 0 0\n0 0 0\n", 1),
    ("OFF\n3 0 0\n0 0 0\n1 1 1\n", 5),
    ("OFF\n0 0 0\n", 2),
    ("OFF\nx 0 0\n", 2),
])
def test_off_errors(tmp_path, text, line):
    with pytest.raises(ParseError, match=f"line {line}"):
        load_point_cloud(write(tmp_path, "e.off", text))


def test_empty_xyz(tmp_path):
    with pytest.raises(ParseError):
        load_point_cloud(write(tmp_path, "e.xyz", "# nothing\n"))


def test_unknown_format(tmp_path):
    with pytest.raises(InvalidInputError):
        load_point_cloud(write(tmp_path, "x.ply", "0 0 0\n"))


def test_empty_point_cloud_rejected():
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((0, 3)))


# -- normalisation ----------------------------------------------------------------


@pytest.mark.parametrize("pts, expected", [
    ([(0, 0, 0), (2, 0, 0)], [(-0.5, 0, 0), (0.5, 0, 0)]),
    ([(1, 1, 1)], [(0, 0, 0)]),
    ([(0, 0, 0), (4, 2, 0)], [(-0.5, -0.25, 0), (0.5, 0.25, 0)]),
])
def test_normalize_examples(pts, expected):
    out = normalize_unit_cube(PointCloud(np.array(pts, dtype=float)))
    np.testing.assert_allclose(out.points, expected, atol=1e-15)


def test_normalize_idempotent(rng):
    pc = PointCloud(rng.normal(size=(200, 3)) * [3, 1, 0.5] + 7)
    once = normalize_unit_cube(pc)
    twice = normalize_unit_cube(once)
    np.testing.assert_allclose(once.points, twice.points, atol=1e-12)
    extent = once.points.max(axis=0) - once.points.min(axis=0)
    assert extent.max() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose((once.points.max(axis=0) + once.points.min(axis=0)) / 2, 0, atol=1e-15)


# -- projection -------------------------------------------------------------------


def test_origin_point_gives_half_everywhere():
    vs = project_six_views(PointCloud([[0.0, 0.0, 0.0]]), 4)
    for img in vs.views:
        assert np.count_nonzero(img) == 1
        assert img.max() == 0.5


def test_nearest_point_wins_top_view():
    pc = PointCloud([[0, 0, 0.49], [0, 0, -0.49]])
    top = project_six_views(pc, 4).views[0]
    assert np.count_nonzero(top) == 1
    # depths live on a 2^-16 grid, so 0.99 comes back as its nearest grid value
    assert top.max() == round(0.99 * DEPTH_LEVELS) / DEPTH_LEVELS
    assert abs(top.max() - 0.99) <= 0.5 / DEPTH_LEVELS


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n", [4, 16, 32])
def test_projection_matches_brute_force(rng, seed, n):
    pts = np.random.default_rng(seed).uniform(-0.5, 0.5, (300, 3))
    vs = project_six_views(PointCloud(pts), n)
    for name, img in zip(VIEW_NAMES, vs.views):
        np.testing.assert_array_equal(img, brute_force_view(pts, name, n))


def test_sphere_views_balanced():
    vs = project_six_views(synth_shape("sphere", 1024, seed=0), 32)
    counts = [np.count_nonzero(v) for v in vs.views]
    assert max(counts) <= 1.1 * min(counts)


def test_projection_reflection_swaps_top_bottom(rng):
    pts = rng.uniform(-0.5, 0.5, (400, 3))
    a = project_six_views(PointCloud(pts), 16)
    b = project_six_views(PointCloud(pts * [1, 1, -1]), 16)
    np.testing.assert_array_equal(b.views[0], a.views[1][:, ::-1])
    np.testing.assert_array_equal(b.views[1], a.views[0][:, ::-1])


def test_projection_deterministic_and_in_range():
    pc = synth_shape("torus", 800, seed=3)
    a, b = project_six_views(pc, 32), project_six_views(pc, 32)
    assert a.views.tobytes() == b.views.tobytes()
    assert a.views.min() >= 0 and a.views.max() <= 1


def test_projection_rejects_unnormalized():
    with pytest.raises(InvalidInputError):
        project_six_views(PointCloud([[0.6, 0, 0]]), 8)
    project_six_views(PointCloud([[0.5 + 1e-10, 0, 0]]), 8)


@pytest.mark.parametrize("n", [0, 3, 12])
def test_projection_rejects_bad_resolution(n):
    with pytest.raises(InvalidInputError):
        project_six_views(PointCloud([[0, 0, 0]]), n)


def test_viewset_shape_checked():
    with pytest.raises(InvalidInputError):
        ViewSet(np.zeros((5, 8, 8)))
    with pytest.raises(InvalidInputError):
        ViewSet(np.zeros((6, 8, 4)))


# -- synthetic shapes and corruptions ---------------------------------------------


def test_synth_deterministic():
    a, b = synth_shape("sphere", 512, 7), synth_shape("sphere", 512, 7)
    assert a.points.tobytes() == b.points.tobytes()


def test_cube_points_on_faces():
    pts = synth_shape("cube", 512, 7).points
    on_face = np.isclose(np.abs(pts), 0.5, atol=1e-12)
    assert np.all(on_face.sum(axis=1) >= 1)
    assert np.all(np.abs(pts) <= 0.5 + 1e-12)


def test_sphere_radius():
    pts = synth_shape("sphere", 2048, 3).points
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.5, atol=1e-6)


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_all_shapes_inside_cube(kind):
    pc = synth_shape(kind, 256, 1)
    assert len(pc) == 256
    assert np.all(np.abs(pc.points) <= 0.5 + 1e-9)
    vs = project_six_views(pc, 16)
    assert vs.views.min() >= 0 and vs.views.max() <= 1


def test_synth_errors():
    with pytest.raises(InvalidInputError):
        synth_shape("dodecahedron", 64)
    with pytest.raises(InvalidInputError):
        synth_shape("sphere", 7)


def test_dropout_fraction():
    pc = PointCloud(np.random.default_rng(0).uniform(-0.5, 0.5, (100, 3)))
    assert len(corrupt(pc, "dropout", 5, seed=1)) == 50
    assert len(corrupt(PointCloud([[0, 0, 0]]), "dropout", 5)) == 1


def test_jitter_displacement_small():
    pc = synth_shape("sphere", 512, 0)
    for seed in range(20):
        out = corrupt(pc, "jitter", 1, seed=seed)
        assert np.linalg.norm(out.points - pc.points, axis=1).mean() <= 0.04


def test_rotation_preserves_norms():
    from rwnet.geometry import random_rotation

    pts = synth_shape("sphere", 512, 0).points
    rot = random_rotation(np.random.default_rng(0), 75.0)
    np.testing.assert_allclose(np.linalg.norm(pts @ rot.T, axis=1), np.linalg.norm(pts, axis=1), atol=1e-12)
    out = corrupt(synth_shape("sphere", 512, 0), "rotate", 5, seed=2)
    assert np.all(np.abs(out.points) <= 0.5 + 1e-12)


@pytest.mark.parametrize("kind", CORRUPTIONS)
@pytest.mark.parametrize("severity", [0, 6, 2.5])
def test_corrupt_severity_checked(kind, severity):
    with pytest.raises(InvalidInputError):
        corrupt(synth_shape("cone", 64, 0), kind, severity)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corrupted_views_in_range(kind):
    out = corrupt(synth_shape("cross", 512, 0), kind, 5, seed=4)
    vs = project_six_views(out, 16)
    assert vs.views.min() >= 0 and vs.views.max() <= 1
