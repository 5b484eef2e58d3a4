"""Point cloud ingestion, synthetic shapes, corruptions and six-view depth
projection."""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ParseError

VIEW_NAMES = ("top", "bottom", "front", "back", "left", "right")
SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "ellipsoid", "cross")
CORRUPTIONS = ("jitter", "dropout", "rotate")

# Depth values live on a 2^-16 grid so that the Haar round trip of a
# projected view reproduces it bit for bit.
DEPTH_LEVELS = 2**16
_TOL = 1e-9

# (depth axis, depth sign, column axis, flip columns, row axis)
# depth sign +1: viewer on the positive side, distance = 0.5 - coord.
# Columns follow the viewer's right-hand direction; rows run top-down
# along the row axis.  Mirrored frames flip column indices rather than
# recomputing from negated coordinates, which keeps reflections exact.
_VIEW_FRAMES = {
    "top": (2, +1, 0, False, 1),
    "bottom": (2, -1, 0, True, 1),
    "front": (1, -1, 0, False, 2),
    "back": (1, +1, 0, True, 2),
    "left": (0, -1, 1, True, 2),
    "right": (0, +1, 1, False, 2),
}


@dataclass
class PointCloud:
    points: np.ndarray
    label: object = None
    sample_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise InvalidInputError("point cloud is empty")

    def __len__(self):
        return len(self.points)

    def with_points(self, points):
        return PointCloud(points, self.label, self.sample_id)


@dataclass
class ViewSet:
    """Six depth images of one cloud, shape (6, N, N), in VIEW_NAMES order."""

    views: np.ndarray
    sample_id: str = ""
    label: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float64)
        if self.views.ndim != 3 or self.views.shape[0] != 6:
            raise InvalidInputError(f"a ViewSet holds exactly six images, got shape {self.views.shape}")
        if self.views.shape[1] != self.views.shape[2]:
            raise InvalidInputError(f"views must be square, got {self.views.shape[1:]}")

    @property
    def resolution(self):
        return self.views.shape[-1]

    def replace_views(self, views):
        return ViewSet(views, self.sample_id, self.label, dict(self.meta))


def check_depth_image(img):
    img = np.asarray(img)
    n = img.shape[-1]
    if img.ndim < 2 or img.shape[-2] != n or n < 1 or n & (n - 1):
        raise InvalidInputError(f"depth images must be square with power-of-two side, got {img.shape}")
    if np.any(img < 0) or np.any(img > 1):
        raise InvalidInputError("depth values must lie in [0, 1]")


# -- loading ----------------------------------------------------------------


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric token in {' '.join(tokens)!r}", lineno) from None


def _read_off(lines):
    body = [(i, ln.split("#", 1)[0].strip()) for i, ln in enumerate(lines, 1)]
    body = [(i, ln) for i, ln in body if ln]
    if not body:
        raise ParseError("empty file", 1)
    lineno, first = body[0]
    if not first.startswith("OFF"):
        raise ParseError("missing OFF header", lineno)
    rest = first[3:].strip()
    pos = 1
    if rest:
        count_line, counts = lineno, rest.split()
    else:
        if len(body) < 2:
            raise ParseError("missing vertex/face count line", lineno + 1)
        count_line, counts = body[1][0], body[1][1].split()
        pos = 2
    if len(counts) < 1:
        raise ParseError("missing vertex count", count_line)
    try:
        n_vertices = int(counts[0])
    except ValueError:
        raise ParseError(f"bad vertex count {counts[0]!r}", count_line) from None
    if n_vertices <= 0:
        raise ParseError("empty vertex list", count_line)
    vertex_lines = body[pos:pos + n_vertices]
    if len(vertex_lines) < n_vertices:
        last = vertex_lines[-1][0] if vertex_lines else count_line
        raise ParseError(f"expected {n_vertices} vertices, found {len(vertex_lines)}", last + 1)
    pts = []
    for i, ln in vertex_lines:
        vals = _floats(ln.split(), i)
        if len(vals) < 3:
            raise ParseError("vertex needs three coordinates", i)
        pts.append(vals[:3])
    return pts


def _read_xyz(lines):
    pts = []
    for i, ln in enumerate(lines, 1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        vals = _floats(ln.replace(",", " ").split(), i)
        if len(vals) < 3:
            raise ParseError("expected an 'x y z' triple", i)
        pts.append(vals[:3])
    if not pts:
        raise ParseError("empty vertex list", len(lines) or 1)
    return pts


def load_point_cloud(path, fmt=None, label=None):
    """Read an OFF or XYZ file; faces in OFF files are ignored."""
    fmt = (fmt or os.path.splitext(path)[1].lstrip(".")).lower()
    if fmt not in ("off", "xyz"):
        raise InvalidInputError(f"unsupported point cloud format {fmt!r}")
    with open(path) as fh:
        lines = fh.read().splitlines()
    pts = _read_off(lines) if fmt == "off" else _read_xyz(lines)
    sample_id = os.path.splitext(os.path.normpath(path))[0].replace(os.sep, "/")
    return PointCloud(np.array(pts), label=label, sample_id=sample_id)


# -- normalisation and projection ---------------------------------------------


def normalize_unit_cube(pc):
    """Center the bounding box at the origin and scale its longest side to 1."""
    pts = pc.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        return pc.with_points(np.zeros_like(pts))
    center = (lo + hi) / 2.0
    return pc.with_points((pts - center) / extent)


def _check_normalized(points):
    if np.any(np.abs(points) > 0.5 + _TOL):
        raise InvalidInputError("point cloud is not normalized to the unit cube [-0.5, 0.5]^3")


def _pixel_index(coord, n):
    return np.clip(np.floor((coord + 0.5) * n), 0, n - 1).astype(np.int64)


def quantize_depth(values):
    return np.round(np.asarray(values) * DEPTH_LEVELS) / DEPTH_LEVELS


def project_view(points, name, resolution):
    depth_axis, sign, col_axis, flip, row_axis = _VIEW_FRAMES[name]
    pts = np.clip(points, -0.5, 0.5)
    dist = 0.5 - pts[:, depth_axis] if sign > 0 else 0.5 + pts[:, depth_axis]
    value = quantize_depth(1.0 - dist)
    col = _pixel_index(pts[:, col_axis], resolution)
    if flip:
        col = resolution - 1 - col
    row = resolution - 1 - _pixel_index(pts[:, row_axis], resolution)
    img = np.zeros((resolution, resolution))
    np.maximum.at(img, (row, col), value)
    return img


def project_six_views(pc, resolution=32):
    """Orthographic depth maps from the six axis directions.

    Pixel value is ``1 - d`` for the point nearest the viewing plane, ``d``
    being its distance from that plane; empty pixels stay 0.
    """
    if resolution < 2 or resolution & (resolution - 1):
        raise InvalidInputError(f"resolution must be a power of two >= 2, got {resolution}")
    _check_normalized(pc.points)
    views = np.stack([project_view(pc.points, name, resolution) for name in VIEW_NAMES])
    return ViewSet(views, sample_id=pc.sample_id, label=pc.label)


# -- synthetic shapes -----------------------------------------------------------


def _sphere_dirs(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _pick(rng, n, weights):
    weights = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(weights), size=n, p=weights / weights.sum())


def _box_surface(rng, n, half):
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = _pick(rng, n, np.repeat(areas, 2))
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * half
    fixed = axis // 2
    side = np.where(axis % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), fixed] = side * half[fixed]
    return pts


def _sample_sphere(rng, n):
    return 0.5 * _sphere_dirs(rng, n)


def _sample_cube(rng, n):
    return _box_surface(rng, n, (0.5, 0.5, 0.5))


def _sample_cylinder(rng, n):
    r, h = 0.5, 1.0
    part = _pick(rng, n, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-0.5, 0.5, n), np.where(part == 1, 0.5, -0.5))
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])


def _sample_cone(rng, n):
    r, h = 0.5, 1.0
    slant = np.hypot(r, h)
    part = _pick(rng, n, [np.pi * r * slant, np.pi * r * r])
    theta = rng.uniform(0, 2 * np.pi, n)
    t = np.sqrt(rng.uniform(0, 1, n))  # area density grows linearly away from the apex
    rad = np.where(part == 0, r * t, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, 0.5 - h * t, -0.5)
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])


def _sample_torus(rng, n):
    big, small = 0.35, 0.15
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, 1, 2 * n) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)])])
    return out[:n]


def _sample_pyramid(rng, n):
    apex = np.array([0.0, 0.0, 0.5])
    corners = np.array([[0.5, 0.5, -0.5], [-0.5, 0.5, -0.5], [-0.5, -0.5, -0.5], [0.5, -0.5, -0.5]])
    tris = [(apex, corners[i], corners[(i + 1) % 4]) for i in range(4)]
    tris += [(corners[0], corners[1], corners[2]), (corners[0], corners[2], corners[3])]
    tris = np.array(tris)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = _pick(rng, n, areas)
    a, b = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    t = tris[which]
    return t[:, 0] + a[:, None] * (t[:, 1] - t[:, 0]) + b[:, None] * (t[:, 2] - t[:, 0])


def _sample_ellipsoid(rng, n):
    return _sphere_dirs(rng, n) * np.array([0.5, 0.35, 0.2])


def _sample_cross(rng, n):
    arm = 0.15
    boxes = [np.array([0.5, arm, arm]), np.array([arm, 0.5, arm]), np.array([arm, arm, 0.5])]
    out = np.empty((0, 3))
    while len(out) < n:
        pts = np.vstack([_box_surface(rng, n, b) for b in boxes])
        inside = np.zeros(len(pts), dtype=bool)
        for b in boxes:
            inside |= np.all(np.abs(pts) < b - 1e-12, axis=1)
        pts = pts[~inside]
        out = np.vstack([out, pts[rng.permutation(len(pts))]])
    return out[:n]


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "pyramid": _sample_pyramid,
    "ellipsoid": _sample_ellipsoid,
    "cross": _sample_cross,
}


def synth_shape(kind, n_points=1024, seed=0):
    """Deterministic surface samples of a canonical shape inside the unit cube."""
    if kind not in _SAMPLERS:
        raise InvalidInputError(f"unknown shape kind {kind!r}; choose from {', '.join(SHAPE_KINDS)}")
    if n_points < 8:
        raise InvalidInputError(f"n_points must be >= 8, got {n_points}")
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[kind](rng, n_points)
    return PointCloud(pts, label=kind, sample_id=f"{kind}-{n_points}-{seed}")


# -- corruptions ----------------------------------------------------------------


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_rotation(rng, max_degrees):
    axis = _sphere_dirs(rng, 1)[0]
    angle = np.deg2rad(rng.uniform(0.0, max_degrees))
    return rotation_matrix(axis, angle)


def corrupt(pc, kind, severity, seed=0):
    """Apply one of the corruptions at severity 1..5.

    jitter: Gaussian noise with std 0.01*severity, clipped back to the cube.
    dropout: removes round(0.1*severity*n) points, keeping at least one.
    rotate: random axis, angle up to 15*severity degrees, then renormalised.
    """
    if kind not in CORRUPTIONS:
        raise InvalidInputError(f"unknown corruption {kind!r}")
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise InvalidInputError(f"severity must be an integer in 1..5, got {severity!r}")
    rng = np.random.default_rng(seed)
    pts = pc.points
    if kind == "jitter":
        noisy = pts + rng.normal(0.0, 0.01 * severity, pts.shape)
        return pc.with_points(np.clip(noisy, -0.5, 0.5))
    if kind == "dropout":
        n = len(pts)
        n_drop = min(int(round(0.1 * severity * n)), n - 1)
        keep = np.sort(rng.permutation(n)[n_drop:])
        return pc.with_points(pts[keep])
    rot = random_rotation(rng, 15.0 * severity)
    return normalize_unit_cube(pc.with_points(pts @ rot.T))
