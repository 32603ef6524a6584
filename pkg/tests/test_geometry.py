import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchpcc import geometry
from patchpcc.geometry import (
    OffError,
    PlyError,
    ShapeSpec,
    denormalize,
    load_off_and_sample,
    load_ply,
    normalize_to_box,
    save_ply,
    synth_shape,
)


def write(path, text):
    path.write_text(text)
    return path


ASCII_TRI = """ply
format ascii 1.0
comment three vertices
element vertex 3
property float x
property float y
property float z
property uchar red
end_header
0 0 0 255
1 0 0 0
0 1 0 7
"""


def test_load_ascii_in_order(tmp_path):
    pts = load_ply(write(tmp_path / "t.ply", ASCII_TRI))
    np.testing.assert_array_equal(pts, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_missing_z_is_parse_error(tmp_path):
    text = ASCII_TRI.replace("property float z\n", "")
    with pytest.raises(PlyError, match="'z'"):
        load_ply(write(tmp_path / "t.ply", text))


def test_vertex_count_mismatch_names_line(tmp_path):
    text = ASCII_TRI.replace("element vertex 3", "element vertex 4")
    with pytest.raises(PlyError, match="line"):
        load_ply(write(tmp_path / "t.ply", text))


def test_non_finite_rejected(tmp_path):
    text = ASCII_TRI.replace("1 0 0 0", "1 nan 0 0")
    with pytest.raises(PlyError, match="line 11"):
        load_ply(write(tmp_path / "t.ply", text))


def test_binary_truncated_reports_byte(tmp_path, rng):
    p = tmp_path / "c.ply"
    save_ply(rng.normal(size=(10, 3)), p)
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(PlyError, match="byte"):
        load_ply(p)


def test_malformed_header(tmp_path):
    with pytest.raises(PlyError):
        load_ply(write(tmp_path / "t.ply", "ply\nformat ascii 1.0\nelement vertex x\nend_header\n"))
    with pytest.raises(PlyError):
        load_ply(write(tmp_path / "t.ply", "ply\nformat binary_big_endian 1.0\nend_header\n"))


def test_binary_with_face_element_and_float32(tmp_path):
    verts = np.array([(0.5, 1.5, 2.5, 9), (3.0, 4.0, 5.0, 1)],
                     dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("s", "<i4")])
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
              "property float x\nproperty float y\nproperty float z\nproperty int s\n"
              "element face 1\nproperty list uchar int vertex_indices\nend_header\n")
    face = bytes([3]) + np.array([0, 1, 0], "<i4").tobytes()
    p = tmp_path / "b.ply"
    p.write_bytes(header.encode() + verts.tobytes() + face)
    np.testing.assert_array_equal(load_ply(p), [[0.5, 1.5, 2.5], [3, 4, 5]])


def test_save_ascii_single_point(tmp_path):
    p = tmp_path / "one.ply"
    save_ply(np.array([[1.0, 2.0, 3.0]]), p, "ascii")
    text = p.read_text()
    assert text.startswith("ply\nformat ascii 1.0\n")
    assert text.rstrip().splitlines()[-1] == "1 2 3"
    np.testing.assert_array_equal(load_ply(p), [[1, 2, 3]])


def test_save_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_ply(np.zeros((1, 3)), tmp_path / "missing" / "x.ply")


def test_binary_roundtrip_1000(tmp_path, rng):
    pts = rng.normal(size=(1000, 3)) * 1e3
    save_ply(pts, tmp_path / "r.ply")
    out = load_ply(tmp_path / "r.ply")
    assert out.tobytes() == pts.tobytes()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=finite))
def test_roundtrip_fuzz(tmp_path_factory, pts):
    d = tmp_path_factory.mktemp("fuzz")
    save_ply(pts, d / "b.ply", "binary")
    assert load_ply(d / "b.ply").tobytes() == pts.tobytes()
    save_ply(pts, d / "a.ply", "ascii")
    np.testing.assert_array_equal(load_ply(d / "a.ply"), pts)


def test_normalize_unit_cube(rng):
    pts = rng.uniform(size=(500, 3))
    pts[0] = 0.0
    pts[1] = 1.0
    out, sp = normalize_to_box(pts)
    assert sp.scale == pytest.approx(64.0)
    np.testing.assert_allclose(sp.offset, 0.0)
    assert out.max() == pytest.approx(64.0)


def test_normalize_anisotropic_box():
    pts = np.array([[-1, 0, 0], [1, 0.5, 0.5], [0, 0.25, 0.1]])
    out, sp = normalize_to_box(pts)
    assert sp.scale == 32.0
    assert sp.offset == (-1.0, 0.0, 0.0)
    np.testing.assert_allclose(out.min(axis=0), [0, 0, 0])
    np.testing.assert_allclose(out.max(axis=0), [64, 16, 16])


def test_normalize_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        normalize_to_box(np.ones((5, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 50), st.just(3)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_normalize_box_and_inverse(pts):
    if np.ptp(pts, axis=0).max() <= 1e-6:
        return
    out, sp = normalize_to_box(pts)
    assert out.min() >= -1e-9 and out.max() <= 64 + 1e-9
    assert np.isclose(np.ptp(out, axis=0).max(), 64.0)
    back = denormalize(out, sp)
    scale = max(np.abs(pts).max(), 1e-12)
    assert np.abs(back - pts).max() <= 1e-6 * scale


def test_sphere_radius():
    pts = synth_shape(ShapeSpec("sphere", 8192, 1))
    assert pts.shape == (8192, 3)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", geometry.SHAPE_KINDS)
def test_synth_deterministic(kind):
    a = synth_shape(ShapeSpec(kind, 500, 42))
    b = synth_shape(ShapeSpec(kind, 500, 42))
    assert a.shape == (500, 3) and np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != synth_shape(ShapeSpec(kind, 500, 43)).tobytes()


def test_cube_face_counts():
    pts = synth_shape(ShapeSpec("cube_surface", 6000, 3))
    face = np.argmax(np.abs(pts), axis=1) * 2 + (pts[np.arange(6000), np.argmax(np.abs(pts), axis=1)] > 0)
    counts = np.bincount(face, minlength=6)
    assert np.all(np.abs(counts - 1000) <= 100), counts


def test_torus_surface():
    pts = synth_shape(ShapeSpec("torus", 2000, 0))
    ring = np.hypot(pts[:, 0], pts[:, 1]) - 1.0
    np.testing.assert_allclose(np.hypot(ring, pts[:, 2]), 0.35, atol=1e-9)


def test_synth_errors():
    with pytest.raises(ValueError, match="unknown"):
        synth_shape(ShapeSpec("dodecahedron", 100, 0))
    with pytest.raises(ValueError):
        synth_shape(ShapeSpec("sphere", 4, 0))


def test_off_single_triangle(tmp_path):
    p = write(tmp_path / "t.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    pts = load_off_and_sample(p, 100, seed=0)
    assert pts.shape == (100, 3)
    assert np.all(pts[:, 2] == 0)
    assert np.all(pts[:, :2] >= -1e-12)
    assert np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)


def test_off_area_weighting(tmp_path):
    # areas 1 and 3, spatially separated by x
    text = ("OFF\n6 2 0\n0 0 0\n1 0 0\n0 2 0\n10 0 0\n13 0 0\n10 2 0\n"
            "3 0 1 2\n3 3 4 5\n")
    pts = load_off_and_sample(write(tmp_path / "two.off", text), 4000, seed=5)
    small = int((pts[:, 0] < 5).sum())
    assert abs(small - 1000) <= 80
    assert abs((4000 - small) - 3000) <= 80


def test_off_glued_header_and_quads(tmp_path):
    text = "OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
    pts = load_off_and_sample(write(tmp_path / "q.off", text), 400, seed=1)
    assert pts[:, :2].min() >= 0 and pts[:, :2].max() <= 1
    # fan triangulation covers both halves of the square
    assert (pts[:, 0] > pts[:, 1]).any() and (pts[:, 0] < pts[:, 1]).any()


def test_off_errors(tmp_path):
    with pytest.raises(OffError, match="no faces"):
        load_off_and_sample(write(tmp_path / "e.off", "OFF\n3 0 0\n0 0 0\n1 0 0\n0 1 0\n"), 10)
    with pytest.raises(OffError):
        load_off_and_sample(write(tmp_path / "bad.off", "PLY\n"), 10)
    with pytest.raises(OffError):
        load_off_and_sample(write(tmp_path / "trunc.off", "OFF\n3 1 0\n0 0 0\n1 0\n"), 10)
