"""Point cloud I/O, normalization and synthetic shape sampling.

A point cloud is an ``(N, 3)`` float64 numpy array throughout the package.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

BOX_SIZE = 64.0

SHAPE_KINDS = ("sphere", "torus", "cube_surface", "cylinder", "two_spheres")


class PlyError(ValueError):
    pass


class OffError(ValueError):
    pass


def as_cloud(points) -> np.ndarray:
    """Validate and convert to an ``(N, 3)`` float64 array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_FLOAT_TYPES = {"f4", "f8"}


@dataclass
class _Element:
    name: str
    count: int
    # (name, dtype) for scalars, (name, count dtype, item dtype) for lists
    props: list


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError("PLY header has no end_header line")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError(f"PLY header not terminated (byte {end})")
    body_start = nl + 1
    lines = data[:body_start].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError("missing 'ply' magic on line 1")

    fmt = None
    elements: list[_Element] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported PLY format on line {lineno}: {raw.strip()!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"malformed element declaration on line {lineno}")
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyError(f"bad element count on line {lineno}") from None
            if count < 0:
                raise PlyError(f"negative element count on line {lineno}")
            elements.append(_Element(tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"property before any element on line {lineno}")
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PlyError(f"malformed list property on line {lineno}")
                elements[-1].props.append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise PlyError(f"malformed property on line {lineno}")
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
        else:
            raise PlyError(f"unexpected header keyword on line {lineno}: {tok[0]!r}")
    if fmt is None:
        raise PlyError("PLY header has no format line")
    return fmt, elements, body_start, len(lines)


def _vertex_columns(el: _Element) -> list[int]:
    names = [p[0] for p in el.props]
    cols = []
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
        prop = el.props[names.index(axis)]
        if len(prop) != 2 or prop[1] not in _FLOAT_TYPES:
            raise PlyError(f"vertex property {axis!r} must be float or double")
        cols.append(names.index(axis))
    return cols


def load_ply(path) -> np.ndarray:
    """Read the x, y, z vertex coordinates of an ASCII or binary-LE PLY file."""
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body_start, header_lines = _parse_header(data)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise PlyError("PLY has no vertex element")
    cols = _vertex_columns(vertex)

    if fmt == "ascii":
        pts = _read_ascii(data[body_start:], elements, vertex, cols, header_lines)
    else:
        pts = _read_binary(data, body_start, elements, vertex, cols)

    bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
    if bad.size:
        raise PlyError(f"non-finite coordinate in vertex {bad[0]}")
    if pts.shape[0] < 1:
        raise PlyError("PLY has zero vertices")
    return pts


def _read_ascii(body: bytes, elements, vertex, cols, header_lines) -> np.ndarray:
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    out = None
    for el in elements:
        if el is vertex:
            out = np.empty((el.count, 3))
        for i in range(el.count):
            lineno = header_lines + pos + 1
            if pos >= len(lines):
                raise PlyError(
                    f"vertex count mismatch: expected {el.count} {el.name} rows, "
                    f"file ends at line {lineno}")
            tok = lines[pos].split()
            pos += 1
            if el is vertex:
                if len(tok) < len(el.props):
                    raise PlyError(f"too few values on line {lineno}")
                try:
                    out[i] = [float(tok[c]) for c in cols]
                except ValueError:
                    raise PlyError(f"unparseable coordinate on line {lineno}") from None
                if not np.all(np.isfinite(out[i])):
                    raise PlyError(f"non-finite coordinate on line {lineno}")
        if el is vertex:
            break
    return out


def _read_binary(data: bytes, offset: int, elements, vertex, cols) -> np.ndarray:
    for el in elements:
        has_list = any(len(p) == 3 for p in el.props)
        if not has_list:
            dtype = np.dtype([(f"p{j}", "<" + p[1]) for j, p in enumerate(el.props)])
            need = dtype.itemsize * el.count
            if offset + need > len(data):
                raise PlyError(
                    f"vertex count mismatch: {el.name} needs {need} bytes at byte "
                    f"{offset}, only {len(data) - offset} available")
            arr = np.frombuffer(data, dtype=dtype, count=el.count, offset=offset)
            if el is vertex:
                pts = np.stack([arr[f"p{c}"].astype(np.float64) for c in cols], axis=1)
                for i, row in enumerate(pts):
                    if not np.all(np.isfinite(row)):
                        raise PlyError(
                            f"non-finite coordinate at byte {offset + i * dtype.itemsize}")
                return pts
            offset += need
        else:
            if el is vertex:
                raise PlyError("list properties on the vertex element are not supported")
            for _ in range(el.count):
                for p in el.props:
                    if len(p) == 2:
                        offset += np.dtype(p[1]).itemsize
                    else:
                        cdt = np.dtype("<" + p[1])
                        if offset + cdt.itemsize > len(data):
                            raise PlyError(f"truncated list property at byte {offset}")
                        n = int(np.frombuffer(data, cdt, 1, offset)[0])
                        offset += cdt.itemsize + n * np.dtype(p[2]).itemsize
    raise PlyError("vertex element not found in body")


def save_ply(cloud, path, mode: str = "binary") -> None:
    """Write a cloud as PLY. Binary mode stores doubles and round-trips bit-exactly."""
    pts = as_cloud(cloud)
    if mode not in ("ascii", "binary"):
        raise ValueError(f"mode must be 'ascii' or 'binary', got {mode!r}")
    fmt = "ascii" if mode == "ascii" else "binary_little_endian"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if mode == "ascii":
            fh.write("".join(
                f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts.tolist()
            ).encode("ascii"))
        else:
            fh.write(pts.astype("<f8").tobytes())


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class ScaleParams:
    """Uniform scale + translation mapping world coordinates into [0, 64]^3."""

    offset: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def normalize_to_box(cloud) -> tuple[np.ndarray, ScaleParams]:
    pts = as_cloud(cloud)
    if pts.shape[0] < 2:
        raise ValueError("normalization needs at least 2 points")
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    if extent <= 0:
        raise ValueError("degenerate cloud: all points identical")
    params = ScaleParams(tuple(float(v) for v in lo), BOX_SIZE / extent)
    return apply_scale(pts, params), params


def apply_scale(cloud, params: ScaleParams) -> np.ndarray:
    """Apply an existing normalization, clipping to the box."""
    pts = (np.asarray(cloud, dtype=np.float64) - np.asarray(params.offset)) * params.scale
    return np.clip(pts, 0.0, BOX_SIZE)


def denormalize(cloud, params: ScaleParams) -> np.ndarray:
    return np.asarray(cloud, dtype=np.float64) / params.scale + np.asarray(params.offset)


# ---------------------------------------------------------------------------
# synthetic shapes


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n: int
    seed: int = 0


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n, center=(0.0, 0.0, 0.0)):
    return _unit_vectors(rng, n) + np.asarray(center)


def _torus(rng, n, major=1.0, minor=0.35):
    # rejection on the tube angle: surface density is proportional to major + minor*cos(v)
    out = np.empty((0, 2))
    while out.shape[0] < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, major + minor, size=2 * n) < major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n, 0], out[:n, 1]
    r = major + minor * np.cos(v)
    return np.stack([r * np.cos(u), r * np.sin(u), minor * np.sin(v)], axis=1)


def _cube_surface(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        m = axis == a
        others = [b for b in range(3) if b != a]
        pts[m, a] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def _cylinder(rng, n, radius=1.0, height=2.0):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    m = part == 0
    pts[m, 0] = radius * np.cos(theta[m])
    pts[m, 1] = radius * np.sin(theta[m])
    pts[m, 2] = rng.uniform(-height / 2, height / 2, size=int(m.sum()))
    for p, z in ((1, -height / 2), (2, height / 2)):
        m = part == p
        r = radius * np.sqrt(rng.uniform(0, 1, size=int(m.sum())))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def _two_spheres(rng, n):
    left = rng.uniform(size=n) < 0.5
    pts = _unit_vectors(rng, n)
    pts[:, 0] += np.where(left, -1.5, 1.5)
    return pts


_SHAPES = {
    "sphere": _sphere,
    "torus": _torus,
    "cube_surface": _cube_surface,
    "cylinder": _cylinder,
    "two_spheres": _two_spheres,
}


def synth_shape(spec: ShapeSpec) -> np.ndarray:
    """Sample ``spec.n`` points uniformly on a unit-scale analytic surface."""
    if spec.kind not in _SHAPES:
        raise ValueError(f"unknown shape kind {spec.kind!r}; expected one of {SHAPE_KINDS}")
    if spec.n < 8:
        raise ValueError("synth_shape needs n >= 8")
    rng = np.random.default_rng(spec.seed)
    return _SHAPES[spec.kind](rng, spec.n)


# ---------------------------------------------------------------------------
# OFF meshes


def load_off(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an OFF mesh into vertices and fan-triangulated faces."""
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or not tokens[0].startswith("OFF"):
        raise OffError("missing OFF magic")
    # ModelNet40 has files whose first line is glued, e.g. "OFF490 518 0"
    head = tokens[0][3:]
    rest = ([head] if head else []) + tokens[1:]
    try:
        nv, nf = int(rest[0]), int(rest[1])
        pos = 3
        verts = np.array(rest[pos:pos + 3 * nv], dtype=np.float64)
        if verts.size != 3 * nv:
            raise OffError("truncated vertex list")
        verts = verts.reshape(nv, 3)
        pos += 3 * nv
        tris = []
        for f in range(nf):
            k = int(rest[pos])
            idx = [int(t) for t in rest[pos + 1:pos + 1 + k]]
            if len(idx) != k or k < 3:
                raise OffError(f"malformed face {f}")
            pos += 1 + k
            for j in range(1, k - 1):
                tris.append((idx[0], idx[j], idx[j + 1]))
    except (IndexError, ValueError) as exc:
        raise OffError(f"malformed OFF file: {exc}") from None
    if not tris:
        raise OffError("OFF mesh has no faces")
    faces = np.asarray(tris, dtype=np.int64)
    if faces.min() < 0 or faces.max() >= nv:
        raise OffError("face references a vertex out of range")
    if not np.all(np.isfinite(verts)):
        raise OffError("non-finite vertex coordinate")
    return verts, faces


def sample_mesh(verts: np.ndarray, faces: np.ndarray, n: int, seed: int) -> np.ndarray:
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = area.sum()
    if not total > 0:
        raise OffError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(faces), size=n, p=area / total)
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    return (1 - r1) * a[tri] + r1 * (1 - r2) * b[tri] + r1 * r2 * c[tri]


def load_off_and_sample(path, n: int, seed: int = 0) -> np.ndarray:
    verts, faces = load_off(path)
    return sample_mesh(verts, faces, n, seed)


def list_meshes(directory) -> list[str]:
    return sorted(
        os.path.join(directory, f) for f in os.listdir(directory) if f.lower().endswith(".off")
    )
