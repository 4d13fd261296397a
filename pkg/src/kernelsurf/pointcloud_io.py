"""Point-cloud and mesh file I/O: xyz, ply (ascii + little-endian binary), obj.

Binary ply is written with double-precision coordinates so a save/load
round trip is bit-exact; colors are quantized to 8-bit as is conventional
for the format.
"""

import os
from typing import Optional

import numpy as np

from .errors import EmptyInput, InvalidConfig, IoError, ParseError, SizeMismatch
from .geometry import OrientedPointCloud, TriangleMesh

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


def _open_binary(path):
    try:
        return open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# -- xyz ----------------------------------------------------------------------


def _load_xyz(path) -> OrientedPointCloud:
    rows = []
    width = None
    with _open_binary(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8", errors="replace").strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 6):
                raise ParseError(f"{path}:{lineno}: expected 3 or 6 columns, got {len(parts)}")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(f"{path}:{lineno}: inconsistent column count")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise EmptyInput(f"{path}: no points")
    data = np.asarray(rows, dtype=np.float64)
    normals = data[:, 3:6] if width == 6 else None
    try:
        return OrientedPointCloud(data[:, :3], normals)
    except SizeMismatch as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _save_xyz(cloud: OrientedPointCloud, path) -> None:
    arr = cloud.positions
    if cloud.normals is not None:
        arr = np.hstack([arr, cloud.normals])
    try:
        np.savetxt(path, arr, fmt="%.17g")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# -- ply ----------------------------------------------------------------------


def _parse_ply_header(fh, path):
    """Returns (format, elements) where elements is a list of
    (name, count, [(prop_name, dtype) ...]) with list properties encoded as
    ('list', count_dtype, item_dtype, prop_name)."""
    magic = fh.readline().strip()
    if magic != b"ply":
        raise ParseError(f"{path}: not a ply file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ParseError(f"{path}: unexpected end of header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}: unsupported ply format {parts[1]}")
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]], parts[4]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"{path}: unknown ply type {parts[1]}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt is None:
        raise ParseError(f"{path}: missing format line")
    return fmt, elements


def _read_ply(path):
    """Parse a ply file into {element_name: {prop: array}} plus face lists."""
    with _open_binary(path) as fh:
        fmt, elements = _parse_ply_header(fh, path)
        out = {}
        if fmt == "binary_little_endian":
            for name, count, props in elements:
                if any(p[0] == "list" for p in props):
                    if len(props) != 1:
                        raise ParseError(f"{path}: mixed list/scalar element unsupported")
                    _, cnt_t, item_t, pname = props[0]
                    faces = []
                    cnt_size = np.dtype(cnt_t).itemsize
                    item_size = np.dtype(item_t).itemsize
                    for _ in range(count):
                        raw = fh.read(cnt_size)
                        if len(raw) != cnt_size:
                            raise ParseError(f"{path}: truncated face data")
                        k = int(np.frombuffer(raw, dtype="<" + cnt_t)[0])
                        raw = fh.read(k * item_size)
                        if len(raw) != k * item_size:
                            raise ParseError(f"{path}: truncated face data")
                        faces.append(np.frombuffer(raw, dtype="<" + item_t).astype(np.int64))
                    out[name] = {pname: faces}
                else:
                    dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                    raw = fh.read(count * dt.itemsize)
                    if len(raw) != count * dt.itemsize:
                        raise ParseError(f"{path}: truncated {name} data")
                    rec = np.frombuffer(raw, dtype=dt)
                    out[name] = {p[0]: rec[p[0]] for p in props}
        else:
            lines = [ln.split() for ln in fh.read().decode("ascii", errors="replace").splitlines() if ln.strip()]
            cursor = 0
            for name, count, props in elements:
                if any(p[0] == "list" for p in props):
                    _, _, _, pname = props[0]
                    faces = []
                    for r in range(count):
                        parts = lines[cursor + r]
                        k = int(parts[0])
                        if len(parts) < 1 + k:
                            raise ParseError(f"{path}: short face record {r}")
                        faces.append(np.array([int(v) for v in parts[1 : 1 + k]], dtype=np.int64))
                    out[name] = {pname: faces}
                else:
                    block = lines[cursor : cursor + count]
                    if len(block) < count:
                        raise ParseError(f"{path}: truncated {name} element")
                    try:
                        arr = np.array([[float(v) for v in ln[: len(props)]] for ln in block])
                    except ValueError as exc:
                        raise ParseError(f"{path}: bad {name} record: {exc}") from exc
                    out[name] = {p[0]: arr[:, i] for i, p in enumerate(props)}
                cursor += count
        return out


def _load_ply_cloud(path) -> OrientedPointCloud:
    data = _read_ply(path)
    if "vertex" not in data:
        raise ParseError(f"{path}: no vertex element")
    v = data["vertex"]
    for c in ("x", "y", "z"):
        if c not in v:
            raise ParseError(f"{path}: vertex element missing {c}")
    if len(np.atleast_1d(v["x"])) == 0:
        raise EmptyInput(f"{path}: no points")
    pos = np.stack([np.asarray(v[c], dtype=np.float64) for c in ("x", "y", "z")], axis=1)
    normals = None
    if all(c in v for c in ("nx", "ny", "nz")):
        normals = np.stack([np.asarray(v[c], dtype=np.float64) for c in ("nx", "ny", "nz")], axis=1)
    try:
        return OrientedPointCloud(pos, normals)
    except SizeMismatch as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_point_cloud(path, format: Optional[str] = None) -> OrientedPointCloud:
    """Load an xyz or ply point cloud; normals populated when present."""
    if format is None:
        format = os.path.splitext(str(path))[1].lstrip(".").lower()
    if format == "xyz":
        return _load_xyz(path)
    if format == "ply":
        return _load_ply_cloud(path)
    raise InvalidConfig(f"unsupported point-cloud format {format!r}")


def load_point_colors(path) -> np.ndarray:
    """Per-point RGB in [0, 1] from a ply file's red/green/blue properties."""
    data = _read_ply(path)
    v = data.get("vertex", {})
    if not all(c in v for c in ("red", "green", "blue")):
        raise ParseError(f"{path}: no red/green/blue vertex properties")
    chans = [np.asarray(v[c]) for c in ("red", "green", "blue")]
    rgb = np.stack([c.astype(np.float64) for c in chans], axis=1)
    if np.issubdtype(chans[0].dtype, np.integer) or rgb.max(initial=0.0) > 1.0:
        rgb = rgb / 255.0
    return np.clip(rgb, 0.0, 1.0)


def save_point_cloud(
    cloud: OrientedPointCloud, path, format: Optional[str] = None,
    colors: Optional[np.ndarray] = None,
) -> None:
    """Write a point cloud as xyz text or binary ply (double precision)."""
    if format is None:
        format = os.path.splitext(str(path))[1].lstrip(".").lower()
    if format == "xyz":
        _save_xyz(cloud, path)
        return
    if format != "ply":
        raise InvalidConfig(f"unsupported point-cloud format {format!r}")
    props = ["property double x", "property double y", "property double z"]
    arr = cloud.positions
    if cloud.normals is not None:
        props += ["property double nx", "property double ny", "property double nz"]
        arr = np.hstack([arr, cloud.normals])
    names = [p.split()[-1] for p in props]
    fields = [(n, "<f8") for n in names]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        props += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {arr.shape[0]}\n" + "\n".join(props) + "\nend_header\n"
    )
    rec = np.empty(arr.shape[0], dtype=np.dtype(fields))
    for col, name in enumerate(names):
        rec[name] = arr[:, col]
    if colors is not None:
        rgb = np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# -- meshes -------------------------------------------------------------------


def save_mesh(mesh: TriangleMesh, path, format: Optional[str] = None) -> None:
    """Write a mesh as obj text or binary ply (with optional vertex colors)."""
    if format is None:
        format = os.path.splitext(str(path))[1].lstrip(".").lower()
    if format == "obj":
        try:
            with open(path, "w") as fh:
                for v in mesh.vertices:
                    fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
                for t in mesh.triangles:
                    fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
        return
    if format != "ply":
        raise InvalidConfig(f"unsupported mesh format {format!r}")
    props = ["property double x", "property double y", "property double z"]
    if mesh.vertex_colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n" + "\n".join(props) + "\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int32 vertex_indices\nend_header\n"
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            if mesh.vertex_colors is not None:
                dt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                               ("r", "u1"), ("g", "u1"), ("b", "u1")])
                rec = np.empty(mesh.n_vertices, dtype=dt)
                rec["x"], rec["y"], rec["z"] = mesh.vertices.T
                rgb = np.clip(np.rint(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
                rec["r"], rec["g"], rec["b"] = rgb.T
                fh.write(rec.tobytes())
            else:
                fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            tri = mesh.triangles.astype("<i4")
            counts = np.full((mesh.n_triangles, 1), 3, dtype="u1")
            face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            rec = np.empty(mesh.n_triangles, dtype=face_dt)
            rec["n"] = counts[:, 0]
            rec["idx"] = tri
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_mesh(path, format: Optional[str] = None) -> TriangleMesh:
    """Read an obj or ply mesh (triangles only; larger polygons are fanned)."""
    if format is None:
        format = os.path.splitext(str(path))[1].lstrip(".").lower()
    if format == "obj":
        verts, faces = [], []
        with _open_binary(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                parts = raw.decode("utf-8", errors="replace").split()
                if not parts:
                    continue
                if parts[0] == "v":
                    try:
                        verts.append([float(p) for p in parts[1:4]])
                    except ValueError as exc:
                        raise ParseError(f"{path}:{lineno}: {exc}") from exc
                elif parts[0] == "f":
                    try:
                        idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    except ValueError as exc:
                        raise ParseError(f"{path}:{lineno}: {exc}") from exc
                    for a, b in zip(idx[1:-1], idx[2:]):
                        faces.append([idx[0], a, b])
        return TriangleMesh(
            np.asarray(verts, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        )
    if format != "ply":
        raise InvalidConfig(f"unsupported mesh format {format!r}")
    data = _read_ply(path)
    if "vertex" not in data:
        raise ParseError(f"{path}: no vertex element")
    v = data["vertex"]
    pos = np.stack([np.asarray(v[c], dtype=np.float64) for c in ("x", "y", "z")], axis=1)
    colors = None
    if all(c in v for c in ("red", "green", "blue")):
        chans = [np.asarray(v[c]) for c in ("red", "green", "blue")]
        rgb = np.stack([c.astype(np.float64) for c in chans], axis=1)
        if np.issubdtype(chans[0].dtype, np.integer) or rgb.max(initial=0.0) > 1.0:
            rgb = rgb / 255.0
        colors = np.clip(rgb, 0.0, 1.0)
    faces = []
    if "face" in data:
        lists = next(iter(data["face"].values()))
        for poly in lists:
            for a, b in zip(poly[1:-1], poly[2:]):
                faces.append([poly[0], a, b])
    return TriangleMesh(pos, np.asarray(faces, dtype=np.int64).reshape(-1, 3), colors)
