"""SDF grid baking, marching cubes extraction, and mesh IO.

The extractor uses the classic 256-case tables with linear interpolation
along crossing edges. Vertices are keyed by global grid edge, so shared
vertices are exact and closed level sets come out watertight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_AXIS, EDGE_ORIGIN, TRI_TABLE


@dataclass
class SdfGrid:
    values: np.ndarray       # (N, N, N)
    coords: np.ndarray       # (N,) axis coordinates, shared by x/y/z

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def spacing(self):
        return float(self.coords[1] - self.coords[0])


@dataclass
class TriangleMesh:
    vertices: np.ndarray     # (V, 3)
    triangles: np.ndarray    # (F, 3) int
    normals: np.ndarray = None  # optional per-vertex normals

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def is_empty(self):
        return self.n_triangles == 0


def bake_grid_from_callable(sdf_fn, n, half_extent=1.0, chunk=262144):
    """Evaluate an SDF callable on an n^3 lattice over [-h, h]^3."""
    if n < 8:
        raise ValueError("bake_grid: resolution must be at least 8")
    coords = np.linspace(-half_extent, half_extent, n)
    xx, yy, zz = np.meshgrid(coords, coords, coords, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        out[start:start + chunk] = sdf_fn(pts[start:start + chunk])
    values = out.reshape(n, n, n)
    if not np.all(np.isfinite(values)):
        raise ValueError("bake_grid: SDF produced non-finite values")
    return values, coords


def bake_grid(field, n, half_extent=1.0, chunk=262144):
    """SdfGrid of the field's geometry network over the bounding cube."""
    values, coords = bake_grid_from_callable(field.sdf_np, n, half_extent, chunk)
    return SdfGrid(values=values, coords=coords)


def trilinear_interpolate(values, coords, pts):
    """Trilinear interpolation of a grid at arbitrary points inside it."""
    n = values.shape[0]
    lo, hi = coords[0], coords[-1]
    spacing = (hi - lo) / (n - 1)
    f = (np.atleast_2d(pts) - lo) / spacing
    i0 = np.clip(np.floor(f).astype(np.int64), 0, n - 2)
    frac = f - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    c = 0.0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                c = c + values[ix + dx, iy + dy, iz + dz] * wx * wy * wz
    return c


def marching_cubes(values, coords, iso=0.0):
    """Extract the iso-surface as a TriangleMesh.

    Triangles wind so that face normals point toward positive SDF values
    (outward for a signed distance field). An all-positive or all-negative
    grid yields an empty mesh.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    inside = values < iso
    if not inside.any() or inside.all():
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            triangles=np.zeros((0, 3), dtype=np.int64))

    idx = np.zeros((n - 1, n - 1, n - 1), dtype=np.uint16)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        idx |= inside[dx:dx + n - 1, dy:dy + n - 1, dz:dz + n - 1].astype(np.uint16) << bit
    cx, cy, cz = np.nonzero((idx != 0) & (idx != 255))
    cube_idx = idx[cx, cy, cz].astype(np.int64)

    rows = TRI_TABLE[cube_idx][:, :15].reshape(-1, 5, 3)   # (M, 5, 3)
    valid = rows[:, :, 0] >= 0                             # (M, 5)
    m_idx, t_idx = np.nonzero(valid)
    tri_edges = rows[m_idx, t_idx]                         # (T, 3) local edge ids
    cell = np.stack([cx, cy, cz], axis=1)[m_idx]           # (T, 3)

    flat_edges = tri_edges.reshape(-1)
    flat_cells = np.repeat(cell, 3, axis=0)
    origin = flat_cells + EDGE_ORIGIN[flat_edges]
    axis = EDGE_AXIS[flat_edges]
    keys = ((axis * n + origin[:, 0]) * n + origin[:, 1]) * n + origin[:, 2]

    uniq, inverse = np.unique(keys, return_inverse=True)
    u_axis = uniq // (n * n * n)
    rem = uniq % (n * n * n)
    ux = rem // (n * n)
    uy = (rem // n) % n
    uz = rem % n
    step = np.zeros((uniq.size, 3), dtype=np.int64)
    step[np.arange(uniq.size), u_axis] = 1
    v0 = values[ux, uy, uz]
    v1 = values[ux + step[:, 0], uy + step[:, 1], uz + step[:, 2]]
    t = v0 / (v0 - v1)
    p0 = np.stack([coords[ux], coords[uy], coords[uz]], axis=1)
    spacing = coords[1] - coords[0]
    verts = p0 + (t[:, None] * spacing) * step

    tris = inverse.reshape(-1, 3)[:, ::-1]  # wind faces toward positive SDF
    # drop collapsed triangles (repeated vertex or zero area)
    distinct = ((tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2])
                & (tris[:, 0] != tris[:, 2]))
    tris = tris[distinct]
    e1 = verts[tris[:, 1]] - verts[tris[:, 0]]
    e2 = verts[tris[:, 2]] - verts[tris[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    tris = tris[area2 > 1e-14]

    used = np.unique(tris)
    remap = np.full(uniq.size, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TriangleMesh(vertices=verts[used], triangles=remap[tris])


def mesh_euler_characteristic(mesh: TriangleMesh):
    """V - E + F with undirected edge counting."""
    tris = mesh.triangles
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq = np.unique(edges, axis=0)
    return mesh.n_vertices - uniq.shape[0] + mesh.n_triangles


def face_normals(mesh: TriangleMesh):
    e1 = mesh.vertices[mesh.triangles[:, 1]] - mesh.vertices[mesh.triangles[:, 0]]
    e2 = mesh.vertices[mesh.triangles[:, 2]] - mesh.vertices[mesh.triangles[:, 0]]
    nrm = np.cross(e1, e2)
    norms = np.linalg.norm(nrm, axis=1, keepdims=True)
    return nrm / np.maximum(norms, 1e-300)


# ------------------------------------------------------------------ mesh IO

def write_ply(path, mesh: TriangleMesh):
    """Binary little-endian PLY with float vertices and int32 face indices."""
    has_n = mesh.normals is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    if has_n:
        header += ["property float nx", "property float ny", "property float nz"]
    header += [f"element face {mesh.n_triangles}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if has_n:
            vdata = np.hstack([mesh.vertices, mesh.normals]).astype("<f4")
        else:
            vdata = mesh.vertices.astype("<f4")
        f.write(np.ascontiguousarray(vdata).tobytes())
        face = np.empty(mesh.n_triangles,
                        dtype=[("k", "u1"), ("idx", "<i4", (3,))])
        face["k"] = 3
        face["idx"] = mesh.triangles.astype("<i4")
        f.write(face.tobytes())


def read_ply(path):
    """Reads the binary PLY layout produced by write_ply."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n_vert = n_face = 0
    props = []
    current = None
    for line in header:
        parts = line.split()
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            props.append(parts[-1])
    offset = end + len(b"end_header\n")
    stride = 4 * len(props)
    vraw = np.frombuffer(data, dtype="<f4", count=n_vert * len(props),
                         offset=offset).reshape(n_vert, len(props))
    vertices = vraw[:, :3].astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(props):
        i = props.index("nx")
        normals = vraw[:, i:i + 3].astype(np.float64)
    offset += n_vert * stride
    face = np.frombuffer(data, dtype=[("k", "u1"), ("idx", "<i4", (3,))],
                         count=n_face, offset=offset)
    if n_face and not np.all(face["k"] == 3):
        raise ValueError(f"{path}: non-triangular faces")
    tris = face["idx"].astype(np.int64)
    if n_face and (tris.min() < 0 or tris.max() >= n_vert):
        raise ValueError(f"{path}: face indices out of range")
    return TriangleMesh(vertices=vertices, triangles=tris, normals=normals)


def write_obj(path, mesh: TriangleMesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
