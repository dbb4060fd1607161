"""Parametric 2D/3D vessel meshes: channel, box, Y-bifurcation, arch.

Unstructured 2D meshes come from a conforming Delaunay triangulation of a
boundary sampling plus an interior triangular lattice; boundary segments
missing from the triangulation are split until they appear.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay
from shapely.geometry import LineString, Point, Polygon, box
from shapely.ops import unary_union

from .mesh import Mesh, MeshError, TagMap

# default tags for generated geometries
INLET, WALL = 1, 2
MIRROR = -1


def channel_mesh(length: float = 4.0, height: float = 1.0, nx: int = 8, ny: int = 2,
                 diagonal: str = "right") -> Mesh:
    """Structured rectangle ``[0, L] x [0, H]`` with ``2 * nx * ny`` triangles.

    Tags: inlet 1 (x = 0), wall 2 (y = 0 and y = H), outlet 3 (x = L).
    """
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    vid = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a, b = vid[:-1, :-1].ravel(), vid[1:, :-1].ravel()
    c, d = vid[1:, 1:].ravel(), vid[:-1, 1:].ravel()
    if diagonal == "right":
        cells = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    else:
        cells = np.concatenate([np.column_stack([a, b, d]), np.column_stack([b, c, d])])
    facets, tags = [], []
    for j in range(ny):
        facets.append((vid[0, j], vid[0, j + 1]))
        tags.append(INLET)
        facets.append((vid[nx, j], vid[nx, j + 1]))
        tags.append(3)
    for i in range(nx):
        facets.append((vid[i, 0], vid[i + 1, 0]))
        tags.append(WALL)
        facets.append((vid[i, ny], vid[i + 1, ny]))
        tags.append(WALL)
    return Mesh.from_arrays(verts, cells, facets, tags, TagMap(INLET, (WALL,), (3,)))


def box_channel_mesh(length: float = 2.0, height: float = 1.0, width: float = 1.0,
                     nx: int = 4, ny: int = 2, nz: int = 2) -> Mesh:
    """Structured 3D duct split into 6 tetrahedra per hexahedron (Kuhn).

    Tags: inlet 1 (x = 0), wall 2, outlet 3 (x = L).
    """
    xs = np.linspace(0, length, nx + 1)
    ys = np.linspace(0, height, ny + 1)
    zs = np.linspace(0, width, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    vid = np.arange(verts.shape[0]).reshape(nx + 1, ny + 1, nz + 1)
    corners = [vid[i:i + nx, j:j + ny, k:k + nz].ravel()
               for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    # corner index = 4 i + 2 j + k ; Kuhn paths from 000 to 111
    paths = [(0, 4, 6, 7), (0, 4, 5, 7), (0, 2, 6, 7), (0, 2, 3, 7), (0, 1, 5, 7), (0, 1, 3, 7)]
    cells = np.concatenate([np.column_stack([corners[p] for p in path]) for path in paths])
    # boundary facets from the tetrahedra, tagged by position
    local = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
    allf = np.sort(np.concatenate([cells[:, f] for f in local]), axis=1)
    uniq, counts = np.unique(allf, axis=0, return_counts=True)
    bf = uniq[counts == 1]
    centers = verts[bf].mean(axis=1)
    tol = 1e-9 * length
    tags = np.full(len(bf), WALL)
    tags[centers[:, 0] < tol] = INLET
    tags[centers[:, 0] > length - tol] = 3
    return Mesh.from_arrays(verts, cells, bf, tags, TagMap(INLET, (WALL,), (3,)))


# ---------------------------------------------------------------------------
# polygon meshing


def _ring_segments(poly: Polygon, classify) -> tuple[np.ndarray, np.ndarray]:
    coords = np.asarray(poly.exterior.coords)[:-1]
    if not poly.exterior.is_ccw:
        coords = coords[::-1]
    # clipping leaves slivers of ~1e-17 length; merge coincident vertices
    tol = 1e-9 * np.ptp(coords, axis=0).max()
    coords[np.abs(coords) < tol] = 0.0
    keep = np.linalg.norm(coords - np.roll(coords, 1, axis=0), axis=1) > tol
    coords = coords[keep]
    segs = np.stack([coords, np.roll(coords, -1, axis=0)], axis=1)
    tags = np.array([classify(s[0], s[1]) for s in segs])
    return segs, tags


def _subdivide(segs, tags, h):
    pts, out_tags = [], []
    for (a, b), t in zip(segs, tags):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / h - 1e-9)))
        s = np.linspace(0.0, 1.0, n + 1)[:-1]
        pts.append(a + s[:, None] * (b - a))
        out_tags += [t] * n
    return np.concatenate(pts), np.array(out_tags)


def mesh_polygon(poly: Polygon, h: float, classify, max_splits: int = 20) -> tuple:
    """Triangulate ``poly`` with target size ``h``.

    ``classify(a, b)`` returns the tag of the ring edge ``a -> b``. Returns
    ``(vertices, cells, facets, tags)``.
    """
    segs, seg_tags = _ring_segments(poly, classify)
    bpts, btags = _subdivide(segs, seg_tags, h)
    ring = poly.exterior

    # interior lattice (equilateral rows), trimmed away from the boundary
    minx, miny, maxx, maxy = poly.bounds
    dy = h * np.sqrt(3) / 2
    rows = np.arange(miny + dy / 2, maxy, dy)
    lattice = []
    for k, y in enumerate(rows):
        off = 0.5 * h if k % 2 else 0.0
        xs = np.arange(minx + off + h / 2, maxx, h)
        lattice.append(np.column_stack([xs, np.full_like(xs, y)]))
    lattice = np.concatenate(lattice) if lattice else np.zeros((0, 2))
    keep = [poly.contains(Point(p)) and ring.distance(Point(p)) > 0.55 * h for p in lattice]
    interior = lattice[np.asarray(keep, bool)] if len(lattice) else lattice

    # boundary as a closed chain of points; split until all segments conform
    chain = [(p, t) for p, t in zip(bpts, btags)]
    for _ in range(max_splits):
        bp = np.array([c[0] for c in chain])
        nb = len(bp)
        pts = np.vstack([bp, interior])
        tri = Delaunay(pts).simplices
        p0, p1, p2 = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
        a, b = p1 - p0, p2 - p0
        area = 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        tri = tri[area > 1e-10 * h * h]
        cent = pts[tri].mean(axis=1)
        inside = np.array([poly.contains(Point(c)) for c in cent])
        tri = tri[inside]
        edges = set()
        for a, b in ((0, 1), (1, 2), (2, 0)):
            e = np.sort(tri[:, [a, b]], axis=1)
            edges.update(map(tuple, e.tolist()))
        missing = {i for i in range(nb) if (min(i, (i + 1) % nb), max(i, (i + 1) % nb)) not in edges}
        if not missing:
            break
        new = []
        for i, (p, t) in enumerate(chain):
            new.append((p, t))
            if i in missing:
                q = chain[(i + 1) % nb][0]
                new.append((0.5 * (p + q), t))
        chain = new
        # drop lattice points that crowd the refined boundary
        bp = np.array([c[0] for c in chain])
        if len(interior):
            dist = np.min(np.linalg.norm(interior[:, None, :] - bp[None, :, :], axis=2), axis=1)
            interior = interior[dist > 0.3 * h]
    else:
        raise MeshError("polygon triangulation did not conform to the boundary")

    tags = np.array([c[1] for c in chain])
    facets = np.column_stack([np.arange(nb), (np.arange(nb) + 1) % nb])
    used = np.unique(tri)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    if (remap[facets] < 0).any():
        raise MeshError("boundary point left out of the triangulation")
    return pts[used], remap[tri], remap[facets], tags


def _cap_classifier(caps, wall_tag=WALL, extra=None, tol=1e-7):
    """Tag ring edges lying on cap segments ``[(p, q, tag), ...]``."""
    caps = [(LineString([p, q]), t) for p, q, t in caps]

    def classify(a, b):
        for line, t in caps:
            if line.distance(Point(a)) < tol and line.distance(Point(b)) < tol:
                return t
        if extra is not None:
            t = extra(a, b)
            if t is not None:
                return t
        return wall_tag

    return classify


def _flat_cap(p_end, p_prev, width):
    d = np.asarray(p_end, float) - np.asarray(p_prev, float)
    d /= np.linalg.norm(d)
    nrm = np.array([-d[1], d[0]])
    return p_end + 0.5 * width * nrm, p_end - 0.5 * width * nrm


def y_bifurcation_mesh(h: float = 0.2, trunk_length: float = 3.0, trunk_width: float = 1.0,
                       branch_length: float = 3.0, branch_width: float = 0.7,
                       angle_deg: float = 30.0) -> Mesh:
    """Mirror-symmetric Y-bifurcation (symmetric about y = 0).

    Tags: inlet 1, wall 2, outlets 3 (upper branch) and 4 (lower branch).
    The lower half is an exact reflection of the upper half, so equal outlet
    resistances give an exactly even split.
    """
    th = np.radians(angle_deg)
    start = np.array([-trunk_length, 0.0])
    up_end = np.array([branch_length * np.cos(th), branch_length * np.sin(th)])
    lo_end = up_end * [1, -1]
    back = np.array([-0.5 * trunk_width, 0.0])
    trunk = LineString([start, (0.0, 0.0)]).buffer(trunk_width / 2, cap_style="flat")
    up = LineString([back, up_end]).buffer(branch_width / 2, cap_style="flat", join_style="mitre")
    lo = LineString([back, lo_end]).buffer(branch_width / 2, cap_style="flat", join_style="mitre")
    shape = unary_union([trunk, up, lo]).simplify(1e-9)
    half = shape.intersection(box(-1e3, 0.0, 1e3, 1e3))
    if half.geom_type != "Polygon":
        raise MeshError("bifurcation half is not a simple polygon")

    inlet_cap = (start + [0, trunk_width / 2], start - [0, trunk_width / 2], INLET)
    out_cap = (*_flat_cap(up_end, back, branch_width), 3)

    def on_axis(a, b):
        return MIRROR if abs(a[1]) < 1e-9 and abs(b[1]) < 1e-9 else None

    verts, cells, facets, tags = mesh_polygon(half, h, _cap_classifier([inlet_cap, out_cap], extra=on_axis))
    return _mirror(verts, cells, facets, tags, {3: 4}, TagMap(INLET, (WALL,), (3, 4)))


def _mirror(verts, cells, facets, tags, tag_swap, tag_map):
    n = len(verts)
    on_axis = np.abs(verts[:, 1]) < 1e-12
    verts = verts.copy()
    verts[on_axis, 1] = 0.0
    mirror_id = np.arange(n, 2 * n)
    mirror_id[on_axis] = np.flatnonzero(on_axis)
    mv = verts * [1.0, -1.0]
    all_verts = np.vstack([verts, mv])
    cells2 = np.vstack([cells, mirror_id[cells]])
    keep = tags != MIRROR
    f1, t1 = facets[keep], tags[keep]
    f2 = mirror_id[f1]
    t2 = np.array([tag_swap.get(int(t), int(t)) for t in t1])
    used = np.unique(cells2)
    remap = -np.ones(len(all_verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh.from_arrays(all_verts[used], remap[cells2], remap[np.vstack([f1, f2])],
                            np.concatenate([t1, t2]), tag_map)


ARCH_OUTLETS = ("BCA", "LCC", "LSUB", "DAo")


def arch_mesh(h: float = 0.3, radius: float = 3.0, width: float = 2.2,
              ascending: float = 3.0, descending: float = 5.0,
              branch_angles=(140.0, 105.0, 72.0), branch_widths=(1.0, 0.6, 0.7),
              branch_length: float = 2.5, n_arc: int = 24) -> Mesh:
    """1-inlet / 4-outlet aortic-arch-like 2D domain.

    Outlets in order: three supra-aortic branches (BCA, LCC, LSUB) leaving
    the outer wall of the arch radially, then the descending aorta (DAo).
    Tags: inlet 1, wall 2, outlets 3, 4, 5, 6.
    """
    cx = radius
    ang = np.linspace(np.pi, 0.0, n_arc + 1)
    arc = np.column_stack([cx + radius * np.cos(ang), radius * np.sin(ang)])
    center = np.vstack([[0.0, -ascending], arc, [2 * radius, -descending]])
    body = LineString(center).buffer(width / 2, cap_style="flat", join_style="mitre")
    parts = [body]
    caps = [((-width / 2, -ascending), (width / 2, -ascending), INLET)]
    for k, (deg, w) in enumerate(zip(branch_angles, branch_widths)):
        u = np.array([np.cos(np.radians(deg)), np.sin(np.radians(deg))])
        a = np.array([cx, 0.0]) + radius * u
        b = a + (width / 2 + branch_length) * u
        parts.append(LineString([a, b]).buffer(w / 2, cap_style="flat"))
        caps.append((*_flat_cap(b, a, w), 3 + k))
    caps.append(((2 * radius + width / 2, -descending), (2 * radius - width / 2, -descending), 6))
    shape = unary_union(parts).simplify(1e-9)
    if shape.geom_type != "Polygon" or len(shape.interiors):
        raise MeshError("arch geometry is not a simple polygon")
    verts, cells, facets, tags = mesh_polygon(shape, h, _cap_classifier(caps))
    return Mesh.from_arrays(verts, cells, facets, tags, TagMap(INLET, (WALL,), (3, 4, 5, 6)))
