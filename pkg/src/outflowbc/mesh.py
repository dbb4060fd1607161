"""Simplicial meshes with tagged boundary patches.

Cells are triangles (2D) or tetrahedra (3D). Boundary facets carry an
integer physical tag and a :class:`TagMap` assigns each tag a role
(inlet, wall, outlet). The outlet order in the tag map fixes the outlet
index used by every calibrator.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from math import factorial
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

ROLES = ("inlet", "wall", "outlet")


class MeshError(ValueError):
    """Invalid mesh topology, geometry or tagging."""


class MeshParseError(MeshError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class TagMap:
    inlet: int
    walls: tuple[int, ...]
    outlets: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(int(t) for t in self.walls))
        object.__setattr__(self, "outlets", tuple(int(t) for t in self.outlets))
        tags = [self.inlet, *self.walls, *self.outlets]
        if len(set(tags)) != len(tags):
            raise MeshError(f"tag map assigns a tag to more than one role: {tags}")
        if not self.outlets:
            raise MeshError("tag map needs at least one outlet")

    def role(self, tag: int) -> str:
        if tag == self.inlet:
            return "inlet"
        if tag in self.walls:
            return "wall"
        if tag in self.outlets:
            return "outlet"
        raise MeshError(f"tag {tag} has no role in the tag map")

    @property
    def all_tags(self) -> tuple[int, ...]:
        return (self.inlet, *self.walls, *self.outlets)

    def to_dict(self) -> dict:
        return {"inlet": self.inlet, "walls": list(self.walls), "outlets": list(self.outlets)}

    @classmethod
    def from_dict(cls, d: dict) -> "TagMap":
        try:
            return cls(int(d["inlet"]), tuple(d["walls"]), tuple(d["outlets"]))
        except KeyError as exc:
            raise MeshError(f"tag map is missing key {exc}") from None

    @classmethod
    def load(cls, path) -> "TagMap":
        with open(path) as fh:
            d = json.load(fh)
        # a full run config may nest the map
        return cls.from_dict(d.get("tag_map", d))


def simplex_measure(pts: np.ndarray) -> np.ndarray:
    """Unsigned measure of k-simplices given as ``(n, k+1, d)`` arrays."""
    edges = pts[:, 1:, :] - pts[:, :1, :]
    k = edges.shape[1]
    gram = np.einsum("nid,njd->nij", edges, edges)
    return np.sqrt(np.clip(np.linalg.det(gram), 0.0, None)) / factorial(k)


def signed_volume(pts: np.ndarray) -> np.ndarray:
    edges = pts[:, 1:, :] - pts[:, :1, :]
    d = edges.shape[1]
    return np.linalg.det(edges) / factorial(d)


def facet_normal(pts: np.ndarray) -> np.ndarray:
    """Unit normals of facets ``(n, d, d)`` (orientation arbitrary)."""
    d = pts.shape[2]
    if d == 2:
        t = pts[:, 1] - pts[:, 0]
        n = np.column_stack([t[:, 1], -t[:, 0]])
    else:
        n = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    return n / np.linalg.norm(n, axis=1)[:, None]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Validated simplicial mesh.

    ``facets`` lists boundary facets only, each with a tag in ``facet_tags``.
    Use :meth:`from_arrays` to build one; it fixes cell orientation and
    checks every invariant.
    """

    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_tags: np.ndarray
    tag_map: TagMap | None = None
    # owning cell and the cell-local index of the vertex opposite each facet
    facet_cell: np.ndarray = field(default=None, repr=False)
    facet_opposite: np.ndarray = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @classmethod
    def from_arrays(cls, vertices, cells, facets, facet_tags, tag_map: TagMap | None = None) -> "Mesh":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        cells = np.array(cells, dtype=np.int64)
        facets = np.array(facets, dtype=np.int64).reshape(-1, vertices.shape[1])
        facet_tags = np.asarray(facet_tags, dtype=np.int64).ravel()
        d = vertices.shape[1]
        if d not in (2, 3):
            raise MeshError(f"unsupported dimension {d}")
        if cells.ndim != 2 or cells.shape[1] != d + 1:
            raise MeshError(f"cells must be simplices with {d + 1} vertices")
        if len(facets) != len(facet_tags):
            raise MeshError("facets and facet_tags differ in length")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell references a missing vertex")

        vol = signed_volume(vertices[cells])
        scale = np.ptp(vertices, axis=0).max() ** d if len(vertices) else 1.0
        bad = np.flatnonzero(np.abs(vol) <= 1e-14 * scale)
        if bad.size:
            raise MeshError(f"degenerate (zero-volume) cells: {bad[:10].tolist()}")
        neg = vol < 0
        if neg.any():
            cells[neg, 0], cells[neg, 1] = cells[neg, 1].copy(), cells[neg, 0].copy()

        fcell, fopp = _match_boundary(cells, facets)
        if tag_map is not None:
            present = set(np.unique(facet_tags).tolist())
            unknown = present - set(tag_map.all_tags)
            if unknown:
                raise MeshError(f"boundary tags {sorted(unknown)} have no role in the tag map")
            missing = [t for t in (tag_map.inlet, *tag_map.outlets) if t not in present]
            if missing:
                raise MeshError(f"tag map tags {missing} do not occur on the boundary")
        return cls(vertices, cells, facets, facet_tags, tag_map, fcell, fopp)

    def with_tag_map(self, tag_map: TagMap) -> "Mesh":
        return Mesh.from_arrays(self.vertices, self.cells, self.facets, self.facet_tags, tag_map)

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        return signed_volume(self.vertices[self.cells])

    @cached_property
    def facet_areas(self) -> np.ndarray:
        return simplex_measure(self.vertices[self.facets])

    @cached_property
    def facet_normals(self) -> np.ndarray:
        """Outward unit normals of boundary facets."""
        n = facet_normal(self.vertices[self.facets])
        opp = self.vertices[self.cells[self.facet_cell, self.facet_opposite]]
        c = self.vertices[self.facets].mean(axis=1)
        flip = np.einsum("nd,nd->n", n, c - opp) < 0
        n[flip] *= -1
        return n

    @cached_property
    def edges(self) -> np.ndarray:
        """Sorted unique edges, lexicographic order."""
        d = self.dim
        pairs = [(i, j) for i in range(d + 1) for j in range(i + 1, d + 1)]
        e = np.concatenate([self.cells[:, p] for p in pairs])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def patch_facets(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.facet_tags == tag)

    @property
    def outlet_tags(self) -> tuple[int, ...]:
        return self.tag_map.outlets if self.tag_map else ()


def _match_boundary(cells: np.ndarray, facets: np.ndarray):
    """Check manifoldness and that tagged facets are exactly the boundary."""
    d = cells.shape[1] - 1
    nc = len(cells)
    local = [tuple(k for k in range(d + 1) if k != opp) for opp in range(d + 1)]
    allf = np.concatenate([cells[:, idx] for idx in local])
    owner = np.tile(np.arange(nc), d + 1)
    opposite = np.repeat(np.arange(d + 1), nc)
    keyed = np.sort(allf, axis=1)
    uniq, inv, counts = np.unique(keyed, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if (counts > 2).any():
        bad = uniq[counts > 2]
        raise MeshError(f"non-manifold facets shared by more than two cells: {bad[:5].tolist()}")
    boundary = counts == 1

    fkey = np.sort(facets, axis=1)
    lookup = {tuple(k): i for i, k in enumerate(uniq.tolist())}
    fidx = np.empty(len(facets), dtype=np.int64)
    for n, k in enumerate(fkey.tolist()):
        i = lookup.get(tuple(k))
        if i is None:
            raise MeshError(f"tagged facet {facets[n].tolist()} is not a facet of any cell")
        if not boundary[i]:
            raise MeshError(f"tagged facet {facets[n].tolist()} is interior")
        fidx[n] = i
    if len(np.unique(fidx)) != len(fidx):
        raise MeshError("boundary facet tagged more than once")
    untagged = np.setdiff1d(np.flatnonzero(boundary), fidx)
    if untagged.size:
        raise MeshError(f"untagged boundary facets: {uniq[untagged][:10].tolist()}")
    # first occurrence of each unique facet gives its owning cell
    first = np.full(len(uniq), -1, dtype=np.int64)
    order = np.arange(len(inv))[::-1]
    first[inv[order]] = order
    return owner[first[fidx]], opposite[first[fidx]]


# ---------------------------------------------------------------------------
# boundary patches


@dataclass(frozen=True)
class BoundaryPatch:
    tag: int
    role: str
    facets: np.ndarray
    area: float
    normal: np.ndarray
    facet_areas: np.ndarray
    facet_normals: np.ndarray


def patch_geometry(mesh: Mesh, tag: int) -> BoundaryPatch:
    idx = mesh.patch_facets(tag)
    if idx.size == 0:
        raise MeshError(f"unknown boundary tag {tag}")
    role = mesh.tag_map.role(tag) if mesh.tag_map else "wall"
    areas = mesh.facet_areas[idx]
    normals = mesh.facet_normals[idx]
    area = float(areas.sum())
    mean = (areas[:, None] * normals).sum(axis=0)
    norm = np.linalg.norm(mean)
    mean = mean / norm if norm > 0 else mean
    return BoundaryPatch(int(tag), role, idx, area, mean, areas, normals)


def outlet_patches(mesh: Mesh) -> list[BoundaryPatch]:
    return [patch_geometry(mesh, t) for t in mesh.tag_map.outlets]


def outlet_areas(mesh: Mesh) -> np.ndarray:
    return np.array([p.area for p in outlet_patches(mesh)])


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class MeshDiagnostics:
    dim: int
    n_vertices: int
    n_cells: int
    n_boundary_facets: int
    min_cell_volume: float
    max_cell_volume: float
    h_min: float
    h_max: float
    patch_areas: dict
    role_coverage: dict
    closure_residual: float
    defects: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def validate_mesh(mesh: Mesh, tol: float = 1e-12) -> MeshDiagnostics:
    """Report size/quality statistics; never raises on a constructed mesh."""
    verts = mesh.vertices
    e = mesh.edges
    lengths = np.linalg.norm(verts[e[:, 1]] - verts[e[:, 0]], axis=1)
    fsize = mesh.facet_areas ** (1.0 / max(mesh.dim - 1, 1))
    vol = mesh.cell_volumes
    defects, warnings = [], []
    if (vol <= 0).any():
        defects.append(f"{int((vol <= 0).sum())} non-positive cells")
    pairs = cKDTree(verts).query_pairs(tol * max(np.ptp(verts, axis=0).max(), 1.0))
    if pairs:
        warnings.append(f"{len(pairs)} duplicated vertex pairs, e.g. {sorted(pairs)[0]}")
    used = np.zeros(len(verts), bool)
    used[mesh.cells.ravel()] = True
    if not used.all():
        warnings.append(f"{int((~used).sum())} vertices not referenced by any cell")

    areas, coverage = {}, {r: 0.0 for r in ROLES}
    total = float(mesh.facet_areas.sum())
    for t in np.unique(mesh.facet_tags).tolist():
        a = float(mesh.facet_areas[mesh.facet_tags == t].sum())
        areas[int(t)] = a
        if mesh.tag_map is not None:
            coverage[mesh.tag_map.role(t)] += a / total
    flux = (mesh.facet_areas[:, None] * mesh.facet_normals).sum(axis=0)
    closure = float(np.linalg.norm(flux) / total)
    if closure > 1e-10:
        defects.append(f"boundary not closed: |sum n dA|/A = {closure:.3e}")
    return MeshDiagnostics(
        dim=mesh.dim,
        n_vertices=mesh.n_vertices,
        n_cells=mesh.n_cells,
        n_boundary_facets=len(mesh.facets),
        min_cell_volume=float(vol.min()),
        max_cell_volume=float(vol.max()),
        h_min=float(fsize.min()),
        h_max=float(lengths.max()),
        patch_areas=areas,
        role_coverage=coverage,
        closure_residual=closure,
        defects=defects,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# refinement and renumbering


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: 4 children per triangle, 8 per tetrahedron."""
    d = mesh.dim
    e = mesh.edges
    nv = mesh.n_vertices
    mid = {tuple(k): nv + i for i, k in enumerate(e.tolist())}
    verts = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])])

    def m(a, b):
        return np.array([mid[(min(x, y), max(x, y))] for x, y in zip(a, b)])

    c = mesh.cells.T
    f = mesh.facets.T
    if d == 2:
        a, b, cc = c
        ab, bc, ca = m(a, b), m(b, cc), m(cc, a)
        cells = np.concatenate([
            np.column_stack([a, ab, ca]), np.column_stack([ab, b, bc]),
            np.column_stack([ca, bc, cc]), np.column_stack([ab, bc, ca]),
        ])
        fa, fb = f
        fm = m(fa, fb)
        facets = np.concatenate([np.column_stack([fa, fm]), np.column_stack([fm, fb])])
        tags = np.concatenate([mesh.facet_tags] * 2)
    else:
        x0, x1, x2, x3 = c
        x01, x02, x03 = m(x0, x1), m(x0, x2), m(x0, x3)
        x12, x13, x23 = m(x1, x2), m(x1, x3), m(x2, x3)
        cs = [
            (x0, x01, x02, x03), (x01, x1, x12, x13), (x02, x12, x2, x23), (x03, x13, x23, x3),
            (x01, x02, x03, x13), (x01, x02, x12, x13), (x02, x03, x13, x23), (x02, x12, x13, x23),
        ]
        cells = np.concatenate([np.column_stack(t) for t in cs])
        fa, fb, fc = f
        ab, bc, ca = m(fa, fb), m(fb, fc), m(fc, fa)
        fs = [(fa, ab, ca), (ab, fb, bc), (ca, bc, fc), (ab, bc, ca)]
        facets = np.concatenate([np.column_stack(t) for t in fs])
        tags = np.concatenate([mesh.facet_tags] * 4)
    return Mesh.from_arrays(verts, cells, facets, tags, mesh.tag_map)


def renumber_vertices(mesh: Mesh, perm: np.ndarray) -> Mesh:
    """Return the same mesh with vertex ``i`` moved to position ``perm[i]``."""
    perm = np.asarray(perm)
    verts = np.empty_like(mesh.vertices)
    verts[perm] = mesh.vertices
    return Mesh.from_arrays(verts, perm[mesh.cells], perm[mesh.facets], mesh.facet_tags, mesh.tag_map)


# ---------------------------------------------------------------------------
# MSH ASCII 2.2 subset

_MSH_LINE, _MSH_TRI, _MSH_TET, _MSH_POINT = 1, 2, 4, 15
_NODES_PER_TYPE = {1: 2, 2: 3, 4: 4, 15: 1}


def read_msh(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read ``(vertices, cells, boundary_facets, facet_tags)`` from MSH 2.2 ASCII.

    Facets with physical tag 0 are returned with tag 0 (callers treat that
    as untagged).
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    pos = 0

    def expect(token):
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines) or lines[pos].strip() != token:
            got = lines[pos].strip() if pos < len(lines) else "<eof>"
            raise MeshParseError(f"expected {token!r}, got {got!r}", pos + 1)
        pos += 1

    def ints(lineno, n=None):
        try:
            vals = [int(t) for t in lines[lineno].split()]
        except (ValueError, IndexError):
            raise MeshParseError("expected integers", lineno + 1) from None
        if n is not None and len(vals) < n:
            raise MeshParseError(f"expected at least {n} integers", lineno + 1)
        return vals

    nodes, elems = None, None
    while pos < len(lines):
        head = lines[pos].strip()
        if not head:
            pos += 1
            continue
        if head == "$MeshFormat":
            pos += 1
            parts = lines[pos].split()
            if not parts or not parts[0].startswith("2"):
                raise MeshParseError(f"unsupported MSH version {parts[:1]}", pos + 1)
            if len(parts) > 1 and parts[1] != "0":
                raise MeshParseError("binary MSH files are not supported", pos + 1)
            pos += 1
            expect("$EndMeshFormat")
        elif head == "$Nodes":
            pos += 1
            n = ints(pos, 1)[0]
            ids = np.empty(n, dtype=np.int64)
            xyz = np.empty((n, 3))
            for k in range(n):
                pos += 1
                parts = lines[pos].split() if pos < len(lines) else []
                if len(parts) != 4:
                    raise MeshParseError("node line needs 'id x y z'", pos + 1)
                try:
                    ids[k] = int(parts[0])
                    xyz[k] = [float(v) for v in parts[1:]]
                except ValueError:
                    raise MeshParseError("malformed node line", pos + 1) from None
            pos += 1
            expect("$EndNodes")
            nodes = (ids, xyz)
        elif head == "$Elements":
            pos += 1
            n = ints(pos, 1)[0]
            elems = []
            for _ in range(n):
                pos += 1
                vals = ints(pos, 3)
                etype, ntags = vals[1], vals[2]
                nn = _NODES_PER_TYPE.get(etype)
                if nn is None:
                    raise MeshParseError(f"unsupported element type {etype}", pos + 1)
                if len(vals) != 3 + ntags + nn:
                    raise MeshParseError("element line has wrong length", pos + 1)
                phys = vals[3] if ntags > 0 else 0
                elems.append((etype, phys, vals[3 + ntags:], pos + 1))
            pos += 1
            expect("$EndElements")
        elif head.startswith("$"):
            # skip unknown sections such as $PhysicalNames
            end = "$End" + head[1:]
            while pos < len(lines) and lines[pos].strip() != end:
                pos += 1
            pos += 1
        else:
            raise MeshParseError(f"unexpected content {head!r}", pos + 1)
    if nodes is None or elems is None:
        raise MeshParseError("file lacks $Nodes or $Elements")

    ids, xyz = nodes
    index = {int(i): k for k, i in enumerate(ids)}
    types = {e[0] for e in elems}
    dim = 3 if _MSH_TET in types else 2
    cell_type = _MSH_TET if dim == 3 else _MSH_TRI
    facet_type = _MSH_TRI if dim == 3 else _MSH_LINE
    cells, facets, tags = [], [], []
    for etype, phys, conn, lineno in elems:
        try:
            local = [index[c] for c in conn]
        except KeyError as exc:
            raise MeshParseError(f"element references unknown node {exc}", lineno) from None
        if etype == cell_type:
            cells.append(local)
        elif etype == facet_type:
            facets.append(local)
            tags.append(phys)
    if not cells:
        raise MeshParseError("no cells found")
    cells = np.array(cells, dtype=np.int64)
    facets = np.array(facets, dtype=np.int64).reshape(-1, dim)
    tags = np.array(tags, dtype=np.int64)
    used = np.unique(cells)
    remap = -np.ones(len(xyz), dtype=np.int64)
    remap[used] = np.arange(len(used))
    if facets.size and (remap[facets] < 0).any():
        raise MeshParseError("boundary element uses a node not in any cell")
    verts = xyz[used, :dim]
    return verts, remap[cells], remap[facets], tags


def parse_mesh(path, tag_map: TagMap | dict | None = None) -> Mesh:
    """Load and validate a mesh from an MSH 2.2 ASCII file."""
    if isinstance(tag_map, dict):
        tag_map = TagMap.from_dict(tag_map)
    verts, cells, facets, tags = read_msh(path)
    if (tags == 0).any():
        bad = facets[tags == 0]
        raise MeshError(f"untagged boundary facets (physical tag 0): {bad[:10].tolist()}")
    return Mesh.from_arrays(verts, cells, facets, tags, tag_map)


def write_msh(mesh: Mesh, path) -> None:
    d = mesh.dim
    cell_type = _MSH_TET if d == 3 else _MSH_TRI
    facet_type = _MSH_TRI if d == 3 else _MSH_LINE
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    for i, x in enumerate(mesh.vertices):
        xyz = list(x) + [0.0] * (3 - d)
        out.append(f"{i + 1} " + " ".join(repr(float(v)) for v in xyz))
    out += ["$EndNodes", "$Elements", str(len(mesh.facets) + mesh.n_cells)]
    k = 1
    for f, t in zip(mesh.facets, mesh.facet_tags):
        out.append(f"{k} {facet_type} 2 {t} {t} " + " ".join(str(v + 1) for v in f))
        k += 1
    for c in mesh.cells:
        out.append(f"{k} {cell_type} 2 100 100 " + " ".join(str(v + 1) for v in c))
        k += 1
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")


__all__ = [
    "BoundaryPatch", "Mesh", "MeshDiagnostics", "MeshError", "MeshParseError", "TagMap",
    "outlet_areas", "outlet_patches", "parse_mesh", "patch_geometry", "read_msh",
    "refine_uniform", "renumber_vertices", "validate_mesh", "write_msh",
]
