"""Conforming simplicial meshes in 2D/3D with DG facet bookkeeping."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

log = logging.getLogger(__name__)

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2
KIND_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", NEUMANN: "neumann"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Facet:
    vertex_ids: tuple[int, ...]
    kind: str
    cells: tuple[int, ...]
    normal: np.ndarray
    diameter: float


def _facet_key(vertex_ids) -> tuple[int, ...]:
    return tuple(sorted(int(v) for v in vertex_ids))


def _max_pairwise_distance(points: np.ndarray) -> np.ndarray:
    # points: (n, m, d)
    best = np.zeros(points.shape[0])
    for i, j in itertools.combinations(range(points.shape[1]), 2):
        best = np.maximum(best, np.linalg.norm(points[:, i] - points[:, j], axis=1))
    return best


def _simplex_measure(points: np.ndarray) -> np.ndarray:
    """Unsigned (m-1)-volume of simplices given by (n, m, d) vertex arrays."""
    n, m, _ = points.shape
    E = points[:, 1:, :] - points[:, :1, :]
    gram = np.einsum("nid,njd->nij", E, E)
    return np.sqrt(np.maximum(np.linalg.det(gram), 0.0)) / math.factorial(m - 1)


class Mesh:
    """Immutable conforming simplicial mesh.

    ``boundary`` maps a facet (any ordering of its vertex ids) to ``"dirichlet"`` or
    ``"neumann"``; boundary facets missing from it default to dirichlet.
    Facet arrays: ``facet_vertices`` (nf, d), ``facet_cells`` (nf, 2) with -1 for the
    missing neighbour, ``facet_local`` (nf, 2) local face index (opposite vertex) in
    each cell, ``facet_kind``, ``facet_normals`` (outward from the first cell),
    ``facet_diameters`` and ``facet_areas``.
    """

    def __init__(
        self,
        vertices,
        cells,
        cell_subdomain=None,
        boundary: Mapping[tuple[int, ...], str] | None = None,
    ):
        vertices = np.array(vertices, dtype=float)
        cells = np.array(cells, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (n, 2) or (n, 3) array")
        dim = vertices.shape[1]
        if cells.ndim != 2 or cells.shape[1] != dim + 1:
            raise MeshError(f"cells must have {dim + 1} vertex indices in {dim}D")
        if len(cells) == 0:
            raise MeshError("mesh has no cells")
        if cells.min() < 0 or cells.max() >= len(vertices):
            raise MeshError("cell references a vertex index out of range")
        srt = np.sort(cells, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            bad = int(np.nonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1))[0][0])
            raise MeshError(f"degenerate cell {bad}: a vertex is listed twice")
        if cell_subdomain is None:
            cell_subdomain = np.zeros(len(cells), dtype=np.int64)
        cell_subdomain = np.array(cell_subdomain, dtype=np.int64)
        if cell_subdomain.shape != (len(cells),):
            raise MeshError("cell_subdomain must give one id per cell")

        X = vertices[cells]
        E = X[:, 1:, :] - X[:, :1, :]
        det = np.linalg.det(E)
        scale = _max_pairwise_distance(X) ** dim
        if np.any(np.abs(det) <= 1e-12 * scale):
            bad = int(np.nonzero(np.abs(det) <= 1e-12 * scale)[0][0])
            raise MeshError(f"degenerate cell {bad}: zero volume")
        # canonical orientation: positive signed volume
        flip = det < 0
        cells[flip, 0], cells[flip, 1] = cells[flip, 1].copy(), cells[flip, 0].copy()

        self.dim = dim
        self.vertices = vertices
        self.cells = cells
        self.cell_subdomain = cell_subdomain
        self.cell_volumes = np.abs(det) / math.factorial(dim)
        self.cell_diameters = _max_pairwise_distance(vertices[cells])
        self._build_facets(boundary or {})
        for arr in (
            self.vertices, self.cells, self.cell_subdomain, self.cell_volumes,
            self.cell_diameters, self.facet_vertices, self.facet_cells, self.facet_local,
            self.facet_kind, self.facet_normals, self.facet_diameters, self.facet_areas,
        ):
            arr.setflags(write=False)

    def _build_facets(self, boundary: Mapping[tuple[int, ...], str]) -> None:
        d = self.dim
        nc = len(self.cells)
        local = np.array([[j for j in range(d + 1) if j != i] for i in range(d + 1)])
        fv = self.cells[:, local].reshape(-1, d)  # (nc*(d+1), d), face i opposite vertex i
        keys = np.sort(fv, axis=1)
        uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if np.any(counts > 2):
            raise MeshError("non-conforming connectivity: a facet is shared by more than two cells")
        nf = len(uniq)
        order = np.argsort(inverse, kind="stable")
        owner = order // (d + 1)
        lidx = order % (d + 1)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        facet_cells = np.full((nf, 2), -1, dtype=np.int64)
        facet_local = np.full((nf, 2), -1, dtype=np.int64)
        facet_cells[:, 0] = owner[starts]
        facet_local[:, 0] = lidx[starts]
        two = counts == 2
        facet_cells[two, 1] = owner[starts[two] + 1]
        facet_local[two, 1] = lidx[starts[two] + 1]

        # vertex order taken from the first cell
        first_v = fv[facet_cells[:, 0] * (d + 1) + facet_local[:, 0]]
        P = self.vertices[first_v]
        if d == 2:
            t = P[:, 1] - P[:, 0]
            normals = np.column_stack([t[:, 1], -t[:, 0]])
        else:
            normals = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        opposite = self.vertices[self.cells[facet_cells[:, 0], facet_local[:, 0]]]
        outward = np.einsum("fd,fd->f", normals, P.mean(axis=1) - opposite)
        normals[outward < 0] *= -1.0

        kind = np.full(nf, INTERIOR, dtype=np.int64)
        tags = {_facet_key(k): v for k, v in boundary.items()}
        for f in np.nonzero(~two)[0]:
            tag = tags.get(tuple(int(v) for v in uniq[f]), "dirichlet")
            if tag not in ("dirichlet", "neumann"):
                raise MeshError(f"unknown boundary tag {tag!r}")
            kind[f] = KIND_CODES[tag]

        self.facet_vertices = first_v
        self.facet_cells = facet_cells
        self.facet_local = facet_local
        self.facet_kind = kind
        self.facet_normals = normals
        self.facet_diameters = _max_pairwise_distance(P)
        self.facet_areas = _simplex_measure(P)
        self._cell_facets = None
        assert nc > 0

    # -- basic queries ---------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_facets(self) -> int:
        return len(self.facet_kind)

    @property
    def mesh_size(self) -> float:
        return float(self.cell_diameters.max())

    @property
    def volume(self) -> float:
        return float(self.cell_volumes.sum())

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.nonzero(self.facet_kind != INTERIOR)[0]

    @property
    def dg_facets(self) -> np.ndarray:
        """Indices of interior and Neumann facets, the facets carrying DG terms."""
        return np.nonzero(self.facet_kind != DIRICHLET)[0]

    def count(self, kind: str) -> int:
        return int(np.sum(self.facet_kind == KIND_CODES[kind]))

    @property
    def boundary_tags(self) -> dict[tuple[int, ...], str]:
        return {
            _facet_key(self.facet_vertices[f]): KIND_NAMES[int(self.facet_kind[f])]
            for f in self.boundary_facets
        }

    @property
    def facets(self) -> list[Facet]:
        out = []
        for f in range(self.n_facets):
            c = tuple(int(x) for x in self.facet_cells[f] if x >= 0)
            out.append(
                Facet(
                    tuple(int(v) for v in self.facet_vertices[f]),
                    KIND_NAMES[int(self.facet_kind[f])],
                    c,
                    self.facet_normals[f].copy(),
                    float(self.facet_diameters[f]),
                )
            )
        return out

    def facet_heights(self) -> np.ndarray:
        """Smallest distance from a facet to the opposite vertex of an adjacent cell."""
        h = np.full(self.n_facets, np.inf)
        for side in range(2):
            c = self.facet_cells[:, side]
            ok = c >= 0
            h[ok] = np.minimum(h[ok], self.dim * self.cell_volumes[c[ok]] / self.facet_areas[ok])
        return h

    def inradii(self) -> np.ndarray:
        """Inscribed-sphere radius per cell: d |K| / |dK|."""
        d = self.dim
        local = [[j for j in range(d + 1) if j != i] for i in range(d + 1)]
        X = self.vertices[self.cells]
        surface = sum(_simplex_measure(X[:, l, :]) for l in local)
        return d * self.cell_volumes / surface

    def shape_regularity(self) -> float:
        return float(np.max(self.cell_diameters / self.inradii()))

    def with_boundary(self, boundary: Mapping[tuple[int, ...], str]) -> "Mesh":
        return Mesh(self.vertices, self.cells, self.cell_subdomain, boundary)

    def with_subdomains(self, cell_subdomain) -> "Mesh":
        return Mesh(self.vertices, self.cells, cell_subdomain, self.boundary_tags)

    def describe(self) -> str:
        return (
            f"dim={self.dim} cells={self.n_cells} vertices={self.n_vertices} "
            f"facets={self.n_facets} interior={self.count('interior')} "
            f"dirichlet={self.count('dirichlet')} neumann={self.count('neumann')} "
            f"h={self.mesh_size:.6g}"
        )

    def __repr__(self) -> str:
        return f"Mesh({self.describe()})"


# -- generators -----------------------------------------------------------------


def generate_structured(n: int, dim: int = 2, lower=None, upper=None) -> Mesh:
    """Uniform simplicial mesh of an axis-aligned box with ``n`` cells per side.

    2D: every square is cut along its (0,0)-(1,1) diagonal. 3D: Kuhn split of every
    cube into 6 tetrahedra sharing the main diagonal.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    if dim not in (2, 3):
        raise MeshError("dim must be 2 or 3")
    lower = np.zeros(dim) if lower is None else np.asarray(lower, float)
    upper = np.ones(dim) if upper is None else np.asarray(upper, float)
    axes = [np.linspace(lower[i], upper[i], n + 1) for i in range(dim)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    idx = np.arange((n + 1) ** dim).reshape((n + 1,) * dim)
    cells = []
    if dim == 2:
        v00, v10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
        v01, v11 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
        cells = np.concatenate(
            [np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])]
        )
    else:
        corner = {}
        for off in itertools.product((0, 1), repeat=3):
            sl = tuple(slice(o, n + o) for o in off)
            corner[off] = idx[sl].ravel()
        blocks = []
        for perm in itertools.permutations(range(3)):
            path = [(0, 0, 0)]
            cur = [0, 0, 0]
            for axis in perm:
                cur[axis] = 1
                path.append(tuple(cur))
            blocks.append(np.column_stack([corner[p] for p in path]))
        cells = np.concatenate(blocks)
    return Mesh(grid, cells)


def perturb_interior(mesh: Mesh, magnitude: float, seed: int = 0) -> Mesh:
    """Randomly move interior vertices by at most ``magnitude`` (uniform in a ball).

    Boundary vertices stay put, so the domain and boundary tags are unchanged.
    """
    rng = np.random.default_rng(seed)
    on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    on_boundary[mesh.facet_vertices[mesh.boundary_facets].ravel()] = True
    interior = np.nonzero(~on_boundary)[0]
    d = mesh.dim
    direction = rng.normal(size=(len(interior), d))
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    radius = magnitude * rng.random(len(interior)) ** (1.0 / d)
    verts = mesh.vertices.copy()
    verts[interior] += direction * radius[:, None]
    return Mesh(verts, mesh.cells, mesh.cell_subdomain, mesh.boundary_tags)


def generate_disk(n_rings: int, radius: float = 1.0, center=(0.0, 0.0)) -> Mesh:
    """Polygonal disk: ring ``i`` holds ``6 i`` vertices at radius ``i/n``.

    Boundary vertices lie exactly on the circle; the geometric error is O(h^2).
    """
    if n_rings < 1:
        raise MeshError("n_rings must be >= 1")
    verts = [np.zeros(2)]
    rings = [np.array([0])]
    for i in range(1, n_rings + 1):
        m = 6 * i
        theta = 2 * np.pi * np.arange(m) / m
        r = radius * i / n_rings
        start = len(verts)
        verts.extend(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        rings.append(np.arange(start, start + m))
    cells = []
    for i in range(1, n_rings + 1):
        inner, outer = rings[i - 1], rings[i]
        if len(inner) == 1:
            for j in range(len(outer)):
                cells.append([inner[0], outer[j], outer[(j + 1) % len(outer)]])
            continue
        ni, no = len(inner), len(outer)
        a = b = 0
        while a < ni or b < no:
            # advance along whichever ring has the smaller next angle
            ta = (a + 1) / ni
            tb = (b + 1) / no
            if b < no and (a >= ni or tb <= ta):
                cells.append([inner[a % ni], outer[b % no], outer[(b + 1) % no]])
                b += 1
            else:
                cells.append([inner[a % ni], outer[b % no], inner[(a + 1) % ni]])
                a += 1
    return Mesh(np.array(verts) + np.asarray(center, float), np.array(cells))


# -- refinement and tagging ----------------------------------------------------


def barycentric_refine(mesh: Mesh) -> Mesh:
    """Alfeld split: connect each cell barycentre to its d+1 vertices.

    Child ``j`` replaces vertex ``j`` by the barycentre, so its face opposite the
    barycentre is the parent's face ``j``; boundary facets are preserved exactly.
    """
    d = mesh.dim
    nv, nc = mesh.n_vertices, mesh.n_cells
    centers = mesh.vertices[mesh.cells].mean(axis=1)
    verts = np.vstack([mesh.vertices, centers])
    bc = nv + np.arange(nc)
    children = []
    for j in range(d + 1):
        c = mesh.cells.copy()
        c[:, j] = bc
        children.append(c)
    cells = np.stack(children, axis=1).reshape(-1, d + 1)
    sub = np.repeat(mesh.cell_subdomain, d + 1)
    return Mesh(verts, cells, sub, mesh.boundary_tags)


Predicate = Callable[[np.ndarray], object]


def _is_dirichlet(result) -> bool:
    if isinstance(result, str):
        if result not in ("dirichlet", "neumann"):
            raise MeshError(f"predicate returned unknown tag {result!r}")
        return result == "dirichlet"
    return bool(result)


def tag_boundary(mesh: Mesh, predicate: Predicate) -> Mesh:
    """Tag boundary facets: dirichlet where every facet vertex satisfies ``predicate``.

    ``predicate`` maps a coordinate vector to a truthy value (or the strings
    ``"dirichlet"``/``"neumann"``). At least one facet must end up dirichlet.
    """
    tags = {}
    for f in mesh.boundary_facets:
        vids = mesh.facet_vertices[f]
        dirichlet = all(_is_dirichlet(predicate(mesh.vertices[v])) for v in vids)
        tags[_facet_key(vids)] = "dirichlet" if dirichlet else "neumann"
    if "dirichlet" not in tags.values():
        raise MeshError("no dirichlet facet after tagging; the clamped boundary needs positive measure")
    return mesh.with_boundary(tags)


def side_predicate(sides, lower=None, upper=None, tol: float = 1e-10) -> Predicate:
    """Predicate for box sides named ``x0, x1, y0, y1, z0, z1`` (or ``"all"``, ``"none"``)."""
    if isinstance(sides, str):
        sides = [sides]
    sides = [s for s in sides if s != "none"]
    bad = [s for s in sides if s != "all" and (len(s) != 2 or s[0] not in "xyz" or s[1] not in "01")]
    if bad:
        raise ValueError(f"unknown side name(s) {bad}")

    def pred(x):
        if "all" in sides:
            return True
        lo = np.zeros(len(x)) if lower is None else np.asarray(lower, float)
        hi = np.ones(len(x)) if upper is None else np.asarray(upper, float)
        for s in sides:
            axis = "xyz".index(s[0])
            target = lo[axis] if s[1] == "0" else hi[axis]
            if abs(x[axis] - target) <= tol:
                return True
        return False

    return pred


# -- file I/O --------------------------------------------------------------------


def write_mesh(mesh: Mesh, path) -> None:
    """Write the native ASCII format (``stressdg-mesh v1``)."""
    lines = [f"stressdg-mesh v1 dim={mesh.dim}", f"vertices {mesh.n_vertices}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines.append(f"cells {mesh.n_cells} subdomains")
    lines += [
        " ".join(str(int(i)) for i in c) + f" {int(s)}"
        for c, s in zip(mesh.cells, mesh.cell_subdomain)
    ]
    tags = mesh.boundary_tags
    lines.append(f"boundary {len(tags)}")
    lines += [" ".join(str(v) for v in key) + f" {tag}" for key, tag in tags.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read a native ``stressdg-mesh v1`` file or a Gmsh MSH 2.2 ASCII file."""
    text = Path(path).read_text()
    first = text.lstrip().split("\n", 1)[0].strip()
    if first.startswith("stressdg-mesh"):
        return _read_native(text)
    if first == "$MeshFormat":
        return _read_msh(text)
    raise MeshError(f"unknown mesh format in {path}")


def _read_native(text: str) -> Mesh:
    lines = [l.split("#", 1)[0].strip() for l in text.splitlines()]
    lines = [l for l in lines if l]
    header = lines[0].split()
    if len(header) < 3 or header[1] != "v1" or not header[2].startswith("dim="):
        raise MeshError(f"unknown format version: {lines[0]!r}")
    dim = int(header[2].split("=")[1])
    pos = 1

    def section(name):
        nonlocal pos
        if pos >= len(lines):
            return None
        parts = lines[pos].split()
        if parts[0] != name:
            return None
        pos += 1
        count = int(parts[1])
        rows = [lines[pos + i].split() for i in range(count)]
        pos += count
        return rows

    vrows = section("vertices")
    if vrows is None:
        raise MeshError("missing 'vertices' section")
    verts = np.array([[float(x) for x in r[:dim]] for r in vrows])
    crows = section("cells")
    if crows is None:
        raise MeshError("missing 'cells' section")
    cells = [[int(x) for x in r[: dim + 1]] for r in crows]
    sub = [int(r[dim + 1]) if len(r) > dim + 1 else 0 for r in crows]
    brows = section("boundary") or []
    boundary = {tuple(int(x) for x in r[:dim]): r[dim] for r in brows}
    return Mesh(verts, cells, sub, boundary)


def _read_msh(text: str) -> Mesh:
    sections: dict[str, list[str]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("$End"):
            current = None
        elif line.startswith("$"):
            current = line[1:]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    fmt = sections.get("MeshFormat", [""])[0].split()
    if not fmt or not fmt[0].startswith("2"):
        raise MeshError(f"unknown format version: MSH {fmt[0] if fmt else '?'} (need 2.2)")
    names = {}
    for line in sections.get("PhysicalNames", [])[1:]:
        parts = line.split(maxsplit=2)
        names[int(parts[1])] = parts[2].strip('"').lower()
    node_lines = sections["Nodes"][1:]
    node_ids = np.array([int(l.split()[0]) for l in node_lines])
    coords = np.array([[float(x) for x in l.split()[1:4]] for l in node_lines])
    id_to_row = {nid: i for i, nid in enumerate(node_ids)}
    tris, tets, lines_, tri_tags, tet_tags, line_tags = [], [], [], [], [], []
    for line in sections["Elements"][1:]:
        p = [int(x) for x in line.split()]
        etype, ntags = p[1], p[2]
        tags = p[3 : 3 + ntags]
        nodes = [id_to_row[n] for n in p[3 + ntags :]]
        phys = tags[0] if tags else 0
        if etype == 1:
            lines_.append(nodes[:2])
            line_tags.append(phys)
        elif etype == 2:
            tris.append(nodes[:3])
            tri_tags.append(phys)
        elif etype == 4:
            tets.append(nodes[:4])
            tet_tags.append(phys)
    if tets:
        dim, cells, sub, bnd, btags = 3, tets, tet_tags, tris, tri_tags
    elif tris:
        dim, cells, sub, bnd, btags = 2, tris, tri_tags, lines_, line_tags
    else:
        raise MeshError("MSH file contains no triangles or tetrahedra")
    used = np.unique(np.array(cells).ravel())
    remap = -np.ones(len(coords), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = coords[used, :dim]
    cells = remap[np.array(cells)]
    boundary = {}
    for nodes, tag in zip(bnd, btags):
        name = names.get(tag)
        if name in ("dirichlet", "neumann"):
            boundary[tuple(int(remap[n]) for n in nodes)] = name
    if not boundary:
        log.warning("MSH file has no dirichlet/neumann physical groups; all boundary facets set to dirichlet")
    return Mesh(verts, cells, sub, boundary)
