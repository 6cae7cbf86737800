"""Fixed-topology triangular meshes.

A :class:`TriangleMesh` stores node coordinates, counterclockwise triangles
and per-node boundary markers.  The same object type serves both as the
physical mesh (whose nodes move) and as the frozen computational mesh; use
:meth:`TriangleMesh.with_nodes` to get a moved copy that shares topology.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class MeshFormatError(MeshError):
    """Malformed Triangle .node/.ele text."""

    def __init__(self, message, line=None, source=""):
        self.line = line
        where = f"{source}:" if source else ""
        if line is not None:
            message = f"{where}line {line}: {message}"
        super().__init__(message)


class TangledMeshError(MeshError):
    """Raised when an element has non-positive signed area or Jacobian."""

    def __init__(self, elements, message="tangled element"):
        self.elements = np.atleast_1d(np.asarray(elements, dtype=int))
        super().__init__(f"{message}: element(s) {self.elements[:10].tolist()}")


def signed_areas(nodes, triangles):
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


def basis_gradients(nodes, triangles, areas=None):
    """Gradients of the P1 barycentric functions, shape ``(n_elem, 3, 2)``."""
    if areas is None:
        areas = signed_areas(nodes, triangles)
    x = nodes[triangles, 0]
    y = nodes[triangles, 1]
    grads = np.empty(triangles.shape + (2,))
    grads[:, 0, 0] = y[:, 1] - y[:, 2]
    grads[:, 1, 0] = y[:, 2] - y[:, 0]
    grads[:, 2, 0] = y[:, 0] - y[:, 1]
    grads[:, 0, 1] = x[:, 2] - x[:, 1]
    grads[:, 1, 1] = x[:, 0] - x[:, 2]
    grads[:, 2, 1] = x[:, 1] - x[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return grads


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Conforming 2D triangulation with boundary markers.

    Parameters
    ----------
    nodes : (N, 2) float array
        Node coordinates in meters.
    triangles : (E, 3) int array
        Zero-based node indices, counterclockwise.
    boundary_markers : (N,) int array
        0 for interior nodes, a positive segment tag on the boundary.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_markers: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        markers = np.ascontiguousarray(self.boundary_markers, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError(f"nodes must have shape (N, 2), got {nodes.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError(f"triangles must have shape (E, 3), got {tris.shape}")
        if markers.shape != (nodes.shape[0],):
            raise MeshError("one boundary marker per node is required")
        if tris.size and (tris.min() < 0 or tris.max() >= nodes.shape[0]):
            raise MeshError("dangling index in triangle list")
        nodes.flags.writeable = False
        tris.flags.writeable = False
        markers.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "boundary_markers", markers)

    @classmethod
    def from_arrays(cls, nodes, triangles, boundary_markers=None, *, reorient=True):
        """Build a validated mesh.

        Clockwise triangles are flipped when ``reorient`` is set.  Missing or
        zero markers on boundary nodes are filled with 1; a positive marker on
        an interior node is an error.
        """
        nodes = np.asarray(nodes, dtype=float)
        tris = np.array(triangles, dtype=np.int64)
        if tris.size and (tris.min() < 0 or tris.max() >= len(nodes)):
            raise MeshError("dangling index in triangle list")
        area = signed_areas(nodes, tris)
        bad = np.flatnonzero(area == 0.0)
        if bad.size:
            raise MeshError(f"zero-area triangle(s) {bad[:10].tolist()}")
        if reorient:
            flip = area < 0
            if flip.any():
                logger.debug("reorienting %d clockwise triangles", flip.sum())
                tris[flip] = tris[flip][:, [0, 2, 1]]
        elif (area < 0).any():
            raise TangledMeshError(np.flatnonzero(area < 0), "clockwise triangle")
        used = np.zeros(len(nodes), dtype=bool)
        used[tris.ravel()] = True
        if not used.all():
            raise MeshError(f"node(s) {np.flatnonzero(~used)[:10].tolist()} not referenced by any triangle")
        on_boundary = _boundary_node_mask(tris, len(nodes))
        if boundary_markers is None:
            markers = on_boundary.astype(np.int64)
        else:
            markers = np.array(boundary_markers, dtype=np.int64)
            interior_marked = np.flatnonzero((markers > 0) & ~on_boundary)
            if interior_marked.size:
                raise MeshError(
                    f"interior node(s) {interior_marked[:10].tolist()} carry a boundary marker")
            unmarked = on_boundary & (markers <= 0)
            if unmarked.any():
                logger.warning("%d boundary nodes had marker 0; set to 1", unmarked.sum())
                markers[unmarked] = 1
            markers[~on_boundary] = 0
        return cls(nodes, tris, markers)

    # -- sizes -----------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.triangles.shape[0]

    # -- geometry --------------------------------------------------------
    @cached_property
    def signed_areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        return basis_gradients(self.nodes, self.triangles, self.signed_areas)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        """Nodal share of the domain area (row sums of the P1 mass matrix)."""
        return np.bincount(self.triangles.ravel(), np.repeat(self.areas / 3.0, 3),
                           minlength=self.n_nodes)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @property
    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    @property
    def diameter(self) -> float:
        lo, hi = self.bounding_box
        return float(np.hypot(*(hi - lo)))

    # -- topology (shared by moved copies) -----------------------------
    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape ``(n_edges, 2)`` with ``i < j``."""
        return _unique_edges(self.triangles)[0]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        edges, counts = _unique_edges(self.triangles)
        return edges[counts == 1]

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_markers > 0)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_markers == 0)

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """Node-by-element incidence matrix (1 where the node is a vertex)."""
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(self.n_elements), 3)
        return sparse.csr_matrix((np.ones(rows.size), (rows, cols)),
                                 shape=(self.n_nodes, self.n_elements))

    @cached_property
    def node_stars(self) -> list[np.ndarray]:
        """Incident triangles of every node."""
        inc = self.incidence
        return [inc.indices[inc.indptr[i]:inc.indptr[i + 1]] for i in range(self.n_nodes)]

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric node adjacency including the diagonal (closed 1-ring)."""
        a = (self.incidence @ self.incidence.T).tocsr()
        a.data[:] = 1.0
        return a

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        a = self.adjacency
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.n_nodes)]

    def with_nodes(self, nodes) -> "TriangleMesh":
        """Same topology, new coordinates.  Orientation is not re-checked."""
        moved = TriangleMesh(nodes, self.triangles, self.boundary_markers)
        for name in ("edges", "boundary_edges", "boundary_nodes", "interior_nodes",
                     "incidence", "node_stars", "adjacency", "neighbors"):
            if name in self.__dict__:
                moved.__dict__[name] = self.__dict__[name]
        return moved


def _unique_edges(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def _boundary_node_mask(triangles, n_nodes):
    edges, counts = _unique_edges(triangles)
    mask = np.zeros(n_nodes, dtype=bool)
    mask[edges[counts == 1].ravel()] = True
    return mask


# ---------------------------------------------------------------------------
# element geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElementGeometry:
    area: float
    basis_gradients: np.ndarray
    h_sharp: float
    h_dir: float
    direction: np.ndarray


def equal_area_diameter(areas):
    """Diameter of the disk with the same area."""
    return 2.0 * np.sqrt(np.asarray(areas) / np.pi)


def longest_edge_directions(nodes, triangles):
    p = nodes[triangles]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    lengths = np.hypot(e[..., 0], e[..., 1])
    k = lengths.argmax(axis=1)
    pick = e[np.arange(len(e)), k]
    return pick / lengths[np.arange(len(e)), k][:, None]


def centroid_chord_lengths(grads, directions):
    """Length of the chord through each centroid along ``directions``.

    Along ``c + t d`` the barycentric coordinates are ``1/3 + t g_a`` with
    ``g_a = grad(lambda_a) . d``; the chord is where all of them are >= 0.
    """
    g = np.einsum("eak,ek->ea", grads, directions)
    with np.errstate(divide="ignore"):
        upper = np.where(g < 0, (1.0 / 3.0) / np.where(g < 0, -g, 1.0), np.inf).min(axis=1)
        lower = np.where(g > 0, -(1.0 / 3.0) / np.where(g > 0, g, 1.0), -np.inf).max(axis=1)
    return upper - lower


def streamline_lengths(mesh: TriangleMesh, velocity):
    """Element length along the local velocity; longest edge where it vanishes.

    ``velocity`` is one 2-vector per element.
    """
    velocity = np.asarray(velocity, dtype=float)
    speed = np.hypot(velocity[:, 0], velocity[:, 1])
    tiny = speed <= 1e-300
    d = np.empty_like(velocity)
    d[~tiny] = velocity[~tiny] / speed[~tiny, None]
    if tiny.any():
        d[tiny] = longest_edge_directions(mesh.nodes, mesh.triangles[tiny])
    return centroid_chord_lengths(mesh.basis_gradients, d)


def element_geometry(mesh: TriangleMesh, k: int, direction=None) -> ElementGeometry:
    """Exact P1 geometry of element ``k``.

    ``direction`` must be a unit vector; ``None`` selects the longest edge.
    """
    area = float(mesh.signed_areas[k])
    if area <= 0.0:
        raise TangledMeshError(k, "degenerate element")
    if direction is None:
        d = longest_edge_directions(mesh.nodes, mesh.triangles[k:k + 1])[0]
    else:
        d = np.asarray(direction, dtype=float)
        if not math.isclose(float(np.hypot(*d)), 1.0, rel_tol=1e-9):
            raise ValueError("direction must be a unit vector")
    grads = mesh.basis_gradients[k]
    h_dir = float(centroid_chord_lengths(grads[None], d[None])[0])
    return ElementGeometry(area=area, basis_gradients=grads.copy(),
                           h_sharp=float(equal_area_diameter(area)), h_dir=h_dir,
                           direction=d)


# ---------------------------------------------------------------------------
# quality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityReport:
    n_nodes: int
    n_elements: int
    min_area: float
    max_area: float
    min_angle: float
    tangled: bool
    n_tangled: int

    def lines(self):
        return [
            f"nodes       {self.n_nodes}",
            f"elements    {self.n_elements}",
            f"min_area    {self.min_area:.6e}",
            f"max_area    {self.max_area:.6e}",
            f"min_angle   {self.min_angle:.4f} deg",
            f"tangled     {str(self.tangled).lower()} ({self.n_tangled} elements)",
        ]


def min_angles(nodes, triangles):
    """Smallest interior angle of each triangle, in degrees."""
    p = nodes[triangles]
    out = np.full(len(triangles), np.inf)
    for a in range(3):
        u = p[:, (a + 1) % 3] - p[:, a]
        v = p[:, (a + 2) % 3] - p[:, a]
        cross = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        dot = (u * v).sum(axis=1)
        out = np.minimum(out, np.degrees(np.arctan2(cross, dot)))
    return out


def mesh_quality(mesh: TriangleMesh) -> QualityReport:
    a = mesh.signed_areas
    bad = int(np.count_nonzero(a <= 0.0))
    return QualityReport(
        n_nodes=mesh.n_nodes,
        n_elements=mesh.n_elements,
        min_area=float(a.min()),
        max_area=float(a.max()),
        min_angle=float(min_angles(mesh.nodes, mesh.triangles).min()),
        tangled=bad > 0,
        n_tangled=bad,
    )


def is_tangled(nodes, triangles) -> bool:
    return bool((signed_areas(nodes, triangles) <= 0.0).any())


# ---------------------------------------------------------------------------
# structured generators
# ---------------------------------------------------------------------------

def rectangle_mesh(nx, ny, lx=1.0, ly=1.0, origin=(0.0, 0.0), pattern="alternating",
                   markers=None):
    """Uniform triangulation of a rectangle with ``(nx+1)*(ny+1)`` nodes.

    ``pattern`` is ``"right"`` (all diagonals SW-NE), ``"left"`` or
    ``"alternating"`` (union-jack-like flip per cell).  ``markers`` maps
    ``"left"/"right"/"bottom"/"top"`` to segment tags; corners take the tag of
    the left/right side.  Default tags: bottom 1, right 2, top 3, left 4.
    """
    tags = {"bottom": 1, "right": 2, "top": 3, "left": 4}
    if markers:
        tags.update(markers)
    x = origin[0] + lx * np.arange(nx + 1) / nx
    y = origin[1] + ly * np.arange(ny + 1) / ny
    xx, yy = np.meshgrid(x, y)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    sw = idx[:-1, :-1].ravel()
    se = idx[:-1, 1:].ravel()
    nw = idx[1:, :-1].ravel()
    ne = idx[1:, 1:].ravel()
    if pattern == "right":
        flip = np.zeros(sw.size, dtype=bool)
    elif pattern == "left":
        flip = np.ones(sw.size, dtype=bool)
    elif pattern == "alternating":
        i, j = np.meshgrid(np.arange(nx), np.arange(ny))
        flip = ((i + j) % 2 == 1).ravel()
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    t1 = np.where(flip[:, None], np.column_stack([sw, se, nw]), np.column_stack([sw, se, ne]))
    t2 = np.where(flip[:, None], np.column_stack([se, ne, nw]), np.column_stack([sw, ne, nw]))
    tris = np.concatenate([t1, t2])
    m = np.zeros(len(nodes), dtype=np.int64)
    m[idx[0, :]] = tags["bottom"]
    m[idx[-1, :]] = tags["top"]
    m[idx[:, 0]] = tags["left"]
    m[idx[:, -1]] = tags["right"]
    return TriangleMesh.from_arrays(nodes, tris, m)


# ---------------------------------------------------------------------------
# Triangle .node/.ele
# ---------------------------------------------------------------------------

def _data_lines(text):
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield number, line.split()


def _parse_int(tok, line, source):
    try:
        return int(tok)
    except ValueError:
        raise MeshFormatError(f"expected integer, got {tok!r}", line, source) from None


def _parse_float(tok, line, source):
    try:
        return float(tok)
    except ValueError:
        raise MeshFormatError(f"expected number, got {tok!r}", line, source) from None


def parse_node_text(text, source=".node"):
    lines = _data_lines(text)
    try:
        ln, head = next(lines)
    except StopIteration:
        raise MeshFormatError("empty file", None, source) from None
    if len(head) < 2:
        raise MeshFormatError("malformed header", ln, source)
    n = _parse_int(head[0], ln, source)
    dim = _parse_int(head[1], ln, source)
    n_attr = _parse_int(head[2], ln, source) if len(head) > 2 else 0
    n_mark = _parse_int(head[3], ln, source) if len(head) > 3 else 0
    if dim != 2:
        raise MeshFormatError(f"only 2D meshes are supported (dim={dim})", ln, source)
    if n <= 0 or n_attr < 0 or n_mark not in (0, 1):
        raise MeshFormatError("malformed header", ln, source)
    ids = np.empty(n, dtype=np.int64)
    xy = np.empty((n, 2))
    markers = np.zeros(n, dtype=np.int64) if n_mark else None
    need = 3 + n_attr + n_mark
    count = 0
    for ln, tok in lines:
        if count == n:
            raise MeshFormatError(f"more than {n} vertices", ln, source)
        if len(tok) < need:
            raise MeshFormatError(f"expected {need} fields, got {len(tok)}", ln, source)
        ids[count] = _parse_int(tok[0], ln, source)
        xy[count] = _parse_float(tok[1], ln, source), _parse_float(tok[2], ln, source)
        if n_mark:
            markers[count] = _parse_int(tok[3 + n_attr], ln, source)
        count += 1
    if count != n:
        raise MeshFormatError(f"header announces {n} vertices, found {count}", None, source)
    base = int(ids[0])
    if base not in (0, 1):
        raise MeshFormatError(f"first vertex index must be 0 or 1, got {base}", None, source)
    if not np.array_equal(ids, np.arange(base, base + n)):
        raise MeshFormatError("vertex indices are not consecutive", None, source)
    return xy, markers, base


def parse_ele_text(text, n_nodes, base, source=".ele"):
    lines = _data_lines(text)
    try:
        ln, head = next(lines)
    except StopIteration:
        raise MeshFormatError("empty file", None, source) from None
    if len(head) < 2:
        raise MeshFormatError("malformed header", ln, source)
    n = _parse_int(head[0], ln, source)
    per = _parse_int(head[1], ln, source)
    if n <= 0 or per not in (3, 6):
        raise MeshFormatError("malformed header", ln, source)
    tris = np.empty((n, 3), dtype=np.int64)
    lines_of = np.empty(n, dtype=np.int64)
    count = 0
    for ln, tok in lines:
        if count == n:
            raise MeshFormatError(f"more than {n} triangles", ln, source)
        if len(tok) < 1 + per:
            raise MeshFormatError(f"expected {1 + per} fields, got {len(tok)}", ln, source)
        corners = [_parse_int(t, ln, source) - base for t in tok[1:4]]
        for c in corners:
            if c < 0 or c >= n_nodes:
                raise MeshFormatError(f"dangling index {c + base} (mesh has {n_nodes} nodes)",
                                      ln, source)
        tris[count] = corners
        lines_of[count] = ln
        count += 1
    if count != n:
        raise MeshFormatError(f"header announces {n} triangles, found {count}", None, source)
    return tris, lines_of


def load_triangle_mesh(node_text: str, ele_text: str) -> TriangleMesh:
    """Parse Triangle's ASCII ``.node`` and ``.ele`` contents."""
    xy, markers, base = parse_node_text(node_text)
    tris, lines_of = parse_ele_text(ele_text, len(xy), base)
    area = signed_areas(xy, tris)
    zero = np.flatnonzero(area == 0.0)
    if zero.size:
        raise MeshFormatError("zero-area triangle", int(lines_of[zero[0]]), ".ele")
    return TriangleMesh.from_arrays(xy, tris, markers)


def read_triangle_files(node_path, ele_path) -> TriangleMesh:
    node_path, ele_path = Path(node_path), Path(ele_path)
    try:
        return load_triangle_mesh(node_path.read_text(), ele_path.read_text())
    except MeshFormatError as exc:
        raise MeshFormatError(f"{exc} [{node_path.name}/{ele_path.name}]") from None


def format_triangle_files(mesh: TriangleMesh, base=1):
    """Inverse of :func:`load_triangle_mesh` (``.node`` text, ``.ele`` text)."""
    node = [f"{mesh.n_nodes} 2 0 1"]
    for i, ((x, y), m) in enumerate(zip(mesh.nodes, mesh.boundary_markers)):
        node.append(f"{i + base} {float(x)!r} {float(y)!r} {int(m)}")
    ele = [f"{mesh.n_elements} 3 0"]
    for k, (a, b, c) in enumerate(mesh.triangles + base):
        ele.append(f"{k + base} {a} {b} {c}")
    return "\n".join(node) + "\n", "\n".join(ele) + "\n"


# ---------------------------------------------------------------------------
# legacy VTK
# ---------------------------------------------------------------------------

def write_vtk(mesh: TriangleMesh, fields: dict, path, title="movemesh output"):
    """Write a legacy ASCII ``UNSTRUCTURED_GRID`` file with point data.

    ``fields`` maps names to arrays of shape ``(N,)`` (scalars) or ``(N, 2)``
    (vectors, written with a zero third component).
    """
    n = mesh.n_nodes
    blocks = []
    for name, values in fields.items():
        arr = np.asarray(values, dtype=float)
        if arr.shape[0] != n or arr.ndim > 2 or (arr.ndim == 2 and arr.shape[1] != 2):
            raise ValueError(f"field {name!r} has shape {arr.shape}; expected ({n},) or ({n}, 2)")
        safe = str(name).replace(" ", "_")
        if arr.ndim == 1:
            blocks.append(f"SCALARS {safe} double 1\nLOOKUP_TABLE default")
            blocks.extend(repr(float(v)) for v in arr)
        else:
            blocks.append(f"VECTORS {safe} double")
            blocks.extend(f"{float(a)!r} {float(b)!r} 0.0" for a, b in arr)
    out = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {n} double"]
    out.extend(f"{float(x)!r} {float(y)!r} 0.0" for x, y in mesh.nodes)
    e = mesh.n_elements
    out.append(f"CELLS {e} {4 * e}")
    out.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    out.append(f"CELL_TYPES {e}")
    out.extend("5" for _ in range(e))
    if blocks:
        out.append(f"POINT_DATA {n}")
        out.extend(blocks)
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def read_vtk_points(path):
    """Point coordinates of a legacy VTK file written by :func:`write_vtk`."""
    lines = Path(path).read_text().splitlines()
    for i, line in enumerate(lines):
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            pts = np.array([[float(t) for t in lines[i + 1 + k].split()] for k in range(n)])
            return pts[:, :2]
    raise ValueError("no POINTS section")
