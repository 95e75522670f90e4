# mesh.py
"""
Affine simplicial meshes (triangles in 2D, tetrahedra in 3D) with constant
P1 hat-function gradients, boundary extraction from the oriented incidence
structure, OFF/TOFF input and legacy ASCII VTK output.

Box-face markers: -x=1, +x=2, -y=3, +y=4, -z=5, +z=6; 0 for boundary facets
that do not lie on a face of the bounding box.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from itertools import permutations
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from exterior import permutation_sign

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-14
VTK_CELL_TYPES = {2: 5, 3: 10}


class MeshParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateElementError(ValueError):
    def __init__(self, element: int, volume: float):
        super().__init__(f"Degenerate element {element} (volume {volume:.3e})")
        self.element = element


@dataclass
class ElementGeometry:
    volume: float
    grad_hats: np.ndarray  # (n+1, n), row v is grad of the hat function of local vertex v


def _signed_volumes(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    n = vertices.shape[1]
    edges = vertices[elements[:, 1:]] - vertices[elements[:, :1]]
    return np.linalg.det(edges) / factorial(n)


def boundary_chain(cells: np.ndarray) -> Dict[Tuple[int, ...], int]:
    """
    Boundary operator on oriented simplices: sum_i (-1)^i [v0..^vi..vk].
    Faces are keyed by their sorted vertex tuple; values are the summed
    orientation coefficients, accumulated in cell order.
    """
    chain: Dict[Tuple[int, ...], int] = {}
    for cell in np.asarray(cells, dtype=int):
        cell = [int(v) for v in cell]
        for i in range(len(cell)):
            face = cell[:i] + cell[i + 1:]
            coeff = (-1) ** i * permutation_sign(face)
            key = tuple(sorted(face))
            chain[key] = chain.get(key, 0) + coeff
    return chain


def _oriented_faces(chain: Dict[Tuple[int, ...], int]) -> np.ndarray:
    faces = []
    for key, coeff in chain.items():
        if coeff == 0:
            continue
        if abs(coeff) != 1:
            raise ValueError(f"Facet {key} is shared by more than two elements")
        face = list(key)
        if coeff < 0:
            face[0], face[1] = face[1], face[0]
        faces.append(face)
    return np.array(faces, dtype=int)


def boundary_of_boundary(facets: np.ndarray) -> Dict[Tuple[int, ...], int]:
    """Nonzero entries of the boundary of an oriented facet chain (empty for a closed boundary)."""
    return {k: v for k, v in boundary_chain(facets).items() if v != 0}


@dataclass
class SimplicialMesh:
    vertices: np.ndarray
    elements: np.ndarray
    boundary_facets: Optional[np.ndarray] = None
    facet_markers: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.array(self.vertices, dtype=float)
        self.elements = np.array(self.elements, dtype=int)
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (2, 3):
            raise ValueError(f"Vertices must be an (N, 2) or (N, 3) array, got {self.vertices.shape}")
        n = self.dim
        if self.elements.ndim != 2 or self.elements.shape[1] != n + 1:
            raise ValueError(f"Elements must have {n + 1} vertex ids each")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= len(self.vertices)):
            raise ValueError("Element vertex index out of range")
        signed = _signed_volumes(self.vertices, self.elements)
        flip = signed < 0
        if np.any(flip):
            self.elements[flip, 0], self.elements[flip, 1] = (
                self.elements[flip, 1].copy(), self.elements[flip, 0].copy())
            logger.debug(f"Reoriented {int(flip.sum())} elements")
        self._check_degenerate(np.abs(signed))
        if self.boundary_facets is None:
            self.boundary_facets = _oriented_faces(boundary_chain(self.elements))
        self.boundary_facets = np.array(self.boundary_facets, dtype=int).reshape(-1, n)
        if self.boundary_facets.size and (self.boundary_facets.min() < 0
                                          or self.boundary_facets.max() >= len(self.vertices)):
            raise ValueError("Boundary facet vertex index out of range")
        if self.facet_markers is None:
            self.facet_markers = self._box_markers()
        self.facet_markers = np.array(self.facet_markers, dtype=int).reshape(-1)
        if len(self.facet_markers) != len(self.boundary_facets):
            raise ValueError("One marker per boundary facet is required")

    def _check_degenerate(self, volumes: np.ndarray):
        n = self.dim
        edges = self.vertices[self.elements[:, 1:]] - self.vertices[self.elements[:, :1]]
        scale = np.max(np.linalg.norm(edges, axis=-1), axis=-1) ** n
        bad = np.flatnonzero(volumes <= DEGENERATE_TOL * scale)
        if bad.size:
            raise DegenerateElementError(int(bad[0]), float(volumes[bad[0]]))

    def _box_markers(self) -> np.ndarray:
        lo, hi = self.bounding_box
        tol = 1e-12 * max(float(np.max(hi - lo)), 1.0)
        markers = np.zeros(len(self.boundary_facets), dtype=int)
        for f, facet in enumerate(self.boundary_facets):
            coords = self.vertices[facet]
            for axis in range(self.dim):
                if np.all(np.abs(coords[:, axis] - lo[axis]) <= tol):
                    markers[f] = 2 * axis + 1
                elif np.all(np.abs(coords[:, axis] - hi[axis]) <= tol):
                    markers[f] = 2 * axis + 2
        return markers

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    @property
    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def scale(self) -> float:
        lo, hi = self.bounding_box
        return float(np.linalg.norm(hi - lo))

    @cached_property
    def geometry(self) -> Tuple[np.ndarray, np.ndarray]:
        """(volumes (E,), grad_hats (E, n+1, n)) for every element."""
        n = self.dim
        edges = self.vertices[self.elements[:, 1:]] - self.vertices[self.elements[:, :1]]
        volumes = np.abs(np.linalg.det(edges)) / factorial(n)
        inv_t = np.swapaxes(np.linalg.inv(edges), -1, -2)
        grads = np.concatenate([-inv_t.sum(axis=1, keepdims=True), inv_t], axis=1)
        return volumes, grads

    @cached_property
    def facet_measures(self) -> np.ndarray:
        """Length (2D) or area (3D) of each boundary facet."""
        pts = self.vertices[self.boundary_facets]
        if self.dim == 2:
            return np.linalg.norm(pts[:, 1] - pts[:, 0], axis=-1)
        return 0.5 * np.linalg.norm(np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0]), axis=-1)

    def vertices_with_markers(self, markers: Sequence[int]) -> np.ndarray:
        """Sorted ids of vertices on boundary facets carrying any of ``markers``."""
        chosen = np.isin(self.facet_markers, list(markers))
        return np.unique(self.boundary_facets[chosen])


def element_geometry(mesh: SimplicialMesh, element: int) -> ElementGeometry:
    if not 0 <= element < mesh.num_elements:
        raise ValueError(f"Element id {element} out of range")
    volumes, grads = mesh.geometry
    edges = mesh.vertices[mesh.elements[element, 1:]] - mesh.vertices[mesh.elements[element, 0]]
    scale = float(np.max(np.linalg.norm(edges, axis=-1))) ** mesh.dim
    if volumes[element] <= DEGENERATE_TOL * scale:
        raise DegenerateElementError(element, float(volumes[element]))
    return ElementGeometry(float(volumes[element]), grads[element].copy())


def build_box_mesh(n: int, divisions: Sequence[int],
                   bounds: Optional[Sequence[Tuple[float, float]]] = None) -> SimplicialMesh:
    """
    Structured box mesh.  2D cells are split along the (lo,lo)-(hi,hi)
    diagonal; 3D cubes into the 6 Kuhn tetrahedra around the main diagonal.
    """
    if n not in (2, 3):
        raise ValueError(f"Unsupported dimension {n}")
    divisions = tuple(int(d) for d in divisions)
    if len(divisions) != n or min(divisions) < 1:
        raise ValueError(f"Need {n} divisions >= 1, got {divisions}")
    bounds = tuple(bounds) if bounds is not None else ((0.0, 1.0),) * n
    axes = [np.linspace(lo, hi, d + 1) for (lo, hi), d in zip(bounds, divisions)]
    # x varies fastest
    grids = np.meshgrid(*axes, indexing='ij')
    vertices = np.stack([g.reshape(-1, order='F') for g in grids], axis=-1)
    strides = np.cumprod([1] + [d + 1 for d in divisions[:-1]])

    def vid(idx):
        return int(np.dot(idx, strides))

    elements: List[List[int]] = []
    if n == 2:
        for j in range(divisions[1]):
            for i in range(divisions[0]):
                v00, v10 = vid((i, j)), vid((i + 1, j))
                v11, v01 = vid((i + 1, j + 1)), vid((i, j + 1))
                elements.append([v00, v10, v11])
                elements.append([v00, v11, v01])
    else:
        for k in range(divisions[2]):
            for j in range(divisions[1]):
                for i in range(divisions[0]):
                    for order in permutations(range(3)):
                        corner = np.array([i, j, k])
                        path = [vid(corner)]
                        for axis in order:
                            corner = corner.copy()
                            corner[axis] += 1
                            path.append(vid(corner))
                        elements.append(path)
    mesh = SimplicialMesh(vertices, np.array(elements, dtype=int))
    logger.debug(f"Built {n}D box mesh: {mesh.num_vertices} vertices, {mesh.num_elements} elements")
    return mesh


# ---------------------------------------------------------------- OFF / TOFF

def _content_lines(path: str) -> List[Tuple[int, List[str]]]:
    out = []
    with open(path, 'r') as f:
        for number, raw in enumerate(f, start=1):
            text = raw.split('#', 1)[0].strip()
            if text:
                out.append((number, text.split()))
    return out


def load_off(path: str) -> SimplicialMesh:
    """Read an ASCII OFF (2D triangles, z = 0) or TOFF (3D tetrahedra) file."""
    lines = _content_lines(path)
    if not lines:
        raise MeshParseError(1, "empty file")
    number, tokens = lines[0]
    header = tokens[0]
    if header not in ('OFF', 'TOFF'):
        raise MeshParseError(number, f"expected 'OFF' or 'TOFF' header, got '{header}'")
    dim = 2 if header == 'OFF' else 3
    cursor = 1
    counts = tokens[1:]
    if not counts:
        if cursor >= len(lines):
            raise MeshParseError(number, "missing counts line")
        number, counts = lines[cursor]
        cursor += 1
    try:
        num_vertices, num_cells = int(counts[0]), int(counts[1])
    except (IndexError, ValueError):
        raise MeshParseError(number, f"malformed counts line: {' '.join(counts)}")
    if num_vertices < 0 or num_cells < 0:
        raise MeshParseError(number, "negative counts")

    vertices = np.zeros((num_vertices, dim))
    for v in range(num_vertices):
        if cursor >= len(lines):
            raise MeshParseError(number + 1, f"expected {num_vertices} vertices, found {v}")
        number, tokens = lines[cursor]
        cursor += 1
        try:
            coords = [float(t) for t in tokens]
        except ValueError:
            raise MeshParseError(number, f"malformed vertex line: {' '.join(tokens)}")
        if len(coords) != 3:
            raise MeshParseError(number, f"vertex needs 3 coordinates, got {len(coords)}")
        if dim == 2 and coords[2] != 0.0:
            raise MeshParseError(number, "OFF meshes must be planar (z = 0)")
        vertices[v] = coords[:dim]

    cell_size = dim + 1
    cells = np.zeros((num_cells, cell_size), dtype=int)
    for c in range(num_cells):
        if cursor >= len(lines):
            raise MeshParseError(number + 1, f"expected {num_cells} cells, found {c}")
        number, tokens = lines[cursor]
        cursor += 1
        try:
            values = [int(t) for t in tokens]
        except ValueError:
            raise MeshParseError(number, f"malformed cell line: {' '.join(tokens)}")
        if not values or values[0] != cell_size or len(values) != cell_size + 1:
            raise MeshParseError(number, f"cell must list exactly {cell_size} vertex ids")
        ids = values[1:]
        if min(ids) < 0 or max(ids) >= num_vertices:
            raise MeshParseError(number, f"vertex index out of range in {ids}")
        cells[c] = ids
    if cursor < len(lines):
        raise MeshParseError(lines[cursor][0], "unexpected data after the declared cells")
    mesh = SimplicialMesh(vertices, cells)
    logger.info(f"Loaded {path}: {mesh.num_vertices} vertices, {mesh.num_elements} elements")
    return mesh


def save_off(path: str, mesh: SimplicialMesh):
    header = 'OFF' if mesh.dim == 2 else 'TOFF'
    lines = [header, f"{mesh.num_vertices} {mesh.num_elements} 0"]
    for v in mesh.vertices:
        coords = list(v) + [0.0] * (3 - mesh.dim)
        lines.append(' '.join(f"{c:.17g}" for c in coords))
    for cell in mesh.elements:
        lines.append(f"{len(cell)} " + ' '.join(str(int(i)) for i in cell))
    with open(path, 'w') as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- VTK / CSV

def _fmt(values) -> str:
    return ' '.join(f"{float(v):.17g}" for v in values)


def _pad(values: np.ndarray, width: int = 3) -> np.ndarray:
    padded = np.zeros(values.shape[:-1] + (width,))
    padded[..., :values.shape[-1]] = values
    return padded


def _data_section(lines: List[str], fields: Dict[str, np.ndarray], count: int, dim: int):
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if values.shape[0] != count:
            raise ValueError(f"Field '{name}' has {values.shape[0]} entries, expected {count}")
        if values.ndim == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.17g}" for v in values)
        elif values.ndim == 2 and values.shape[1] == dim:
            lines.append(f"VECTORS {name} double")
            lines.extend(_fmt(row) for row in _pad(values))
        elif values.ndim == 3 and values.shape[1:] == (dim, dim):
            lines.append(f"TENSORS {name} double")
            for tensor in values:
                full = np.zeros((3, 3))
                full[:dim, :dim] = tensor
                lines.extend(_fmt(row) for row in full)
        else:
            raise ValueError(f"Field '{name}' of shape {values.shape} is not scalar, vector or tensor")


def save_vtk(path: str, mesh: SimplicialMesh,
             point_data: Optional[Dict[str, np.ndarray]] = None,
             cell_data: Optional[Dict[str, np.ndarray]] = None,
             title: str = "hu-washizu"):
    """Legacy ASCII VTK 2.0 unstructured grid; fields are written in dict order."""
    n = mesh.dim
    lines = [
        "# vtk DataFile Version 2.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.num_vertices} double",
    ]
    lines.extend(_fmt(row) for row in _pad(mesh.vertices))
    lines.append(f"CELLS {mesh.num_elements} {mesh.num_elements * (n + 2)}")
    lines.extend(f"{n + 1} " + ' '.join(str(int(i)) for i in cell) for cell in mesh.elements)
    lines.append(f"CELL_TYPES {mesh.num_elements}")
    lines.extend(str(VTK_CELL_TYPES[n]) for _ in range(mesh.num_elements))
    if point_data:
        lines.append(f"POINT_DATA {mesh.num_vertices}")
        _data_section(lines, point_data, mesh.num_vertices, n)
    if cell_data:
        lines.append(f"CELL_DATA {mesh.num_elements}")
        _data_section(lines, cell_data, mesh.num_elements, n)
    with open(path, 'w') as f:
        f.write("\n".join(lines) + "\n")
    logger.debug(f"Wrote {path}")


def save_cell_csv(path: str, mesh: SimplicialMesh, fields: Dict[str, np.ndarray]):
    """Per-element values, one row per element; matrix fields are split into name_ab columns."""
    columns: Dict[str, np.ndarray] = {'element': np.arange(mesh.num_elements)}
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            columns[name] = values
        elif values.ndim == 2:
            for a in range(values.shape[1]):
                columns[f"{name}_{a + 1}"] = values[:, a]
        else:
            for a in range(values.shape[1]):
                for b in range(values.shape[2]):
                    columns[f"{name}_{a + 1}{b + 1}"] = values[:, a, b]
    pd.DataFrame(columns).to_csv(path, index=False, float_format='%.17g')
