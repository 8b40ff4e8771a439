"""Structured quad-4 meshes for unit cells, ensembles and macro domains.

Every mesh here is generated from a tensor-product grid (xs x ys) with a
per-element region tag, so tiling and fine-region embedding are exact
integer-lattice operations: shared nodes are identified by grid index,
never by coordinate matching.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError, ResolutionError

MATRIX, FIBER, LAYER, MACRO, DB = "matrix", "fiber", "layer", "macro", "db"

PAIR_TOL = 1e-9  # um, paired-node coordinate mismatch bound


@dataclass
class Mesh:
    """Conforming quad-4 mesh.

    nodes: (n, 2) reference coordinates in um; elems: (m, 4) counterclockwise
    connectivity; region: (m,) tag per element; dims: bounding (L, H);
    grid: optional (xs, ys) structured provenance used for exact tiling.
    """

    nodes: np.ndarray
    elems: np.ndarray
    region: np.ndarray
    dims: tuple
    origin: tuple = (0.0, 0.0)
    grid: tuple = None

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elems(self):
        return self.elems.shape[0]

    @property
    def n_dofs(self):
        return 2 * self.nodes.shape[0]

    def centroids(self):
        return self.nodes[self.elems].mean(axis=1)

    def element_areas(self):
        x = self.nodes[self.elems]
        # shoelace on the quad corners
        s = 0.0
        for a in range(4):
            b = (a + 1) % 4
            s = s + x[:, a, 0] * x[:, b, 1] - x[:, b, 0] * x[:, a, 1]
        return 0.5 * s

    def volume_fraction(self, tag=FIBER):
        areas = self.element_areas()
        return float(areas[self.region == tag].sum() / areas.sum())


@dataclass
class PeriodicPairing:
    """Opposite-edge node pairs plus the tied corner group.

    pairs[:, 0] is the plus node, pairs[:, 1] the minus node; vector_index
    selects which of the two periodicity vectors separates them.  corners
    lists [master, slave...] with corner_shifts the master-to-slave offsets.
    """

    pairs: np.ndarray
    vectors: np.ndarray
    vector_index: np.ndarray
    corners: np.ndarray
    corner_shifts: np.ndarray = field(default=None)

    def validate(self, mesh):
        d = mesh.nodes[self.pairs[:, 0]] - mesh.nodes[self.pairs[:, 1]]
        err = np.abs(d - self.vectors[self.vector_index])
        if err.size and err.max() > PAIR_TOL:
            raise InvalidSpecError(f"periodic pair offset error {err.max():g} um")
        if np.any(self.pairs[:, 0] == self.pairs[:, 1]):
            raise InvalidSpecError("node paired with itself")
        plus = self.pairs[:, 0]
        if np.unique(plus).size != plus.size:
            raise InvalidSpecError("plus node appears in more than one pair")


@dataclass(frozen=True)
class UnitCellSpec:
    """Geometry and subdivision of a periodic unit cell.

    layered: horizontal fiber strip of thickness H_f centered at mid-height
    of an L x H rectangle.  staggered: one centered short fiber plus two
    boundary-straddling half fibers offset by (L/2, H/2); H is derived from
    the fiber volume fraction as 2 L_f H_f / (L V_f).
    """

    pattern: str
    L: float
    H: float = None
    H_f: float = None
    L_f: float = None
    V_f: float = None
    nx: int = 36
    ny_fiber: int = 2
    ny_matrix: int = 4
    orientation: str = "x"

    def __post_init__(self):
        if self.pattern not in ("layered", "staggered"):
            raise InvalidSpecError(f"unknown cell pattern {self.pattern!r}")
        if self.orientation not in ("x", "y"):
            raise InvalidSpecError("orientation must be 'x' or 'y'")
        if self.L is None or self.L <= 0.0:
            raise InvalidSpecError("cell length L must be positive")

    def derived_height(self):
        if self.pattern == "layered":
            if self.H is None or self.H_f is None:
                raise InvalidSpecError("layered cell needs H and H_f")
            return self.H
        if self.V_f is None or self.L_f is None or self.H_f is None:
            raise InvalidSpecError("staggered cell needs L_f, H_f, V_f")
        if not 0.0 < self.V_f < 1.0:
            raise InvalidSpecError(f"V_f must be in (0, 1), got {self.V_f}")
        return 2.0 * self.L_f * self.H_f / (self.L * self.V_f)

    def cell_dims(self):
        """(width, height) after applying the orientation."""
        L, H = self.L, self.derived_height()
        return (H, L) if self.orientation == "y" else (L, H)

    def to_dict(self):
        return {
            "pattern": self.pattern, "L": self.L, "H": self.H, "H_f": self.H_f,
            "L_f": self.L_f, "V_f": self.V_f, "nx": self.nx,
            "ny_fiber": self.ny_fiber, "ny_matrix": self.ny_matrix,
            "orientation": self.orientation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _subdivide(breaks, counts):
    """Grid coordinates from interval breakpoints and per-interval counts."""
    xs = [np.asarray([breaks[0]])]
    for (a, b), n in zip(zip(breaks[:-1], breaks[1:]), counts):
        xs.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(xs)


def _structured(xs, ys, region_of):
    """Mesh from grid lines; region_of(xc, yc) tags element centroids."""
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    ix, iy = ix.ravel(), iy.ravel()
    n0 = iy * (nx + 1) + ix
    elems = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1]).astype(np.int64)
    xc = 0.5 * (xs[ix] + xs[ix + 1])
    yc = 0.5 * (ys[iy] + ys[iy + 1])
    region = np.asarray(region_of(xc, yc), dtype=object)
    return Mesh(nodes, elems, region, (float(xs[-1] - xs[0]), float(ys[-1] - ys[0])),
                origin=(float(xs[0]), float(ys[0])), grid=(np.asarray(xs), np.asarray(ys)))


def _grid_pairing(mesh):
    """Periodic pairing of a structured rectangle: right->left, top->bottom."""
    xs, ys = mesh.grid
    nx, ny = len(xs) - 1, len(ys) - 1
    nid = lambda ix, iy: iy * (nx + 1) + ix
    pairs, vidx = [], []
    for iy in range(1, ny):
        pairs.append((nid(nx, iy), nid(0, iy)))
        vidx.append(0)
    for ix in range(1, nx):
        pairs.append((nid(ix, ny), nid(ix, 0)))
        vidx.append(1)
    L = float(xs[-1] - xs[0])
    H = float(ys[-1] - ys[0])
    vectors = np.array([[L, 0.0], [0.0, H]])
    corners = np.array([nid(0, 0), nid(nx, 0), nid(0, ny), nid(nx, ny)])
    shifts = np.array([[L, 0.0], [0.0, H], [L, H]])
    return PeriodicPairing(np.asarray(pairs, dtype=np.int64), vectors,
                           np.asarray(vidx, dtype=np.int64), corners, shifts)


def build_layered_cell(spec: UnitCellSpec):
    """Unit cell of a unidirectional layered composite: one fiber strip."""
    L, H, H_f = spec.L, spec.derived_height(), spec.H_f
    if not 0.0 < H_f < H:
        raise InvalidSpecError(f"fiber thickness {H_f} outside (0, {H})")
    if spec.ny_fiber < 2:
        raise ResolutionError("fiber strip needs at least 2 element rows")
    y0, y1 = 0.5 * (H - H_f), 0.5 * (H + H_f)
    xs = np.linspace(0.0, L, spec.nx + 1)
    ys = _subdivide([0.0, y0, y1, H], [spec.ny_matrix, spec.ny_fiber, spec.ny_matrix])

    def region_of(xc, yc):
        return np.where((yc > y0) & (yc < y1), FIBER, MATRIX)

    mesh = _orient(_structured(xs, ys, region_of), spec.orientation)
    return mesh, _grid_pairing(mesh)


def build_staggered_cell(spec: UnitCellSpec):
    """Unit cell of a staggered short-fiber composite.

    One full fiber centered at (L/2, H/4) plus two half fibers straddling
    the lateral boundary at height 3H/4; tiling this cell yields the
    staggered array.
    """
    L, H, L_f, H_f = spec.L, spec.derived_height(), spec.L_f, spec.H_f
    if not 0.0 < L_f < L:
        raise InvalidSpecError(f"fiber length {L_f} outside (0, {L})")
    if H_f >= H / 2.0:
        raise InvalidSpecError("fiber rows overlap: H_f must be below H/2")
    if H > 10.0 * L or H < 0.05 * L:
        raise InvalidSpecError(f"degenerate cell aspect H/L = {H / L:g}")
    if spec.ny_fiber < 2:
        raise ResolutionError("fiber strips need at least 2 element rows")

    xb = sorted({0.0, 0.5 * (L - L_f), 0.5 * L_f, L - 0.5 * L_f, 0.5 * (L + L_f), L})
    widths = np.diff(xb)
    nxs = [max(1, int(round(spec.nx * w / L))) for w in widths]
    xs = _subdivide(xb, nxs)

    yA0, yA1 = 0.25 * H - 0.5 * H_f, 0.25 * H + 0.5 * H_f
    yB0, yB1 = 0.75 * H - 0.5 * H_f, 0.75 * H + 0.5 * H_f
    nm = spec.ny_matrix
    ys = _subdivide([0.0, yA0, yA1, yB0, yB1, H],
                    [nm, spec.ny_fiber, 2 * nm, spec.ny_fiber, nm])

    inA_x = lambda xc: (xc > 0.5 * (L - L_f)) & (xc < 0.5 * (L + L_f))
    inB_x = lambda xc: (xc < 0.5 * L_f) | (xc > L - 0.5 * L_f)

    def region_of(xc, yc):
        fib = (inA_x(xc) & (yc > yA0) & (yc < yA1)) | (inB_x(xc) & (yc > yB0) & (yc < yB1))
        return np.where(fib, FIBER, MATRIX)

    mesh = _orient(_structured(xs, ys, region_of), spec.orientation)
    return mesh, _grid_pairing(mesh)


def build_unit_cell(spec: UnitCellSpec):
    if spec.pattern == "layered":
        return build_layered_cell(spec)
    return build_staggered_cell(spec)


def _orient(mesh, orientation):
    """Rotate a structured mesh 90 deg counterclockwise when requested."""
    if orientation == "x":
        return mesh
    # (x, y) -> (H - y, x): re-run the structured generator on the swapped
    # grid so node ordering and grid metadata stay canonical
    xs, ys = mesh.grid
    H = float(ys[-1] - ys[0])
    ys_new = xs.copy()
    xs_new = (H - ys)[::-1].copy()
    nx, ny = len(xs) - 1, len(ys) - 1
    region_grid = mesh.region.reshape(ny, nx)
    region_new = region_grid[::-1, :].T  # indexed [iy_new, ix_new]
    out = _structured(xs_new, ys_new, lambda xc, yc: np.full(xc.shape, MATRIX, dtype=object))
    out.region = region_new.reshape(-1).copy()
    return out


def tile(mesh, kx, ky):
    """kx x ky conforming copies of a structured cell with fused shared edges."""
    if kx < 1 or ky < 1:
        raise InvalidSpecError("tile counts must be >= 1")
    if mesh.grid is None:
        raise InvalidSpecError("tile requires a structured (grid-backed) mesh")
    xs, ys = mesh.grid
    L = float(xs[-1] - xs[0])
    H = float(ys[-1] - ys[0])
    xs_t = np.concatenate([xs[:-1] + i * L for i in range(kx)] + [np.asarray([kx * L])])
    ys_t = np.concatenate([ys[:-1] + j * H for j in range(ky)] + [np.asarray([ky * H])])
    nx, ny = len(xs) - 1, len(ys) - 1
    region_grid = mesh.region.reshape(ny, nx)
    region_t = np.tile(region_grid, (ky, kx)).reshape(-1)
    out = _structured(xs_t, ys_t, lambda xc, yc: np.full(xc.shape, MATRIX, dtype=object))
    out.region = region_t.copy()
    return out, _grid_pairing(out)


def build_macro_mesh(domain_dims, cell_dims):
    """Regular grid of cell-sized bilinear macro elements covering the domain."""
    (Lbar, Hbar), (cl, ch) = domain_dims, cell_dims
    kx, ky = Lbar / cl, Hbar / ch
    if abs(kx - round(kx)) > 0.005 * max(1.0, kx) or abs(ky - round(ky)) > 0.005 * max(1.0, ky):
        raise InvalidSpecError(
            f"domain {domain_dims} is not an integral number of cells {cell_dims}")
    kx, ky = int(round(kx)), int(round(ky))
    xs = np.linspace(0.0, Lbar, kx + 1)
    ys = np.linspace(0.0, Hbar, ky + 1)
    return _structured(xs, ys, lambda xc, yc: np.full(xc.shape, MACRO, dtype=object))


def macro_grid_shape(macro):
    xs, ys = macro.grid
    return len(xs) - 1, len(ys) - 1


def element_cells(mesh, cell_dims, origin=(0.0, 0.0)):
    """(i, j) unit-cell footprint index of every element centroid."""
    c = mesh.centroids()
    i = np.floor((c[:, 0] - origin[0]) / cell_dims[0]).astype(int)
    j = np.floor((c[:, 1] - origin[1]) / cell_dims[1]).astype(int)
    return np.column_stack([i, j])


def cells_in_boxes(macro, boxes):
    """Mark macro elements whose centroid falls inside any axis-aligned box."""
    xs, ys = macro.grid
    kx, ky = len(xs) - 1, len(ys) - 1
    cl, ch = xs[1] - xs[0], ys[1] - ys[0]
    critical = np.zeros((ky, kx), dtype=bool)
    for (x0, y0, x1, y1) in boxes:
        for v, lines in ((x0, xs), (x1, xs), (y0, ys), (y1, ys)):
            if np.min(np.abs(lines - v)) > 1e-6 * max(1.0, abs(v)):
                raise InvalidSpecError(f"box coordinate {v} not on a macro element edge")
        i0, i1 = int(round(x0 / cl)), int(round(x1 / cl))
        j0, j1 = int(round(y0 / ch)), int(round(y1 / ch))
        critical[j0:j1, i0:i1] = True
    return critical


def embed_fine_region(macro, boxes, cell_mesh):
    """Replace critical macro elements by resolved unit-cell meshes.

    Returns the composite mesh (coarse elements keep tag 'db', fine elements
    keep the cell's region tags) and the interface tie map: a list of
    (fine_node, coarse_node_a, coarse_node_b, s) records placing each fine
    boundary node on a retained coarse element edge at parameter s.
    """
    if cell_mesh.grid is None:
        raise InvalidSpecError("embedding requires a structured cell mesh")
    critical = cells_in_boxes(macro, boxes)
    kx, ky = macro_grid_shape(macro)
    xs_c, ys_c = cell_mesh.grid
    nxc, nyc = len(xs_c) - 1, len(ys_c) - 1
    cl = float(xs_c[-1] - xs_c[0])
    ch = float(ys_c[-1] - ys_c[0])

    # --- coarse part: retained macro elements and their nodes
    coarse_keep = ~critical
    macro_elem_ids = np.arange(macro.n_elems).reshape(ky, kx)
    kept_elems = macro.elems[macro_elem_ids[coarse_keep]]
    kept_nodes = np.unique(kept_elems)
    coarse_remap = -np.ones(macro.n_nodes, dtype=np.int64)
    coarse_remap[kept_nodes] = np.arange(kept_nodes.size)
    nodes = [macro.nodes[kept_nodes]]
    elems = [coarse_remap[kept_elems]]
    region = [np.full(kept_elems.shape[0], DB, dtype=object)]
    n_offset = kept_nodes.size

    # --- fine part: global integer lattice over all critical cells
    fine_index = {}
    fine_coords = []

    def fine_node(gx, gy):
        key = (gx, gy)
        nid = fine_index.get(key)
        if nid is None:
            nid = n_offset + len(fine_coords)
            fine_index[key] = nid
            ci, rem = divmod(gx, nxc)
            x = ci * cl + float(xs_c[rem])
            cj, rem = divmod(gy, nyc)
            y = cj * ch + float(ys_c[rem])
            fine_coords.append((x, y))
        return nid

    region_grid = cell_mesh.region.reshape(nyc, nxc)
    fine_elems, fine_region = [], []
    for j in range(ky):
        for i in range(kx):
            if not critical[j, i]:
                continue
            for ly in range(nyc):
                gy = j * nyc + ly
                for lx in range(nxc):
                    gx = i * nxc + lx
                    fine_elems.append((fine_node(gx, gy), fine_node(gx + 1, gy),
                                       fine_node(gx + 1, gy + 1), fine_node(gx, gy + 1)))
                    fine_region.append(region_grid[ly, lx])
    if fine_elems:
        nodes.append(np.asarray(fine_coords))
        elems.append(np.asarray(fine_elems, dtype=np.int64))
        region.append(np.asarray(fine_region, dtype=object))

    out = Mesh(np.vstack(nodes), np.vstack(elems), np.concatenate(region),
               macro.dims, origin=macro.origin)

    # --- interface ties: fine boundary nodes on retained coarse edges
    ties = []
    macro_nid = lambda i, j: j * (kx + 1) + i

    def tie_edge(i, j, side):
        """Fine nodes of critical cell (i,j) on `side`, tied to the coarse edge there."""
        if side in ("left", "right"):
            gx = i * nxc if side == "left" else (i + 1) * nxc
            locs = [(gx, j * nyc + ly) for ly in range(nyc + 1)]
            ci = i if side == "left" else i + 1
            na, nb = macro_nid(ci, j), macro_nid(ci, j + 1)
            coords = [out.nodes[fine_index[(x, y)]][1] for x, y in locs]
            a, b = macro.nodes[na][1], macro.nodes[nb][1]
        else:
            gy = j * nyc if side == "bottom" else (j + 1) * nyc
            locs = [(i * nxc + lx, gy) for lx in range(nxc + 1)]
            cj = j if side == "bottom" else j + 1
            na, nb = macro_nid(i, cj), macro_nid(i + 1, cj)
            coords = [out.nodes[fine_index[(x, y)]][0] for x, y in locs]
            a, b = macro.nodes[na][0], macro.nodes[nb][0]
        for (key, c) in zip(locs, coords):
            s = (c - a) / (b - a)
            ties.append((fine_index[key], coarse_remap[na], coarse_remap[nb], float(s)))

    for j in range(ky):
        for i in range(kx):
            if not critical[j, i]:
                continue
            for side, (di, dj) in (("left", (-1, 0)), ("right", (1, 0)),
                                   ("bottom", (0, -1)), ("top", (0, 1))):
                ni, nj = i + di, j + dj
                if 0 <= ni < kx and 0 <= nj < ky and not critical[nj, ni]:
                    tie_edge(i, j, side)

    # deduplicate (shared fine corners get an equivalent tie from both edges)
    uniq = {}
    for rec in ties:
        if rec[0] not in uniq:
            uniq[rec[0]] = rec
    return out, list(uniq.values())


def add_top_strip(mesh, thickness, tag=LAYER):
    """Append one element row of a stiff layer along the full top edge.

    The strip reuses the x-positions of the existing top-edge nodes, so the
    result is conforming whatever mix of fine and coarse columns lies below.
    """
    y_top = mesh.nodes[:, 1].max()
    top_ids = np.where(np.abs(mesh.nodes[:, 1] - y_top) < 1e-9 * max(1.0, y_top))[0]
    order = np.argsort(mesh.nodes[top_ids, 0])
    top_ids = top_ids[order]
    xs = mesh.nodes[top_ids, 0]
    if np.any(np.diff(xs) <= 0):
        raise InvalidSpecError("top edge is not a single chain of nodes")
    n0 = mesh.n_nodes
    new_nodes = np.column_stack([xs, np.full(xs.shape, y_top + thickness)])
    strip_elems = np.column_stack([
        top_ids[:-1], top_ids[1:],
        n0 + np.arange(1, xs.size), n0 + np.arange(0, xs.size - 1),
    ]).astype(np.int64)
    nodes = np.vstack([mesh.nodes, new_nodes])
    elems = np.vstack([mesh.elems, strip_elems])
    region = np.concatenate([mesh.region, np.full(strip_elems.shape[0], tag, dtype=object)])
    L, H = mesh.dims
    return Mesh(nodes, elems, region, (L, H + thickness), origin=mesh.origin)


def nodes_on_line(mesh, axis, value, tol=1e-9):
    """Node ids with coordinate `axis` equal to `value` (absolute tol in um)."""
    return np.where(np.abs(mesh.nodes[:, axis] - value) <= tol * max(1.0, abs(value)))[0]


def node_nearest(mesh, xy):
    d = np.linalg.norm(mesh.nodes - np.asarray(xy), axis=1)
    return int(np.argmin(d))


def corner_jacobians(mesh):
    """Minimum corner Jacobian of every element (positively oriented quads)."""
    x = mesh.nodes[mesh.elems]
    mins = np.full(mesh.n_elems, np.inf)
    for a in range(4):
        va = x[:, (a + 1) % 4] - x[:, a]
        vb = x[:, (a - 1) % 4] - x[:, a]
        cross = va[:, 0] * vb[:, 1] - va[:, 1] * vb[:, 0]
        mins = np.minimum(mins, cross)
    return mins


_REGION_CODE = {MATRIX: 0, FIBER: 1, LAYER: 2, MACRO: 3, DB: 4}


def write_vtk(path, mesh, point_vectors=None, cell_scalars=None):
    """Legacy-ASCII VTK unstructured grid with the region tag as cell data."""
    lines = ["# vtk DataFile Version 3.0", "microstab mesh", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_nodes} double"]
    for x, y in mesh.nodes:
        lines.append(f"{x:.9g} {y:.9g} 0")
    lines.append(f"CELLS {mesh.n_elems} {5 * mesh.n_elems}")
    for e in mesh.elems:
        lines.append("4 " + " ".join(str(int(a)) for a in e))
    lines.append(f"CELL_TYPES {mesh.n_elems}")
    lines.extend(["9"] * mesh.n_elems)
    if point_vectors:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, arr in point_vectors.items():
            lines.append(f"VECTORS {name} double")
            for vx, vy in np.asarray(arr).reshape(-1, 2):
                lines.append(f"{vx:.9g} {vy:.9g} 0")
    lines.append(f"CELL_DATA {mesh.n_elems}")
    lines.append("SCALARS region int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(_REGION_CODE.get(r, 9)) for r in mesh.region)
    if cell_scalars:
        for name, arr in cell_scalars.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.9g}" for v in np.asarray(arr))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
