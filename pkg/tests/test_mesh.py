import numpy as np
import pytest

from microstab.errors import InvalidSpecError, ResolutionError
from microstab.mesh import (
    DB,
    FIBER,
    MATRIX,
    UnitCellSpec,
    add_top_strip,
    build_layered_cell,
    build_macro_mesh,
    build_staggered_cell,
    cells_in_boxes,
    corner_jacobians,
    element_cells,
    embed_fine_region,
    macro_grid_shape,
    nodes_on_line,
    tile,
    write_vtk,
)

CANTILEVER_CELL = UnitCellSpec("layered", L=30.0, H=10.0, H_f=0.25, nx=12, ny_fiber=2, ny_matrix=3)
BEAM_CELL = UnitCellSpec("staggered", L=400.0, L_f=280.0, H_f=5.6, V_f=0.12,
                         nx=16, ny_fiber=2, ny_matrix=2)


def test_layered_cell_geometry_and_fraction():
    mesh, pairing = build_layered_cell(CANTILEVER_CELL)
    assert mesh.dims == (30.0, 10.0)
    # paper-declared 2.5% fiber fraction, exact for this strip layout
    assert mesh.volume_fraction(FIBER) == pytest.approx(0.025, abs=1e-12)
    areas = mesh.element_areas()
    assert areas.sum() == pytest.approx(300.0, rel=1e-12)
    assert np.all(corner_jacobians(mesh) > 0)
    pairing.validate(mesh)


def test_layered_cell_resolution_guard():
    with pytest.raises(ResolutionError):
        build_layered_cell(UnitCellSpec("layered", L=30.0, H=10.0, H_f=0.25, ny_fiber=1))


def test_layered_pairing_matches_heights():
    mesh, pairing = build_layered_cell(CANTILEVER_CELL)
    for (p, m), vi in zip(pairing.pairs, pairing.vector_index):
        d = mesh.nodes[p] - mesh.nodes[m]
        assert np.allclose(d, pairing.vectors[vi], atol=1e-12)
    # involution-free and unique plus nodes
    assert not np.any(pairing.pairs[:, 0] == pairing.pairs[:, 1])


def test_staggered_cell_height_formula_and_fraction():
    mesh, pairing = build_staggered_cell(BEAM_CELL)
    H = 2.0 * 280.0 * 5.6 / (400.0 * 0.12)
    assert mesh.dims[1] == pytest.approx(H, rel=1e-12)
    assert H == pytest.approx(65.3333333, rel=1e-6)
    assert mesh.volume_fraction(FIBER) == pytest.approx(0.12, abs=0.01)
    assert np.all(corner_jacobians(mesh) > 0)
    pairing.validate(mesh)


def test_staggered_cell_degenerate_fraction():
    with pytest.raises(InvalidSpecError):
        build_staggered_cell(UnitCellSpec("staggered", L=400.0, L_f=280.0, H_f=5.6, V_f=0.001))


def test_staggered_rotated_cell():
    spec = UnitCellSpec("staggered", L=400.0, L_f=280.0, H_f=5.6, V_f=0.07,
                        nx=16, ny_fiber=2, ny_matrix=2, orientation="y")
    mesh, pairing = build_staggered_cell(spec)
    assert mesh.dims[0] == pytest.approx(112.0, rel=1e-9)
    assert mesh.dims[1] == pytest.approx(400.0, rel=1e-12)
    assert mesh.volume_fraction(FIBER) == pytest.approx(0.07, abs=0.01)
    pairing.validate(mesh)


def test_tile_identity_and_counts():
    mesh, _ = build_layered_cell(CANTILEVER_CELL)
    t1, p1 = tile(mesh, 1, 1)
    assert t1.n_nodes == mesh.n_nodes
    assert np.allclose(t1.nodes, mesh.nodes)
    assert np.all(t1.elems == mesh.elems)
    p1.validate(t1)

    t2, p2 = tile(mesh, 2, 1)
    xs, ys = mesh.grid
    shared = len(ys)
    assert t2.n_nodes == 2 * mesh.n_nodes - shared
    assert t2.n_elems == 2 * mesh.n_elems
    p2.validate(t2)

    for k in (1, 2, 3):
        tk, _ = tile(mesh, k, k)
        assert tk.n_elems == k * k * mesh.n_elems
        assert tk.volume_fraction(FIBER) == pytest.approx(mesh.volume_fraction(FIBER), rel=1e-12)


def test_macro_mesh_counts():
    cell = (30.0, 10.0)
    macro = build_macro_mesh((240.0, 40.0), cell)
    assert macro.n_elems == 32
    assert macro_grid_shape(macro) == (8, 4)
    m2 = build_macro_mesh((6400.0, 14 * (2 * 280.0 * 5.6 / (400.0 * 0.12)) / 14.0 * 14), (400.0, 2 * 280.0 * 5.6 / (400.0 * 0.12)))
    assert macro_grid_shape(m2) == (16, 14)
    single = build_macro_mesh(cell, cell)
    assert single.n_elems == 1
    with pytest.raises(InvalidSpecError):
        build_macro_mesh((241.5, 40.0), cell)


def test_element_cells_indexing():
    mesh, _ = build_layered_cell(CANTILEVER_CELL)
    tiled, _ = tile(mesh, 3, 2)
    cells = element_cells(tiled, (30.0, 10.0))
    assert cells.min() == 0
    assert cells[:, 0].max() == 2
    assert cells[:, 1].max() == 1
    counts = {}
    for ij in map(tuple, cells):
        counts[ij] = counts.get(ij, 0) + 1
    assert all(v == mesh.n_elems for v in counts.values())


def test_embed_empty_region_is_macro():
    macro = build_macro_mesh((120.0, 20.0), (30.0, 10.0))
    cell, _ = build_layered_cell(CANTILEVER_CELL)
    comp, ties = embed_fine_region(macro, [], cell)
    assert comp.n_nodes == macro.n_nodes
    assert comp.n_elems == macro.n_elems
    assert np.all(comp.region == DB)
    assert ties == []


def test_embed_whole_domain_matches_dns():
    macro = build_macro_mesh((120.0, 20.0), (30.0, 10.0))
    cell, _ = build_layered_cell(CANTILEVER_CELL)
    comp, ties = embed_fine_region(macro, [(0.0, 0.0, 120.0, 20.0)], cell)
    dns, _ = tile(cell, 4, 2)
    assert comp.n_nodes == dns.n_nodes
    assert comp.n_elems == dns.n_elems
    assert ties == []
    # same node sets and fiber fraction
    a = np.asarray(sorted(map(tuple, np.round(comp.nodes, 9))))
    b = np.asarray(sorted(map(tuple, np.round(dns.nodes, 9))))
    assert np.allclose(a, b, atol=1e-9)
    assert comp.volume_fraction(FIBER) == pytest.approx(dns.volume_fraction(FIBER), rel=1e-12)


def test_embed_interface_ties_on_edges():
    macro = build_macro_mesh((120.0, 20.0), (30.0, 10.0))
    cell, _ = build_layered_cell(CANTILEVER_CELL)
    boxes = [(30.0, 0.0, 60.0, 10.0)]
    comp, ties = embed_fine_region(macro, boxes, cell)
    assert comp.n_elems == (8 - 1) + cell.n_elems
    assert len(ties) > 0
    for fn, na, nb, s in ties:
        assert -1e-12 <= s <= 1 + 1e-12
        xf = comp.nodes[fn]
        xa, xb = comp.nodes[na], comp.nodes[nb]
        # fine node must sit on the coarse edge at parameter s
        assert np.linalg.norm(xf - ((1 - s) * xa + s * xb)) < 1e-9
        assert comp.region[0] == DB


def test_cells_in_boxes_alignment_guard():
    macro = build_macro_mesh((120.0, 20.0), (30.0, 10.0))
    with pytest.raises(InvalidSpecError):
        cells_in_boxes(macro, [(5.0, 0.0, 60.0, 10.0)])
    crit = cells_in_boxes(macro, [(30.0, 10.0, 90.0, 20.0)])
    assert crit.sum() == 2
    assert crit[1, 1] and crit[1, 2]


def test_add_top_strip_conforms():
    macro = build_macro_mesh((120.0, 20.0), (30.0, 10.0))
    out = add_top_strip(macro, 0.5)
    assert out.n_elems == macro.n_elems + 4
    assert out.dims[1] == pytest.approx(20.5)
    assert np.all(corner_jacobians(out) > 0)
    top = nodes_on_line(out, 1, 20.5)
    assert top.size == 5


def test_vtk_roundtrip_smoke(tmp_path):
    mesh, _ = build_layered_cell(CANTILEVER_CELL)
    path = tmp_path / "cell.vtk"
    write_vtk(path, mesh, point_vectors={"disp": np.zeros((mesh.n_nodes, 2))},
              cell_scalars={"detF": np.ones(mesh.n_elems)})
    text = path.read_text()
    assert text.startswith("# vtk DataFile")
    assert f"POINTS {mesh.n_nodes} double" in text
    assert "SCALARS region int 1" in text
    assert "VECTORS disp double" in text
