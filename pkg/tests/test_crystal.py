import json

import numpy as np
import pytest

from xastruct.crystal import (
    CrystalStructure,
    Element,
    InvalidStructureError,
    Lattice,
    NoNeighborsError,
    Site,
    build_graph,
    extract_descriptors,
    first_shell,
    load_structure,
    load_structures,
    neighbor_list,
    save_structure,
    structure_from_dict,
    structure_to_dict,
)

from conftest import brute_force_neighbors, cubic_structure, random_structure, rocksalt_structure


def as_set(neighbors):
    return {(nb[0], tuple(nb[1]), round(nb[2], 9)) for nb in neighbors}


class TestElement:
    def test_symbol_from_z(self):
        assert Element(29).symbol == "Cu"
        assert Element.from_symbol("O").atomic_number == 8

    def test_bad_inputs(self):
        with pytest.raises(InvalidStructureError):
            Element(0)
        with pytest.raises(InvalidStructureError):
            Element(119)
        with pytest.raises(InvalidStructureError):
            Element.from_symbol("Xx")
        with pytest.raises(InvalidStructureError):
            Element(29, "O")


class TestStructureValidation:
    def test_degenerate_lattice_rejected(self):
        with pytest.raises(InvalidStructureError):
            Lattice(np.zeros((3, 3)))
        # left-handed cell has negative determinant
        with pytest.raises(InvalidStructureError):
            Lattice(np.diag([-3.0, 3.0, 3.0]))

    def test_site_wrapping(self):
        site = Site(Element(29), np.array([1.25, -0.25, 0.5]))
        assert np.allclose(site.frac_coords, [0.25, 0.75, 0.5])

    def test_too_close_sites_rejected(self):
        el = Element(29)
        with pytest.raises(InvalidStructureError):
            CrystalStructure(
                lattice=Lattice(np.eye(3) * 4.0),
                sites=(Site(el, np.zeros(3)), Site(el, np.array([0.05, 0.0, 0.0]))),
            )

    def test_empty_structure_rejected(self):
        with pytest.raises(InvalidStructureError):
            CrystalStructure(lattice=Lattice(np.eye(3) * 3.0), sites=())


class TestNeighborList:
    def test_simple_cubic_first_shell(self):
        s = cubic_structure(a=3.0)
        nbs = neighbor_list(s, 0, 3.5)
        assert len(nbs) == 6
        assert all(abs(nb.distance - 3.0) < 1e-12 for nb in nbs)
        assert as_set(nbs) == as_set(brute_force_neighbors(s, 0, 3.5, image_bound=2))

    def test_tiny_cutoff_gives_empty_list(self):
        s = cubic_structure(a=3.0)
        assert neighbor_list(s, 0, 0.1) == []

    def test_rocksalt_first_shell(self):
        s = rocksalt_structure(a=5.64)
        nbs = neighbor_list(s, 0, 3.0)
        assert len(nbs) == 6
        assert all(nb.index == 1 for nb in nbs)
        assert all(abs(nb.distance - 2.82) < 1e-9 for nb in nbs)
        assert as_set(nbs) == as_set(brute_force_neighbors(s, 0, 3.0))

    def test_matches_brute_force_on_random_structures(self, rng):
        for _ in range(25):
            s = random_structure(rng)
            center = int(rng.integers(0, len(s)))
            cutoff = float(rng.uniform(2.0, 8.0))
            got = as_set(neighbor_list(s, center, cutoff))
            want = as_set(brute_force_neighbors(s, center, cutoff))
            assert got == want

    def test_translation_invariance(self, rng):
        s = random_structure(rng, max_sites=4)
        shift = rng.uniform(0, 1, size=3)
        shifted = CrystalStructure(
            lattice=s.lattice,
            sites=tuple(Site(site.element, site.frac_coords + shift) for site in s.sites),
            id=s.id,
        )
        a = neighbor_list(s, 0, 5.0)
        b = neighbor_list(shifted, 0, 5.0)
        assert sorted(round(nb.distance, 9) for nb in a) == sorted(
            round(nb.distance, 9) for nb in b
        )

    def test_bad_arguments(self):
        s = cubic_structure()
        with pytest.raises(ValueError):
            neighbor_list(s, 0, -1.0)
        with pytest.raises(ValueError):
            neighbor_list(s, 5, 3.0)


class TestFirstShell:
    def test_tolerance_keeps_near_minimum(self):
        nbs = neighbor_list(cubic_structure(a=2.0), 0, 3.0)
        # fake distances: craft a list manually
        from xastruct.crystal import Neighbor

        lst = [
            Neighbor(0, (0, 0, 0), 2.9),
            Neighbor(1, (0, 0, 0), 2.0),
            Neighbor(2, (0, 0, 0), 2.05),
        ]
        shell = first_shell(lst, tol_factor=1.1)
        assert [nb.distance for nb in shell] == [2.0, 2.05]

    def test_singleton(self):
        from xastruct.crystal import Neighbor

        assert first_shell([Neighbor(0, (0, 0, 0), 2.0)], 1.0)[0].distance == 2.0

    def test_simple_cubic_all_six(self):
        nbs = neighbor_list(cubic_structure(a=3.0), 0, 5.0)
        assert len(first_shell(nbs, 1.1)) == 6

    def test_tol_factor_one_takes_minimum_only(self, rng):
        s = random_structure(rng)
        nbs = neighbor_list(s, 0, 6.0)
        if not nbs:
            pytest.skip("no neighbors drawn")
        shell = first_shell(nbs, 1.0)
        dmin = min(nb.distance for nb in nbs)
        assert all(nb.distance == dmin for nb in shell)

    def test_empty_input_raises(self):
        with pytest.raises(NoNeighborsError):
            first_shell([], 1.1)


class TestBuildGraph:
    def test_single_atom_cubic(self):
        g = build_graph(cubic_structure(a=3.0), 0, 3.5)
        assert len(g.node_elements) == 1
        assert len(g.edges) == 6
        assert g.mask.tolist() == [1.0]
        assert all(e.i == 0 and e.j == 0 for e in g.edges)

    def test_no_edges_below_cutoff(self):
        g = build_graph(cubic_structure(a=3.0), 0, 1.0)
        assert g.edges == ()
        assert g.mask.tolist() == [1.0]

    def test_rocksalt_mask_covers_both_sites(self):
        g = build_graph(rocksalt_structure(), 0, 3.0)
        assert g.mask.tolist() == [1.0, 1.0]

    def test_edges_symmetric_as_set(self, rng):
        s = random_structure(rng, max_sites=5)
        g = build_graph(s, 0, 5.0)
        records = {(e.i, e.j, round(e.distance, 9), e.offset) for e in g.edges}
        for i, j, d, t in records:
            assert (j, i, d, tuple(-c for c in t)) in records

    def test_relabeling_preserves_edge_distances(self, rng):
        s = random_structure(rng, max_sites=6)
        perm = rng.permutation(len(s))
        permuted = CrystalStructure(
            lattice=s.lattice,
            sites=tuple(s.sites[p] for p in perm),
            id=s.id,
        )
        absorber = 0
        new_absorber = int(np.nonzero(perm == absorber)[0][0])
        g0 = build_graph(s, absorber, 5.0)
        g1 = build_graph(permuted, new_absorber, 5.0)
        d0 = sorted(round(e.distance, 9) for e in g0.edges)
        d1 = sorted(round(e.distance, 9) for e in g1.edges)
        assert d0 == d1
        assert int(g0.mask.sum()) == int(g1.mask.sum())


class TestExtractDescriptors:
    def test_simple_cubic(self):
        labels = extract_descriptors(cubic_structure(a=3.0, symbol="Cu"), 0)
        assert labels.cn == 6
        assert abs(labels.mnnd - 3.0) < 1e-12
        assert labels.neighbor_type == Element.from_symbol("Cu")

    def test_rocksalt(self):
        labels = extract_descriptors(rocksalt_structure(a=5.64), 0)
        assert labels.cn == 6
        assert abs(labels.mnnd - 2.82) < 1e-9
        assert labels.neighbor_type == Element.from_symbol("Cl")

    def test_equal_distances_mean_is_exact(self):
        labels = extract_descriptors(cubic_structure(a=2.75), 0)
        assert labels.mnnd == labels.shell_distances[0]

    def test_isolated_atom_raises(self):
        s = cubic_structure(a=9.0)
        with pytest.raises(NoNeighborsError):
            extract_descriptors(s, 0, cutoff=6.0)

    def test_translation_leaves_labels_unchanged(self, rng):
        s = random_structure(rng, max_sites=5)
        shift = rng.uniform(0, 1, size=3)
        shifted = CrystalStructure(
            lattice=s.lattice,
            sites=tuple(Site(site.element, site.frac_coords + shift) for site in s.sites),
            id=s.id,
        )
        try:
            a = extract_descriptors(s, 0)
        except NoNeighborsError:
            pytest.skip("isolated center drawn")
        b = extract_descriptors(shifted, 0)
        assert a.cn == b.cn
        assert abs(a.mnnd - b.mnnd) < 1e-9
        assert a.neighbor_type == b.neighbor_type

    def test_neighbor_type_tie_breaks_to_lowest_z(self):
        # center atom with one O and one C neighbor at the same distance
        a = 6.0
        s = CrystalStructure(
            lattice=Lattice(np.eye(3) * a),
            sites=(
                Site(Element.from_symbol("Cu"), np.array([0.5, 0.5, 0.5])),
                Site(Element.from_symbol("O"), np.array([0.5 + 2.0 / a, 0.5, 0.5])),
                Site(Element.from_symbol("C"), np.array([0.5 - 2.0 / a, 0.5, 0.5])),
            ),
        )
        labels = extract_descriptors(s, 0)
        assert labels.cn == 2
        assert labels.neighbor_type == Element.from_symbol("C")


class TestJsonInterchange:
    def test_round_trip(self, tmp_path, rng):
        s = random_structure(rng, max_sites=4, sid="round-trip")
        path = tmp_path / "s.json"
        save_structure(s, path)
        loaded = load_structure(path)
        assert loaded.id == "round-trip"
        assert np.allclose(loaded.lattice.basis, s.lattice.basis)
        assert np.allclose(loaded.frac_coords(), s.frac_coords())
        assert [x.element.symbol for x in loaded.sites] == [x.element.symbol for x in s.sites]

    def test_jsonl_stream(self, tmp_path):
        rows = [structure_to_dict(cubic_structure(a=3.0, sid=f"s{i}")) for i in range(3)]
        path = tmp_path / "stream.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        structures = load_structures(path)
        assert [s.id for s in structures] == ["s0", "s1", "s2"]

    def test_malformed_record(self):
        with pytest.raises(InvalidStructureError):
            structure_from_dict({"lattice": [1, 0, 0]})
