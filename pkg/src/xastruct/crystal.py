"""Periodic crystal structures, cutoff neighbor lists, and structural descriptors.

Conventions: lattice rows are lattice vectors in angstroms, fractional
coordinates live in [0, 1), and cartesian positions are ``frac @ basis``.
Neighbor searches enumerate periodic images exhaustively inside a bound
derived from the perpendicular cell heights; correctness over cleverness.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

MIN_SITE_SEPARATION = 0.5  # angstrom; guards the 1/R^2 terms downstream

_SYMBOLS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)
_Z_BY_SYMBOL = {s: z + 1 for z, s in enumerate(_SYMBOLS)}


class InvalidStructureError(ValueError):
    """Raised for degenerate lattices, overlapping sites, or malformed input."""


class NoNeighborsError(ValueError):
    """Raised when a neighbor shell is requested but no neighbors exist."""


@dataclass(frozen=True, order=True)
class Element:
    """A chemical element identified by atomic number."""

    atomic_number: int
    symbol: str = field(compare=False, default="")

    def __post_init__(self):
        if not 1 <= self.atomic_number <= 118:
            raise InvalidStructureError(f"atomic number out of range: {self.atomic_number}")
        expected = _SYMBOLS[self.atomic_number - 1]
        if self.symbol == "":
            object.__setattr__(self, "symbol", expected)
        elif self.symbol != expected:
            raise InvalidStructureError(
                f"symbol {self.symbol!r} does not match Z={self.atomic_number}"
            )

    @classmethod
    def from_symbol(cls, symbol: str) -> "Element":
        try:
            return cls(_Z_BY_SYMBOL[symbol])
        except KeyError:
            raise InvalidStructureError(f"unknown element symbol: {symbol!r}") from None


@dataclass(frozen=True, eq=False)
class Lattice:
    """Periodic cell: rows of ``basis`` are lattice vectors in angstroms."""

    basis: np.ndarray

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        if basis.shape != (3, 3):
            raise InvalidStructureError(f"lattice basis must be 3x3, got {basis.shape}")
        if not np.all(np.isfinite(basis)):
            raise InvalidStructureError("lattice basis contains non-finite entries")
        if np.linalg.det(basis) <= 0:
            raise InvalidStructureError("lattice determinant must be strictly positive")
        object.__setattr__(self, "basis", basis)

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.basis))

    def heights(self) -> np.ndarray:
        """Perpendicular cell heights: distance between opposite cell faces.

        height_i = volume / |a_j x a_k|; bounds the periodic-image search.
        """
        a = self.basis
        cross = np.stack([np.cross(a[1], a[2]), np.cross(a[2], a[0]), np.cross(a[0], a[1])])
        return self.volume / np.linalg.norm(cross, axis=1)

    def to_cart(self, frac: np.ndarray) -> np.ndarray:
        return np.asarray(frac, dtype=float) @ self.basis


@dataclass(frozen=True, eq=False)
class Site:
    """An atom at fractional coordinates, wrapped into [0, 1)."""

    element: Element
    frac_coords: np.ndarray

    def __post_init__(self):
        frac = np.asarray(self.frac_coords, dtype=float)
        if frac.shape != (3,) or not np.all(np.isfinite(frac)):
            raise InvalidStructureError("site coordinates must be a finite 3-vector")
        object.__setattr__(self, "frac_coords", frac - np.floor(frac))


@dataclass(frozen=True, eq=False)
class CrystalStructure:
    """A periodic lattice plus an ordered list of sites."""

    lattice: Lattice
    sites: tuple
    id: str = ""

    def __post_init__(self):
        sites = tuple(self.sites)
        if len(sites) == 0:
            raise InvalidStructureError("structure needs at least one site")
        object.__setattr__(self, "sites", sites)
        dmin = self._min_pair_distance()
        if dmin is not None and dmin < MIN_SITE_SEPARATION:
            raise InvalidStructureError(
                f"sites closer than {MIN_SITE_SEPARATION} A under PBC: {dmin:.3f} A"
            )

    def _min_pair_distance(self):
        n = len(self.sites)
        if n < 2:
            return None
        frac = self.frac_coords()
        diff = frac[:, None, :] - frac[None, :, :]
        diff -= np.round(diff)  # minimum image in fractional space
        best = np.inf
        # nearby images cover skewed cells where rounding alone is not minimal
        for shift in np.ndindex(3, 3, 3):
            t = np.array(shift) - 1
            cart = (diff + t) @ self.lattice.basis
            d = np.linalg.norm(cart, axis=-1)
            d[np.eye(n, dtype=bool)] = np.inf
            best = min(best, float(d.min()))
        return best

    def frac_coords(self) -> np.ndarray:
        return np.array([s.frac_coords for s in self.sites])

    def cart_coords(self) -> np.ndarray:
        return self.lattice.to_cart(self.frac_coords())

    def __len__(self) -> int:
        return len(self.sites)


class Neighbor(NamedTuple):
    index: int
    offset: tuple
    distance: float


class GraphEdge(NamedTuple):
    i: int
    j: int
    distance: float
    offset: tuple


@dataclass(frozen=True, eq=False)
class StructureGraph:
    """Distance-cutoff graph over a structure's sites with periodic images.

    ``mask`` is 1 on the absorber and its first-shell neighbors, 0 elsewhere.
    """

    node_elements: tuple
    node_cart: np.ndarray
    edges: tuple
    absorber_index: int
    mask: np.ndarray


@dataclass(frozen=True)
class DescriptorLabels:
    """Ground-truth local-environment descriptors of one absorbing site."""

    cn: int
    mnnd: float
    neighbor_type: Element
    shell_distances: tuple

    def __post_init__(self):
        dists = tuple(float(d) for d in self.shell_distances)
        object.__setattr__(self, "shell_distances", dists)
        if self.cn != len(dists) or self.cn < 1:
            raise ValueError("cn must equal the number of shell distances")
        if self.mnnd <= 0 or abs(self.mnnd - sum(dists) / len(dists)) > 1e-9:
            raise ValueError("mnnd must be the mean of the shell distances")


def neighbor_list(s: CrystalStructure, center: int, cutoff: float) -> list:
    """All (site, periodic image) pairs within ``cutoff`` of site ``center``.

    The self-image at zero offset is excluded. Sorted by (distance, index,
    offset) so output order is deterministic.
    """
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    if not 0 <= center < len(s):
        raise ValueError(f"center index {center} out of range")

    # |T_i| <= ceil(cutoff / height_i) + 1 covers all images: fractional
    # site differences lie in (-1, 1) and |delta_i| <= cutoff / height_i.
    bounds = [int(math.ceil(cutoff / h)) + 1 for h in s.lattice.heights()]
    axes = [np.arange(-b, b + 1) for b in bounds]
    offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    frac = s.frac_coords()
    disp_frac = frac[None, :, :] + offsets[:, None, :] - frac[center]  # [T, N, 3]
    dists = np.linalg.norm(disp_frac @ s.lattice.basis, axis=-1)

    t_idx, site_idx = np.nonzero((dists <= cutoff) & (dists > 0))
    out = [
        Neighbor(int(j), tuple(int(c) for c in offsets[t]), float(dists[t, j]))
        for t, j in zip(t_idx, site_idx)
    ]
    out.sort(key=lambda nb: (nb.distance, nb.index, nb.offset))
    return out


def first_shell(neighbors: Sequence[Neighbor], tol_factor: float = 1.1) -> list:
    """Neighbors with distance <= tol_factor * d_min, ascending by distance."""
    if not neighbors:
        raise NoNeighborsError("cannot take the first shell of an empty neighbor list")
    if tol_factor < 1:
        raise ValueError(f"tol_factor must be >= 1, got {tol_factor}")
    ordered = sorted(neighbors, key=lambda nb: (nb.distance, nb.index, nb.offset))
    d_min = ordered[0].distance
    return [nb for nb in ordered if nb.distance <= tol_factor * d_min]


def build_graph(
    s: CrystalStructure,
    absorber: int,
    cutoff: float,
    tol_factor: float = 1.1,
) -> StructureGraph:
    """Cutoff graph with one node per site and per-image directed edge records."""
    if not 0 <= absorber < len(s):
        raise ValueError(f"absorber index {absorber} out of range")

    edges = []
    per_site = []
    for i in range(len(s)):
        nbs = neighbor_list(s, i, cutoff)
        per_site.append(nbs)
        edges.extend(GraphEdge(i, nb.index, nb.distance, nb.offset) for nb in nbs)
    edges.sort(key=lambda e: (e.i, e.j, e.offset))

    mask = np.zeros(len(s), dtype=float)
    mask[absorber] = 1.0
    if per_site[absorber]:
        for nb in first_shell(per_site[absorber], tol_factor):
            mask[nb.index] = 1.0

    return StructureGraph(
        node_elements=tuple(site.element for site in s.sites),
        node_cart=s.cart_coords(),
        edges=tuple(edges),
        absorber_index=absorber,
        mask=mask,
    )


def extract_descriptors(
    s: CrystalStructure,
    absorber: int,
    tol_factor: float = 1.1,
    cutoff: float = 6.0,
) -> DescriptorLabels:
    """First-shell CN, mean distance, and dominant neighbor species.

    Ties in the species count break toward the lowest atomic number so the
    label always collapses to a single class.
    """
    nbs = neighbor_list(s, absorber, cutoff)
    if not nbs:
        raise NoNeighborsError(
            f"site {absorber} has no neighbors within {cutoff} A"
        )
    shell = first_shell(nbs, tol_factor)
    distances = tuple(nb.distance for nb in shell)
    counts = Counter(s.sites[nb.index].element for nb in shell)
    dominant = min(counts, key=lambda el: (-counts[el], el.atomic_number))
    return DescriptorLabels(
        cn=len(shell),
        mnnd=sum(distances) / len(distances),
        neighbor_type=dominant,
        shell_distances=distances,
    )


# ---------------------------------------------------------------------------
# JSON interchange: {"id", "lattice": [9 row-major reals], "sites": [...]}


def structure_to_dict(s: CrystalStructure) -> dict:
    return {
        "id": s.id,
        "lattice": [float(x) for x in s.lattice.basis.reshape(9)],
        "sites": [
            {"element": site.element.symbol, "frac": [float(c) for c in site.frac_coords]}
            for site in s.sites
        ],
    }


def structure_from_dict(d: dict) -> CrystalStructure:
    try:
        lattice = Lattice(np.array(d["lattice"], dtype=float).reshape(3, 3))
        sites = tuple(
            Site(Element.from_symbol(rec["element"]), np.array(rec["frac"], dtype=float))
            for rec in d["sites"]
        )
        return CrystalStructure(lattice=lattice, sites=sites, id=str(d.get("id", "")))
    except InvalidStructureError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidStructureError(f"malformed structure record: {exc}") from exc


def save_structure(s: CrystalStructure, path) -> None:
    with open(path, "w") as fh:
        json.dump(structure_to_dict(s), fh, sort_keys=True)
        fh.write("\n")


def load_structure(path) -> CrystalStructure:
    with open(path) as fh:
        return structure_from_dict(json.load(fh))


def load_structures(path) -> list:
    """Read one structure per line (JSON-lines) or a single JSON document."""
    with open(path) as fh:
        text = fh.read()
    stripped = text.strip()
    if not stripped:
        return []
    try:
        doc = json.loads(stripped)
        records = doc if isinstance(doc, list) else [doc]
    except json.JSONDecodeError:
        records = [json.loads(line) for line in stripped.splitlines() if line.strip()]
    return [structure_from_dict(rec) for rec in records]
