"""Voronoi-cell matching of fitted mixture components to true atoms, and the
parameter-space losses whose exponents encode the estimation rates.

Fitted components are assigned to the nearest true atom in Euclidean
distance over the stacked (W, a, b, nu) vector (gate biases excluded).  The
exact-specified loss charges singleton cells with first-power parameter
errors; the over-specified loss raises the exponents on multi-member cells
according to the polynomial-solvability order of the cell size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gmoe import MixingMeasure


class MissingRBarEntryError(ValueError):
    """The polynomial-system order for this cell size is not known.

    Orders are known only for sizes 2 and 3; larger sizes must be supplied
    by the caller through the table.
    """

    def __init__(self, m: int):
        self.m = m
        super().__init__(
            f"no polynomial-system order registered for cell size m={m}; "
            f"known sizes are 2 and 3, larger ones must be added to the table"
        )


@dataclass
class RBarTable:
    """Map from multi-cell size m to the exponent-driving order r_bar(m)."""

    entries: dict = field(default_factory=lambda: {2: 4, 3: 6})

    def __post_init__(self):
        for m, r in self.entries.items():
            if m < 2 or r < 1:
                raise ValueError(f"invalid table entry {m} -> {r}")

    def value(self, m: int) -> int:
        if m not in self.entries:
            raise MissingRBarEntryError(m)
        return self.entries[m]


DEFAULT_RBAR = RBarTable()


def component_vectors(G: MixingMeasure) -> np.ndarray:
    """Stacked (W, a, b, nu) rows used for nearest-atom assignment."""
    return np.hstack([G.W, G.a, G.b[:, None], G.nu[:, None]])


@dataclass
class VoronoiCells:
    """Partition of fitted-component indices by nearest true atom."""

    cells: list  # k_star lists of fitted indices

    def sizes(self) -> list:
        return [len(c) for c in self.cells]


def assign_cells(G: MixingMeasure, G_star: MixingMeasure) -> VoronoiCells:
    """Each fitted component joins the nearest true atom; ties go low."""
    if G.d != G_star.d:
        raise ValueError(f"dimension mismatch: {G.d} vs {G_star.d}")
    fitted = component_vectors(G)
    atoms = component_vectors(G_star)
    cells = [[] for _ in range(G_star.k)]
    for i in range(G.k):
        dists = np.linalg.norm(atoms - fitted[i], axis=1)
        cells[int(np.argmin(dists))].append(i)  # argmin returns the lowest tied index
    return VoronoiCells(cells=cells)


def phi(theta_i, theta_j_star, rho) -> float:
    """||dW||^r1 + ||da||^r2 + |db|^r3 + |dnu|^r4 between two atoms.

    Atoms are (beta, W, a, b, nu) tuples as produced by MixingMeasure.atom;
    the gate bias entry is ignored here (it enters the losses via exp(beta)).
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (4,) or np.any(rho <= 0.0):
        raise ValueError("rho must be 4 positive exponents")
    _, W_i, a_i, b_i, nu_i = theta_i
    _, W_j, a_j, b_j, nu_j = theta_j_star
    return float(
        np.linalg.norm(W_i - W_j) ** rho[0]
        + np.linalg.norm(a_i - a_j) ** rho[1]
        + abs(b_i - b_j) ** rho[2]
        + abs(nu_i - nu_j) ** rho[3]
    )


def _mass_mismatch(G, G_star, cells) -> float:
    total = 0.0
    for j, cell in enumerate(cells.cells):
        total += abs(sum(np.exp(G.beta[i]) for i in cell) - np.exp(G_star.beta[j]))
    return total


def loss_d1(G: MixingMeasure, G_star: MixingMeasure) -> float:
    """Exact-specified Voronoi loss: mass mismatch plus first-power errors
    on singleton cells, each weighted by the fitted component's gate mass."""
    cells = assign_cells(G, G_star)
    total = _mass_mismatch(G, G_star, cells)
    for j, cell in enumerate(cells.cells):
        if len(cell) != 1:
            continue
        for i in cell:
            total += np.exp(G.beta[i]) * phi(G.atom(i), G_star.atom(j), (1, 1, 1, 1))
    return float(total)


def loss_d2(G: MixingMeasure, G_star: MixingMeasure,
            table: RBarTable = DEFAULT_RBAR) -> float:
    """Over-specified Voronoi loss.

    Singleton cells use exponents (1,1,1,1); a cell of size m > 1 uses
    (2, 2, r_bar(m), r_bar(m)/2).  Raises MissingRBarEntryError when the
    table has no order for some occupied multi-cell size.
    """
    cells = assign_cells(G, G_star)
    total = _mass_mismatch(G, G_star, cells)
    for j, cell in enumerate(cells.cells):
        if len(cell) == 0:
            continue
        if len(cell) == 1:
            rho = (1.0, 1.0, 1.0, 1.0)
        else:
            r_bar = table.value(len(cell))
            rho = (2.0, 2.0, float(r_bar), r_bar / 2.0)
        for i in cell:
            total += np.exp(G.beta[i]) * phi(G.atom(i), G_star.atom(j), rho)
    return float(total)
