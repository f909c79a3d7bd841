"""Benchmark circuits: kicked Ising layers on a coupling graph."""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from .engine import Circuit, Gate
from .errors import ContractViolation
from .pauli_algebra import MultiIndex

logger = logging.getLogger(__name__)

BUNDLED_GEOMETRY = os.path.join(os.path.dirname(__file__), "data", "heavy_hex_127.txt")
DEFAULT_THETA_ZZ = -math.pi / 2


@dataclass(frozen=True)
class Geometry:
    """
    Qubit coupling graph with an optional proper edge coloring.

    :param colors: color of each edge, parallel to `edges`; None when uncolored.
    """
    n_qubits: int
    edges: Tuple[Tuple[int, int], ...]
    colors: Optional[Tuple[int, ...]] = None
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.n_qubits and 0 <= j < self.n_qubits):
                raise ContractViolation(f"edge ({i}, {j}) out of range for {self.n_qubits} qubits")
            if i == j:
                raise ContractViolation(f"self-loop on qubit {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ContractViolation(f"duplicate edge ({i}, {j})")
            seen.add(key)
        if self.colors is not None:
            if len(self.colors) != len(self.edges):
                raise ContractViolation("every edge needs exactly one color")
            for color, members in self.color_groups().items():
                touched = set()
                for i, j in members:
                    if i in touched or j in touched:
                        raise ContractViolation(f"edges of color {color} overlap at ({i}, {j})")
                    touched.update((i, j))

    def color_groups(self) -> Dict[int, list]:
        """Edges per color, colors ascending, edges in file order."""
        if self.colors is None:
            return {0: list(self.edges)}
        groups = {}
        for edge, color in zip(self.edges, self.colors):
            groups.setdefault(color, []).append(edge)
        return dict(sorted(groups.items()))

    def adjacency(self):
        if not self.edges:
            return coo_matrix((self.n_qubits, self.n_qubits))
        rows, cols = zip(*self.edges)
        data = np.ones(2 * len(rows))
        return coo_matrix((data, (rows + cols, cols + rows)), shape=(self.n_qubits, self.n_qubits))


def parse_geometry(text, n_qubits=None, name="custom"):
    """
    Parse "i j [color]" lines; "#" starts a comment.

    Either every edge carries a color or none does. The qubit count defaults to
    the largest index plus one.
    """
    edges, colors = [], []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ContractViolation(f"line {number}: expected 'i j [color]', got {raw!r}")
        try:
            values = [int(part) for part in parts]
        except ValueError as exc:
            raise ContractViolation(f"line {number}: non-integer field in {raw!r}") from exc
        if any(value < 0 for value in values):
            raise ContractViolation(f"line {number}: negative field in {raw!r}")
        edges.append((values[0], values[1]))
        colors.append(values[2] if len(values) == 3 else None)

    if any(c is None for c in colors) and not all(c is None for c in colors):
        raise ContractViolation("either all edges carry a color or none")
    if n_qubits is None:
        n_qubits = 1 + max((max(edge) for edge in edges), default=-1)
        if n_qubits < 1:
            raise ContractViolation("geometry has no qubits")
    return Geometry(
        n_qubits=n_qubits,
        edges=tuple(edges),
        colors=None if not colors or colors[0] is None else tuple(colors),
        name=name,
    )


def load_geometry(path, n_qubits=None):
    with open(path, "r") as file:
        text = file.read()
    geometry = parse_geometry(text, n_qubits=n_qubits, name=os.path.basename(path))
    logger.debug("geometry %s: n=%d edges=%d colors=%d", geometry.name, geometry.n_qubits,
                 len(geometry.edges), len(geometry.color_groups()))
    return geometry


def heavy_hex_eagle127():
    """Bundled 127-qubit heavy-hexagon graph, 144 edges in three colors."""
    return load_geometry(BUNDLED_GEOMETRY, n_qubits=127)


def chain_geometry(n_qubits):
    """Open chain 0-1-...-(n-1), colored by edge parity."""
    edges = tuple((i, i + 1) for i in range(n_qubits - 1))
    return Geometry(n_qubits, edges, tuple(i % 2 for i in range(len(edges))), name=f"chain{n_qubits}")


def kicked_ising_layer(geom, theta_x, theta_zz=DEFAULT_THETA_ZZ):
    """
    One Trotter step U = U_zz U_x in circuit order.

    X rotations on every qubit (ascending) come first, then the ZZ rotations on
    the edges grouped by color.
    """
    n = geom.n_qubits
    gates = [Gate(MultiIndex.from_sites(n, {j: "X"}), theta_x) for j in range(n)]
    for members in geom.color_groups().values():
        gates.extend(Gate(MultiIndex.from_sites(n, {i: "Z", j: "Z"}), theta_zz) for i, j in members)
    return tuple(gates)


def build_kicked_ising(geom, theta_x, theta_zz=DEFAULT_THETA_ZZ, layers=1):
    if layers < 1:
        raise ContractViolation(f"kicked Ising circuit needs at least one layer, got {layers}")
    layer = kicked_ising_layer(geom, theta_x, theta_zz)
    return Circuit(
        n_qubits=geom.n_qubits,
        layers=(layer,) * layers,
        labels={"model": "kicked-ising", "geometry": geom.name,
                "theta_x": theta_x, "theta_zz": theta_zz},
    )


def light_cone(geom, qubits, t):
    """Qubits within graph distance t of any of `qubits`, ascending."""
    if isinstance(qubits, int):
        qubits = [qubits]
    distances = shortest_path(geom.adjacency().tocsr(), directed=False, unweighted=True, indices=list(qubits))
    nearest = np.min(np.atleast_2d(distances), axis=0)
    return tuple(int(q) for q in np.flatnonzero(nearest <= t))
