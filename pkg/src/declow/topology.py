"""Communication graphs and their column-stochastic mixing matrices.

Convention: w[i, j] is the weight node i gives to node j's message, so an
edge j -> i corresponds to a nonzero w[i, j] and every column sums to 1
(each node's outgoing influence is a unit). Undirected regular graphs with
uniform weights are additionally row stochastic.
"""

from dataclasses import dataclass

import numpy as np

COLUMN_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Violation:
    severity: str  # "error" | "info"
    message: str


@dataclass(frozen=True)
class MixingMatrix:
    n: int
    w: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (self.n, self.n):
            raise ValueError(f"mixing matrix shape {w.shape} != ({self.n}, {self.n})")
        object.__setattr__(self, "w", w)
        w.setflags(write=False)

    def in_neighbors(self, i: int) -> list[int]:
        """Nodes whose messages node i averages, including itself."""
        return [j for j in range(self.n) if self.w[i, j] != 0.0 or j == i]

    def out_neighbors(self, i: int) -> list[int]:
        """Nodes that average node i's message, excluding itself."""
        return [j for j in range(self.n) if self.w[j, i] != 0.0 and j != i]

    def out_degree(self, i: int) -> int:
        return len(self.out_neighbors(i))


def build_directed_ring(n: int) -> MixingMatrix:
    """Ring i -> i+1 with weight split 0.5 self / 0.5 successor."""
    if n < 2:
        raise ValueError(f"directed ring needs n >= 2, got {n}")
    w = np.zeros((n, n))
    for i in range(n):
        w[i, i] = 0.5
        w[(i + 1) % n, i] = 0.5
    return MixingMatrix(n=n, w=w, kind="directed_ring")


def build_undirected_torus(rows: int, cols: int) -> MixingMatrix:
    """2-D grid with wraparound; uniform 1/5 over self and 4 neighbors."""
    if rows < 2 or cols < 2:
        raise ValueError(f"torus needs rows, cols >= 2, got {rows}x{cols}")
    n = rows * cols
    w = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            neighbors = [
                ((r - 1) % rows) * cols + c,
                ((r + 1) % rows) * cols + c,
                r * cols + (c - 1) % cols,
                r * cols + (c + 1) % cols,
            ]
            w[i, i] += 0.2
            for j in neighbors:
                w[i, j] += 0.2
    return MixingMatrix(n=n, w=w, kind="undirected_torus")


def load_adjacency_file(path) -> MixingMatrix:
    """Custom topology from text lines "src dst weight" (directed edges)."""
    edges = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'src dst weight'")
            src, dst, weight = int(parts[0]), int(parts[1]), float(parts[2])
            if src < 0 or dst < 0:
                raise ValueError(f"{path}:{lineno}: negative node id")
            edges.append((src, dst, weight))
    if not edges:
        raise ValueError(f"{path}: no edges")
    n = 1 + max(max(s, d) for s, d, _ in edges)
    w = np.zeros((n, n))
    for src, dst, weight in edges:
        w[dst, src] += weight
    mm = MixingMatrix(n=n, w=w, kind="custom")
    errors = [v for v in validate(mm) if v.severity == "error"]
    if errors:
        raise ValueError(f"{path}: invalid topology: " + "; ".join(v.message for v in errors))
    return mm


def _strongly_connected(w: np.ndarray) -> bool:
    # strongly connected iff node 0 reaches all nodes in W and in W^T
    n = w.shape[0]

    def reachable(adj):
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in range(n):
                if adj[v, u] != 0.0 and v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == n

    return reachable(w) and reachable(w.T)


def validate(mm: MixingMatrix) -> list[Violation]:
    """Check the hard invariants; symmetry/row sums reported as info only."""
    w = mm.w
    out: list[Violation] = []
    if (w < 0.0).any() or (w > 1.0).any():
        out.append(Violation("error", "weights outside [0, 1]"))
    col_sums = w.sum(axis=0)
    bad = np.abs(col_sums - 1.0) > COLUMN_SUM_TOL
    if bad.any():
        cols = np.nonzero(bad)[0].tolist()
        out.append(Violation("error", f"columns {cols} do not sum to 1"))
    if (np.diag(w) <= 0.0).any():
        out.append(Violation("error", "zero diagonal entry (missing self-loop)"))
    if not _strongly_connected(w):
        out.append(Violation("error", "graph is not strongly connected"))
    if not np.allclose(w, w.T, atol=1e-12):
        out.append(Violation("info", "matrix is not symmetric"))
    if np.abs(w.sum(axis=1) - 1.0).max() > COLUMN_SUM_TOL:
        out.append(Violation("info", "matrix is not row stochastic"))
    return out


def spectral_gap(mm: MixingMatrix) -> float:
    """1 - |lambda_2| of the mixing matrix.

    Directed topologies have complex eigenvalue pairs, so the magnitudes
    come from a full eigensolve rather than power iteration.
    """
    eig = np.linalg.eigvals(mm.w)
    mags = np.sort(np.abs(eig))[::-1]
    return float(1.0 - mags[1])
