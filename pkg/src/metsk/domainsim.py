"""Domain-similarity diagnostic: feature histograms, exact EMD, DS score.

Two feature sets are compared by binning their subject-averaged flattened
features into histograms over a shared range, solving the balanced
transportation problem between the two mass vectors exactly (bin-mean
absolute difference as the ground cost), and mapping the optimal cost
through exp(-gamma * EMD).  The solver is a plain transportation simplex:
north-west-corner start, then MODI reduced-cost pivots along the unique
basis cycle until no negative reduced cost remains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureHistogram:
    bin_edges: np.ndarray  # B + 1 ascending edges
    masses: np.ndarray  # B non-negative masses summing to 1
    bin_means: np.ndarray  # mean feature value per bin (center when empty)
    degenerate: bool = False  # all inputs identical -> single forced bin

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        self.bin_means = np.asarray(self.bin_means, dtype=np.float64)
        B = self.masses.size
        if self.bin_edges.size != B + 1 or self.bin_means.size != B:
            raise ValueError("inconsistent histogram arrays")
        if np.any(self.masses < 0):
            raise ValueError("negative histogram mass")
        if abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValueError(f"masses must sum to 1, got {self.masses.sum()!r}")
        lo = self.bin_edges[:-1] - 1e-12
        hi = self.bin_edges[1:] + 1e-12
        if np.any(self.bin_means < lo) or np.any(self.bin_means > hi):
            raise ValueError("bin means fall outside their bins")


def mean_flatten_features(features) -> np.ndarray:
    """Element-wise mean over subjects, then row-major flatten."""
    stack = np.asarray(features, dtype=np.float64)
    if stack.ndim < 2:
        raise ValueError(f"expected N subject matrices, got shape {stack.shape}")
    if stack.ndim == 2:  # a single subject matrix
        stack = stack[None, ...]
    first = stack[0].shape
    for i, f in enumerate(stack):
        if f.shape != first:
            raise ValueError(f"subject {i} has shape {f.shape}, expected {first}")
    return stack.mean(axis=0).reshape(-1)


def build_histograms(x_s: np.ndarray, x_t: np.ndarray, bins: int = 32) -> tuple:
    """Equal-width histograms over the pooled range, shared edges.

    A zero pooled range collapses to flagged single-bin histograms so the
    downstream comparison still runs (EMD 0).
    """
    x_s = np.asarray(x_s, dtype=np.float64).reshape(-1)
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
    if bins < 1:
        raise ValueError(f"need at least one bin, got {bins}")
    if x_s.size == 0 or x_t.size == 0:
        raise ValueError("feature vectors must be non-empty")
    lo = min(x_s.min(), x_t.min())
    hi = max(x_s.max(), x_t.max())
    if hi <= lo:
        edges = np.array([lo - 0.5, lo + 0.5])
        h = FeatureHistogram(edges, np.array([1.0]), np.array([lo]), degenerate=True)
        return h, FeatureHistogram(edges, np.array([1.0]), np.array([lo]), degenerate=True)
    edges = np.linspace(lo, hi, bins + 1)
    out = []
    for x in (x_s, x_t):
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
        counts = np.bincount(idx, minlength=bins).astype(np.float64)
        sums = np.bincount(idx, weights=x, minlength=bins)
        centers = (edges[:-1] + edges[1:]) / 2.0
        means = np.where(counts > 0, sums / np.maximum(counts, 1.0), centers)
        out.append(FeatureHistogram(edges, counts / x.size, means))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# exact transportation solver


def _northwest_corner(supply: np.ndarray, demand: np.ndarray) -> list:
    """Initial basic feasible solution with exactly m + n - 1 cells."""
    m, n = supply.size, demand.size
    s = supply.copy()
    d = demand.copy()
    basis = []
    i = j = 0
    while True:
        q = max(0.0, min(s[i], d[j]))
        basis.append([i, j, q])
        s[i] -= q
        d[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif s[i] <= 1e-15:
            i += 1
        else:
            j += 1
    return basis


def _basis_potentials(basis, m: int, n: int, cost: np.ndarray) -> tuple:
    """Solve u_i + v_j = c_ij over the basis spanning tree."""
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    adj_row = [[] for _ in range(m)]
    adj_col = [[] for _ in range(n)]
    for b, (i, j, _) in enumerate(basis):
        adj_row[i].append((j, b))
        adj_col[j].append((i, b))
    u[0] = 0.0
    stack = [("r", 0)]
    while stack:
        kind, k = stack.pop()
        if kind == "r":
            for j, _ in adj_row[k]:
                if np.isnan(v[j]):
                    v[j] = cost[k, j] - u[k]
                    stack.append(("c", j))
        else:
            for i, _ in adj_col[k]:
                if np.isnan(u[i]):
                    u[i] = cost[i, k] - v[k]
                    stack.append(("r", i))
    if np.any(np.isnan(u)) or np.any(np.isnan(v)):
        raise RuntimeError("transport basis is not a spanning tree")
    return u, v


def _basis_cycle(basis, enter_i: int, enter_j: int, m: int, n: int) -> list:
    """Cells of the unique cycle created by the entering cell, in order."""
    adj_row = [[] for _ in range(m)]
    adj_col = [[] for _ in range(n)]
    for b, (i, j, _) in enumerate(basis):
        adj_row[i].append((j, b))
        adj_col[j].append((i, b))
    # path from row enter_i to column enter_j through basis edges
    parent = {}
    start = ("r", enter_i)
    goal = ("c", enter_j)
    seen = {start}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        kind, k = node
        neighbors = adj_row[k] if kind == "r" else adj_col[k]
        for other, b in neighbors:
            nxt = ("c", other) if kind == "r" else ("r", other)
            if nxt in seen:
                continue
            seen.add(nxt)
            parent[nxt] = (node, b)
            stack.append(nxt)
    if goal not in parent and goal != start:
        raise RuntimeError("entering cell closes no cycle; basis is broken")
    cells = []
    node = goal
    while node != start:
        node, b = parent[node]
        cells.append(b)
    cells.reverse()
    return cells


def solve_transport(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray) -> tuple:
    """Exact optimal flow for the balanced transportation problem.

    Returns (objective, flow matrix).  Supplies and demands must be
    strictly positive and sum to the same total.
    """
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    m, n = supply.size, demand.size
    if cost.shape != (m, n):
        raise ValueError(f"cost must be {m} x {n}, got {cost.shape}")
    if np.any(supply <= 0) or np.any(demand <= 0):
        raise ValueError("supplies and demands must be strictly positive")
    if abs(supply.sum() - demand.sum()) > 1e-9:
        raise ValueError("transportation problem is unbalanced")

    basis = _northwest_corner(supply, demand)
    max_pivots = 100 * m * n + 100
    for _ in range(max_pivots):
        u, v = _basis_potentials(basis, m, n, cost)
        reduced = cost - u[:, None] - v[None, :]
        for i, j, _ in basis:
            reduced[i, j] = 0.0
        enter = np.unravel_index(np.argmin(reduced), reduced.shape)
        if reduced[enter] >= -1e-12:
            break
        cycle = _basis_cycle(basis, enter[0], enter[1], m, n)
        # entering cell takes +; path cells alternate -, +, -, ...
        minus = cycle[0::2]
        theta = min(basis[b][2] for b in minus)
        leave = next(b for b in minus if basis[b][2] == theta)
        for pos, b in enumerate(cycle):
            basis[b][2] += theta if pos % 2 else -theta
        basis[leave] = [enter[0], enter[1], theta]
    else:
        raise RuntimeError("transportation simplex did not converge")

    flow = np.zeros((m, n))
    for i, j, q in basis:
        flow[i, j] = q
    objective = float((flow * cost).sum())
    return objective, flow


def emd_with_flow(h_s: FeatureHistogram, h_t: FeatureHistogram) -> tuple:
    """Optimal transport cost between histograms plus the full flow matrix.

    Zero-mass bins are dropped before solving (they are degenerate rows or
    columns of the program) and restored as zero rows/columns of the flow.
    """
    for h in (h_s, h_t):
        if abs(h.masses.sum() - 1.0) > 1e-9:
            raise ValueError(f"histogram masses sum to {h.masses.sum()!r}, expected 1")
    rows = np.nonzero(h_s.masses > 0)[0]
    cols = np.nonzero(h_t.masses > 0)[0]
    cost = np.abs(h_s.bin_means[rows][:, None] - h_t.bin_means[cols][None, :])
    objective, flow_small = solve_transport(h_s.masses[rows], h_t.masses[cols], cost)
    flow = np.zeros((h_s.masses.size, h_t.masses.size))
    flow[np.ix_(rows, cols)] = flow_small
    return objective, flow


def emd(h_s: FeatureHistogram, h_t: FeatureHistogram) -> float:
    return emd_with_flow(h_s, h_t)[0]


def domain_similarity(h_s: FeatureHistogram, h_t: FeatureHistogram, gamma: float = 0.01) -> float:
    """exp(-gamma * EMD); 1 for identical feature distributions."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return float(np.exp(-gamma * emd(h_s, h_t)))


def similarity_report(x_s, x_t, bins: int = 32, gamma: float = 0.01, include_flow: bool = False) -> dict:
    """End-to-end report for two flattened feature vectors."""
    h_s, h_t = build_histograms(x_s, x_t, bins)
    value, flow = emd_with_flow(h_s, h_t)
    report = {
        "emd": value,
        "ds": float(np.exp(-gamma * value)),
        "gamma": gamma,
        "bins": int(h_s.masses.size),
    }
    if include_flow:
        report["flow"] = [[float(v) for v in row] for row in flow]
    return report
