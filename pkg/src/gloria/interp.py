"""Interpretability pipeline: stack gate activations per location, factorize
them with KL-divergence NMF (multiplicative updates, NNDSVDA init), pick the
component count at the elbow of the reconstruction curve, aggregate loadings
by region, and match recovered components against a planted mixing matrix.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import adapter
from .adapter import Coord
from .matcore import (
    InputError,
    NumericError,
    check_matrix,
    load_matrix,
    make_rng,
    save_matrix,
)
from .model import ToyBackbone
from .synthdata import GeoDataset

EPS = 1e-12


@dataclass
class Location:
    lat: float
    lng: float
    region: int = -1


@dataclass
class GateMatrix:
    """Stacked gate outputs: rows are site-major (site, rank) dims, columns
    are locations. Entries are post-Softplus, hence strictly positive."""

    g: np.ndarray
    locations: list[Location]


def extract_gates(m: ToyBackbone, locations: list[Location]) -> GateMatrix:
    """Column j concatenates every site's gate output at location j."""
    if not locations:
        raise InputError("extract_gates: empty location list")
    cols = []
    for loc in locations:
        c = m.bounds.scale(Coord(loc.lat, loc.lng))
        cols.append(np.concatenate(
            [adapter.gate_forward(s.gate, c) for s in m.sites]))
    return GateMatrix(g=np.column_stack(cols), locations=list(locations))


def locations_from_dataset(data: GeoDataset, max_locations: int | None = None,
                           rng: np.random.Generator | None = None) -> list[Location]:
    """Unique sample coordinates, optionally subsampled deterministically."""
    seen = {}
    for i in range(data.n):
        key = (float(data.lat[i]), float(data.lng[i]))
        if key not in seen:
            seen[key] = Location(key[0], key[1], int(data.region[i]))
    locs = list(seen.values())
    if max_locations is not None and len(locs) > max_locations:
        rng = rng or make_rng(0)
        idx = sorted(rng.choice(len(locs), size=max_locations, replace=False))
        locs = [locs[i] for i in idx]
    return locs


@dataclass
class NmfFactors:
    s: np.ndarray  # (gate dims, k), non-negative basis
    l: np.ndarray  # (k, locations), non-negative loadings

    @property
    def k(self) -> int:
        return self.s.shape[1]


def kl_divergence(g, s, l) -> float:
    """Generalized KL: sum g*log(g/(SL)) - g + SL, with 0 log 0 = 0."""
    g = check_matrix(g, "g")
    w = check_matrix(s, "s") @ check_matrix(l, "l")
    if w.shape != g.shape:
        raise InputError(f"kl_divergence: SL is {w.shape}, G is {g.shape}")
    pos = g > 0
    total = float(w.sum() - g.sum())
    gp = g[pos]
    total += float((gp * np.log(gp / (w[pos] + EPS))).sum())
    return total


def _jacobi_eigh(a: np.ndarray, max_sweeps: int = 100,
                 tol: float = 1e-13) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns (eigenvalues, eigenvectors as columns), descending order.
    """
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(float(np.abs(a).max()), 1e-300)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                off = max(off, abs(apq))
                if abs(apq) <= tol * scale:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
        if off <= tol * scale:
            break
    else:
        raise NumericError(f"Jacobi sweep did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def _top_singular_triplets(g: np.ndarray, k: int, max_iter: int = 500,
                           tol: float = 1e-10,
                           rng: np.random.Generator | None = None):
    """Top-k singular triplets via blocked power (subspace) iteration.

    Iterates an oversampled orthonormal block against the smaller Gram
    matrix until the Ritz values settle, then extracts eigenpairs of the
    small projected matrix with a Jacobi solve. Raises if the Ritz values
    have not stabilized to a loose 1e-6 by `max_iter`.
    """
    rng = rng or make_rng(0)
    m, n = g.shape
    use_cols = n <= m
    gram = g.T @ g if use_cols else g @ g.T
    dim = gram.shape[0]
    block = min(dim, k + 4)
    q, _ = np.linalg.qr(rng.standard_normal((dim, block)))
    scale = max(float(np.trace(gram)), 1e-300)
    prev = None
    delta = np.inf
    for it in range(1, max_iter + 1):
        z = gram @ q
        q, _ = np.linalg.qr(z)
        # Rayleigh-Ritz values of the projected matrix; unlike per-column
        # Rayleigh quotients they are stable inside eigenvalue clusters.
        ritz = _jacobi_eigh(q.T @ (gram @ q))[0][:k]
        if prev is not None:
            delta = float(np.abs(ritz - prev).max()) / scale
            if delta < tol:
                break
        prev = ritz
    else:
        if delta >= 1e-6:
            raise NumericError(
                f"subspace iteration did not converge in {max_iter} iterations")
    lam, w = _jacobi_eigh(q.T @ (gram @ q))
    lam = lam[:k]
    vecs = (q @ w)[:, :k]
    sig = np.sqrt(np.maximum(lam, 0.0))
    if use_cols:
        right = vecs
        left = np.zeros((m, k))
        for j in range(k):
            if sig[j] > 1e-14 * np.sqrt(scale):
                left[:, j] = g @ right[:, j] / sig[j]
    else:
        left = vecs
        right = np.zeros((n, k))
        for j in range(k):
            if sig[j] > 1e-14 * np.sqrt(scale):
                right[:, j] = g.T @ left[:, j] / sig[j]
    return left, sig, right  # (m,k), (k,), (n,k)


def nndsvda_init(g, k: int, rng: np.random.Generator | None = None) -> NmfFactors:
    """NNDSVD from the top-k singular triplets, zeros then filled with mean(G).

    The leading triplet's signs are absorbed (Perron vectors of a
    non-negative matrix); later triplets keep whichever of their positive or
    negative parts carries more energy.
    """
    g = check_matrix(g, "g")
    if np.any(g < 0):
        raise InputError("nndsvda_init: G must be non-negative")
    if k < 1 or k > min(g.shape):
        raise InputError(f"nndsvda_init: k={k} out of range for shape {g.shape}")
    u, sig, v = _top_singular_triplets(g, k, rng=rng)
    s = np.zeros((g.shape[0], k))
    l = np.zeros((k, g.shape[1]))
    s[:, 0] = np.sqrt(sig[0]) * np.abs(u[:, 0])
    l[0, :] = np.sqrt(sig[0]) * np.abs(v[:, 0])
    for j in range(1, k):
        up, un = np.maximum(u[:, j], 0), np.maximum(-u[:, j], 0)
        vp, vn = np.maximum(v[:, j], 0), np.maximum(-v[:, j], 0)
        n_up, n_un = np.linalg.norm(up), np.linalg.norm(un)
        n_vp, n_vn = np.linalg.norm(vp), np.linalg.norm(vn)
        term_p, term_n = n_up * n_vp, n_un * n_vn
        if term_p >= term_n:
            if term_p > 0:
                s[:, j] = np.sqrt(sig[j] * term_p) * up / n_up
                l[j, :] = np.sqrt(sig[j] * term_p) * vp / n_vp
        elif term_n > 0:
            s[:, j] = np.sqrt(sig[j] * term_n) * un / n_un
            l[j, :] = np.sqrt(sig[j] * term_n) * vn / n_vn
    mean = float(g.mean())
    s[s <= 0] = mean
    l[l <= 0] = mean
    return NmfFactors(s=s, l=l)


def nmf_kl(g, k: int, iters: int = 3000,
           init: NmfFactors | None = None) -> NmfFactors:
    """KL-divergence NMF by multiplicative updates from a strictly positive init."""
    g = check_matrix(g, "g")
    if init is None:
        init = nndsvda_init(g, k)
    s = init.s.copy()
    l = init.l.copy()
    if s.shape != (g.shape[0], k) or l.shape != (k, g.shape[1]):
        raise InputError("nmf_kl: init factor shapes do not match G and k")
    if np.any(s <= 0) or np.any(l <= 0):
        raise InputError("nmf_kl: init must be strictly positive")
    for it in range(iters):
        w = s @ l
        s *= (g / (w + EPS)) @ l.T / (l.sum(axis=1) + EPS)[None, :]
        w = s @ l
        l *= s.T @ (g / (w + EPS)) / (s.sum(axis=0) + EPS)[:, None]
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(l))):
            raise NumericError(f"nmf_kl: non-finite factors at iteration {it}")
    return NmfFactors(s=s, l=l)


def elbow_select(g, k_candidates: list[int], iters: int = 500,
                 floor_ratio: float = 1e-2
                 ) -> tuple[int, list[tuple[int, float]]]:
    """Pick k at the knee of the reconstruction curve.

    The divergence typically falls by orders of magnitude once k reaches the
    true component count, so the knee is measured on the log of the curve:
    values below floor_ratio times the curve maximum are clamped as
    converged solver noise, both axes are min-max normalized, and the
    candidate with maximum perpendicular distance to the chord between the
    curve's endpoints wins; ties go to the smallest k. The raw (k, KL)
    curve is returned alongside so a human can override the choice.
    """
    ks = list(k_candidates)
    if len(ks) < 3:
        raise InputError("elbow_select: need at least 3 candidates")
    if ks != sorted(ks):
        raise InputError("elbow_select: candidates must be sorted ascending")
    curve = [(k, kl_divergence(g, *_factors_tuple(nmf_kl(g, k, iters=iters))))
             for k in ks]
    xs = np.array([c[0] for c in curve], dtype=np.float64)
    raw = np.array([c[1] for c in curve], dtype=np.float64)
    floor = max(float(raw.max()) * floor_ratio, EPS)
    ys = np.log(np.maximum(raw, floor))
    xs = (xs - xs[0]) / (xs[-1] - xs[0])
    y_span = ys.max() - ys.min()
    ys = (ys - ys.min()) / y_span if y_span > 0 else np.zeros_like(ys)
    # distance from (x,y) to the chord (xs[0],ys[0])-(xs[-1],ys[-1])
    dx, dy = xs[-1] - xs[0], ys[-1] - ys[0]
    norm = np.hypot(dx, dy)
    dist = np.abs(dy * (xs - xs[0]) - dx * (ys - ys[0])) / (norm if norm > 0 else 1.0)
    best = int(np.argmax(dist > dist.max() - 1e-15))
    return ks[best], curve


def _factors_tuple(f: NmfFactors):
    return f.s, f.l


def aggregate_by_region(f: NmfFactors, regions: list[int],
                        region_count: int) -> tuple[np.ndarray, list[int]]:
    """Mean loading per (component, region); returns (k x R matrix, empty ids).

    Columns of absent regions are zero-filled and reported in the second
    return value rather than dropped, keeping the matrix shape exact.
    """
    if len(regions) != f.l.shape[1]:
        raise InputError("aggregate_by_region: one region id per location required")
    agg = np.zeros((f.k, region_count))
    empty = []
    regions_arr = np.asarray(regions)
    for r in range(region_count):
        mask = regions_arr == r
        if not mask.any():
            empty.append(r)
            continue
        agg[:, r] = f.l[:, mask].mean(axis=1)
    return agg, empty


def cluster_order(m, axis: str = "rows") -> tuple[list[int], list[tuple[int, int, float, int]]]:
    """Average-linkage agglomerative ordering for heatmap axes.

    Vectors are unit-normalized first; distances are Euclidean. Ties break
    toward the lexicographically smallest cluster-id pair. Returns the leaf
    order and the merge list (id_a, id_b, distance, new_id) with original
    vectors numbered 0..n-1 and merged clusters from n upward.
    """
    m = check_matrix(m, "m")
    if axis == "cols":
        m = m.T
    elif axis != "rows":
        raise InputError(f"cluster_order: axis must be 'rows' or 'cols', got {axis!r}")
    n = m.shape[0]
    if n < 2:
        raise InputError("cluster_order: need at least 2 vectors")
    norms = np.linalg.norm(m, axis=1)
    unit = m / np.where(norms > 0, norms, 1.0)[:, None]
    dist = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = float(np.linalg.norm(unit[i] - unit[j]))
    active = {i: (1, [i]) for i in range(n)}  # id -> (size, leaves)
    merges = []
    next_id = n
    while len(active) > 1:
        best = None
        for i in sorted(active):
            for j in sorted(active):
                if j <= i:
                    continue
                d = dist[(i, j)]
                if best is None or d < best[0] - 1e-15:
                    best = (d, i, j)
        d, i, j = best
        size_i, leaves_i = active.pop(i)
        size_j, leaves_j = active.pop(j)
        new_size = size_i + size_j
        for k in active:
            di = dist[(min(i, k), max(i, k))]
            dj = dist[(min(j, k), max(j, k))]
            dist[(min(k, next_id), max(k, next_id))] = (
                (size_i * di + size_j * dj) / new_size)
        active[next_id] = (new_size, leaves_i + leaves_j)
        merges.append((i, j, d, next_id))
        next_id += 1
    (_, leaves), = active.values()
    return leaves, merges


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 0 by convention when either vector is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def component_match(recovered, planted) -> tuple[list[int], list[float]]:
    """Match recovered component rows to planted rows, maximizing total Pearson.

    Both arguments are (k x regions); pass a (regions x k) mixing matrix
    transposed. Returns (perm, corrs) where perm[i] is the planted row
    assigned to recovered row i and corrs[i] the matched correlation.
    """
    recovered = check_matrix(recovered, "recovered")
    planted = check_matrix(planted, "planted")
    if recovered.shape[0] != planted.shape[0]:
        raise InputError(
            f"component_match: {recovered.shape[0]} vs {planted.shape[0]} components")
    k = recovered.shape[0]
    corr = np.array([[pearson(recovered[i], planted[j]) for j in range(k)]
                     for i in range(k)])
    rows, cols = linear_sum_assignment(-corr)
    perm = [int(cols[list(rows).index(i)]) for i in range(k)]
    return perm, [float(corr[i, perm[i]]) for i in range(k)]


# --- serialization ---------------------------------------------------------

def save_gate_matrix(gm: GateMatrix, matrix_path, sidecar_path) -> None:
    save_matrix(gm.g, matrix_path)
    with open(sidecar_path, "w") as fh:
        fh.write("index,lat,lng,region\n")
        for i, loc in enumerate(gm.locations):
            fh.write(f"{i},{loc.lat:.17g},{loc.lng:.17g},{loc.region}\n")


def load_gate_matrix(matrix_path, sidecar_path) -> GateMatrix:
    g = load_matrix(matrix_path)
    locations = []
    with open(sidecar_path) as fh:
        fh.readline()
        for line in fh:
            idx, lat, lng, region = line.strip().split(",")
            locations.append(Location(float(lat), float(lng), int(region)))
    if len(locations) != g.shape[1]:
        raise InputError("gate matrix and location sidecar disagree on columns")
    return GateMatrix(g=g, locations=locations)


def save_nmf(f: NmfFactors, dirpath, final_kl: float, iters: int) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_matrix(f.s, os.path.join(dirpath, "s.txt"))
    save_matrix(f.l, os.path.join(dirpath, "l.txt"))
    with open(os.path.join(dirpath, "summary.txt"), "w") as fh:
        fh.write(f"k={f.k}\nfinal_kl={final_kl:.17g}\niterations={iters}\n")


def load_nmf(dirpath) -> NmfFactors:
    return NmfFactors(
        s=load_matrix(os.path.join(dirpath, "s.txt")),
        l=load_matrix(os.path.join(dirpath, "l.txt")),
    )


def save_elbow_curve(curve: list[tuple[int, float]], path) -> None:
    with open(path, "w") as fh:
        fh.write("k,kl\n")
        for k, kl in curve:
            fh.write(f"{k},{kl:.17g}\n")
