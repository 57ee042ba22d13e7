"""Planted geo-conditioned regression task.

A world consists of a frozen base chain plus k_true shared rank-1
perturbation components per site. Each map region applies the base chain
with its own non-negative mixture of those components, so the mixing
matrix is the exact recovery target for the interpretability pipeline.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .adapter import Coord, CoordBounds
from .matcore import InputError, check_matrix, gelu, make_rng, xavier_uniform


@dataclass
class WorldSpec:
    regions: int = 4
    k_true: int = 4
    d: int = 32
    n_sites: int = 4
    sigma_c: float = 0.02
    sigma_y: float = 0.01
    strength: float = 3.0
    mix_noise: float = 0.15

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlantedWorld:
    spec: WorldSpec
    seed: int
    base_w: list[np.ndarray]        # per-site frozen weights, (d, d)
    base_bias: list[np.ndarray]     # per-site biases, (d,)
    comp_u: list[list[np.ndarray]]  # [site][component] unit vectors, (d,)
    comp_v: list[list[np.ndarray]]
    centers: list[Coord]
    mixing: np.ndarray              # (regions, k_true), non-negative

    def region_weight(self, site: int, region: int) -> np.ndarray:
        """Base weight plus that region's planted low-rank perturbation."""
        w = self.base_w[site].copy()
        for j in range(self.spec.k_true):
            w += (self.spec.strength * self.mixing[region, j]
                  * np.outer(self.comp_u[site][j], self.comp_v[site][j]))
        return w

    def region_forward(self, region: int, x: np.ndarray) -> np.ndarray:
        """Chain the region transform through all sites, GeLU between them."""
        cur = x
        n = self.spec.n_sites
        for s in range(n):
            y = self.region_weight(s, region) @ cur + self.base_bias[s]
            cur = gelu(y) if s < n - 1 else y
        return cur


def _grid_centers(regions: int) -> list[Coord]:
    """Well-separated centers on a grid inside the unit square."""
    side = math.ceil(math.sqrt(regions))
    coords = []
    for i in range(regions):
        row, col = divmod(i, side)
        coords.append(Coord(lat=(row + 0.5) / side, lng=(col + 0.5) / side))
    return coords


def gen_world(spec: WorldSpec, rng: np.random.Generator) -> PlantedWorld:
    """Deterministic world per rng stream; regions mix k_true shared components.

    The mixing matrix is diagonally dominant (1.0 on the wrapped diagonal,
    small uniform noise elsewhere) so each region leans on one component and
    planted recovery is well posed.
    """
    if spec.k_true < 1:
        raise InputError("gen_world: k_true must be >= 1")
    if spec.regions < 2:
        raise InputError("gen_world: need at least 2 regions")
    d, n_sites, k = spec.d, spec.n_sites, spec.k_true
    base_w = [xavier_uniform(d, d, rng) for _ in range(n_sites)]
    base_bias = [np.zeros(d) for _ in range(n_sites)]
    comp_u, comp_v = [], []
    for _ in range(n_sites):
        us, vs = [], []
        for _ in range(k):
            u = rng.standard_normal(d)
            v = rng.standard_normal(d)
            us.append(u / np.linalg.norm(u))
            vs.append(v / np.linalg.norm(v))
        comp_u.append(us)
        comp_v.append(vs)
    mixing = rng.uniform(0.0, spec.mix_noise, size=(spec.regions, k))
    for r in range(spec.regions):
        mixing[r, r % k] = 1.0
    return PlantedWorld(
        spec=spec, seed=0, base_w=base_w, base_bias=base_bias,
        comp_u=comp_u, comp_v=comp_v, centers=_grid_centers(spec.regions),
        mixing=mixing,
    )


def make_world(spec: WorldSpec, seed: int) -> PlantedWorld:
    w = gen_world(spec, make_rng(seed))
    w.seed = seed
    return w


@dataclass
class GeoDataset:
    lat: np.ndarray      # (n,)
    lng: np.ndarray      # (n,)
    region: np.ndarray   # (n,) int
    x: np.ndarray        # (n, d)
    y: np.ndarray        # (n, d)
    bounds: CoordBounds

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def coord(self, i: int) -> Coord:
        return Coord(float(self.lat[i]), float(self.lng[i]))

    def subset(self, idx) -> "GeoDataset":
        idx = np.asarray(idx)
        return GeoDataset(self.lat[idx], self.lng[idx], self.region[idx],
                          self.x[idx], self.y[idx], self.bounds)


def sample_dataset(world: PlantedWorld, n: int, rng: np.random.Generator) -> GeoDataset:
    """Uniform region choice, jittered center coords, Gaussian inputs,
    region-transform outputs plus observation noise."""
    if n < 1:
        raise InputError("sample_dataset: n must be >= 1")
    spec = world.spec
    region = rng.integers(0, spec.regions, size=n)
    lat = np.empty(n)
    lng = np.empty(n)
    x = rng.standard_normal((n, spec.d))
    y = np.empty((n, spec.d))
    for i in range(n):
        ctr = world.centers[region[i]]
        lat[i] = float(np.clip(ctr.lat + spec.sigma_c * rng.standard_normal(), 0.0, 1.0))
        lng[i] = float(np.clip(ctr.lng + spec.sigma_c * rng.standard_normal(), 0.0, 1.0))
        y[i] = world.region_forward(int(region[i]), x[i])
    if spec.sigma_y > 0:
        y += spec.sigma_y * rng.standard_normal((n, spec.d))
    bounds = CoordBounds(float(lat.min()), float(lat.max()),
                         float(lng.min()), float(lng.max()))
    return GeoDataset(lat=lat, lng=lng, region=region.astype(np.int64),
                      x=x, y=y, bounds=bounds)


def split(data: GeoDataset, rng: np.random.Generator,
          holdout_region: int | None = None
          ) -> tuple[GeoDataset, GeoDataset, GeoDataset]:
    """80/10/10 split; with a holdout region, all of its samples go to test.

    The three parts are disjoint and exhaustive. Region ids must exist.
    """
    if holdout_region is not None:
        present = np.unique(data.region)
        if holdout_region not in present:
            raise InputError(f"split: region {holdout_region} not present")
        held = np.flatnonzero(data.region == holdout_region)
        rest = np.flatnonzero(data.region != holdout_region)
        tr, va, te = split(data.subset(rest), rng)
        test = GeoDataset(
            np.concatenate([te.lat, data.lat[held]]),
            np.concatenate([te.lng, data.lng[held]]),
            np.concatenate([te.region, data.region[held]]),
            np.concatenate([te.x, data.x[held]]),
            np.concatenate([te.y, data.y[held]]),
            data.bounds,
        )
        return tr, va, test
    n = data.n
    if n < 10:
        raise InputError("split: need at least 10 samples for an 80/10/10 split")
    perm = rng.permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    return (data.subset(perm[:n_train]),
            data.subset(perm[n_train:n_train + n_val]),
            data.subset(perm[n_train + n_val:]))


# --- serialization ---------------------------------------------------------

def save_dataset(data: GeoDataset, path) -> None:
    d = data.d
    header = (["lat", "lng", "region"]
              + [f"x{i}" for i in range(d)] + [f"y{i}" for i in range(d)])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(data.n):
            row = [f"{data.lat[i]:.17g}", f"{data.lng[i]:.17g}", str(int(data.region[i]))]
            row += [f"{v:.17g}" for v in data.x[i]]
            row += [f"{v:.17g}" for v in data.y[i]]
            fh.write(",".join(row) + "\n")


def load_dataset(path) -> GeoDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        d = sum(1 for h in header if h.startswith("x"))
        raw = np.loadtxt(fh, delimiter=",", ndmin=2)
    if raw.shape[1] != 3 + 2 * d:
        raise InputError(f"{path}: expected {3 + 2 * d} columns, got {raw.shape[1]}")
    lat, lng = raw[:, 0], raw[:, 1]
    return GeoDataset(
        lat=lat, lng=lng, region=raw[:, 2].astype(np.int64),
        x=check_matrix(raw[:, 3:3 + d]), y=check_matrix(raw[:, 3 + d:]),
        bounds=CoordBounds(float(lat.min()), float(lat.max()),
                           float(lng.min()), float(lng.max())),
    )


def save_world_manifest(spec: WorldSpec, seed: int, n: int, path) -> None:
    """Key-value manifest sufficient to regenerate the dataset exactly."""
    with open(path, "w") as fh:
        fh.write(f"seed={seed}\nn={n}\n")
        for k, v in spec.to_dict().items():
            fh.write(f"{k}={v}\n")


def load_world_manifest(path) -> tuple[WorldSpec, int, int]:
    kv = {}
    with open(path) as fh:
        for line in fh:
            k, _, v = line.strip().partition("=")
            kv[k] = v
    spec = WorldSpec(
        regions=int(kv["regions"]), k_true=int(kv["k_true"]), d=int(kv["d"]),
        n_sites=int(kv["n_sites"]), sigma_c=float(kv["sigma_c"]),
        sigma_y=float(kv["sigma_y"]), strength=float(kv["strength"]),
        mix_noise=float(kv["mix_noise"]),
    )
    return spec, int(kv["seed"]), int(kv["n"])
