"""Toy frozen backbone: a chain of adaptation sites with GeLU between them,
plus total-loss assembly and the manual backward pass.

Every site's gate sees the same (scaled) coordinate. Frozen weights are
shared across modes so frozen/lora/gloria/full comparisons differ only in
what trains.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import adapter
from .matcore import (
    ConsistencyError,
    DimensionError,
    check_vector,
    gelu,
    gelu_grad,
)
from .adapter import Coord, CoordBounds, GloriaSite, SiteCache

MODES = ("frozen", "lora", "gloria", "full")


@dataclass
class ToyBackbone:
    sites: list[GloriaSite]
    bounds: CoordBounds
    mode: str = "gloria"
    version: int = 0  # bumped on every parameter update; caches check it

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for i in range(len(self.sites) - 1):
            if self.sites[i].d_out != self.sites[i + 1].d_in:
                raise DimensionError(
                    f"site {i} emits {self.sites[i].d_out} dims but site "
                    f"{i + 1} expects {self.sites[i + 1].d_in}"
                )

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def d_in(self) -> int:
        return self.sites[0].d_in

    @property
    def rank(self) -> int:
        return self.sites[0].rank

    def bump_version(self) -> None:
        self.version += 1

    def trainable_params(self) -> dict[tuple[int, str], np.ndarray]:
        """Live views of the mode's trainable tensors, in fixed order."""
        out: dict[tuple[int, str], np.ndarray] = {}
        for i, s in enumerate(self.sites):
            if self.mode == "full":
                out[(i, "w")] = s.w_frozen
                out[(i, "bias")] = s.bias_frozen
            elif self.mode in ("lora", "gloria"):
                out[(i, "a")] = s.pair.a
                out[(i, "b")] = s.pair.b
                if self.mode == "gloria":
                    out[(i, "w1")] = s.gate.w1
                    out[(i, "b1")] = s.gate.b1
                    out[(i, "w2")] = s.gate.w2
                    out[(i, "b2")] = s.gate.b2
        return out


def build_backbone(d: int, n_sites: int, rank: int, hidden: int,
                   rng: np.random.Generator,
                   bounds: CoordBounds | None = None,
                   mode: str = "gloria") -> ToyBackbone:
    """Square-site backbone (d -> d at every site) with fresh adapters."""
    sites = [adapter.init_site(d, d, rank, hidden, rng) for _ in range(n_sites)]
    if bounds is None:
        bounds = CoordBounds(0.0, 1.0, 0.0, 1.0)
    return ToyBackbone(sites=sites, bounds=bounds, mode=mode)


def backbone_from_frozen(weights: list[np.ndarray], biases: list[np.ndarray],
                         rank: int, hidden: int, rng: np.random.Generator,
                         bounds: CoordBounds, mode: str = "gloria") -> ToyBackbone:
    """Backbone whose frozen tensors are given (e.g. a planted world's base)."""
    sites = []
    for w, b in zip(weights, biases):
        d_out, d_in = w.shape
        sites.append(adapter.GloriaSite(
            w_frozen=w.copy(), bias_frozen=b.copy(),
            pair=adapter.LowRankPair(
                a=adapter.xavier_uniform(d_out, rank, rng),
                b=adapter.xavier_uniform(rank, d_in, rng),
            ),
            gate=adapter.init_gate(rank, hidden, rng),
        ))
    return ToyBackbone(sites=sites, bounds=bounds, mode=mode)


def full_scale_backbone(rng: np.random.Generator, d: int = 128) -> ToyBackbone:
    """48 sites at rank 128: the full-scale shape preset for the interp pipeline."""
    return build_backbone(d=d, n_sites=48, rank=128, hidden=32, rng=rng)


@dataclass
class ForwardCache:
    model: ToyBackbone
    version: int
    coord: Coord | None
    x0: np.ndarray
    site_caches: list[SiteCache]
    pre_acts: list[np.ndarray]  # site outputs before the inter-site GeLU
    prediction: np.ndarray

    def gammas(self) -> list[np.ndarray]:
        return [sc.gamma for sc in self.site_caches if sc.gamma is not None]


def backbone_forward(m: ToyBackbone, x: np.ndarray,
                     c: Coord | None) -> tuple[np.ndarray, ForwardCache]:
    x = check_vector(x, "x")
    if x.size != m.d_in:
        raise DimensionError(f"input has {x.size} dims, backbone wants {m.d_in}")
    c_scaled = m.bounds.scale(c) if c is not None else None
    site_caches: list[SiteCache] = []
    pre_acts: list[np.ndarray] = []
    cur = x
    for i, site in enumerate(m.sites):
        y, sc = adapter.site_forward(site, cur, c_scaled, m.mode)
        site_caches.append(sc)
        pre_acts.append(y)
        cur = gelu(y) if i < m.n_sites - 1 else y
    return cur, ForwardCache(
        model=m, version=m.version, coord=c_scaled, x0=x,
        site_caches=site_caches, pre_acts=pre_acts, prediction=cur,
    )


def task_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = check_vector(pred, "pred")
    target = check_vector(target, "target")
    if pred.size != target.size:
        raise DimensionError(f"pred has {pred.size} dims, target {target.size}")
    d = pred - target
    return float(d @ d / pred.size)


def total_loss(task: float, m: ToyBackbone, gammas: list[np.ndarray],
               lam_orth: float, lam_sp: float) -> float:
    """task + lam_orth * sum_sites orth + lam_sp * mean_sites sparsity.

    Orthonormality is summed over sites; the normalized gate entropy is
    averaged so lam_sp does not rescale with site count.
    """
    total = task
    if lam_orth != 0.0:
        total += lam_orth * sum(adapter.orth_loss(s.pair) for s in m.sites)
    if lam_sp != 0.0 and gammas:
        total += lam_sp * float(np.mean([adapter.sparsity_loss(g) for g in gammas]))
    return total


GradSet = dict


def backbone_backward(m: ToyBackbone, cache: ForwardCache, target: np.ndarray,
                      lam_orth: float = 0.0, lam_sp: float = 0.0) -> GradSet:
    """Gradients of the per-sample total loss for the mode's trainable set."""
    if cache.model is not m:
        raise ConsistencyError("backward: cache belongs to a different model")
    if cache.version != m.version:
        raise ConsistencyError("backward: cache is stale (parameters changed)")
    target = check_vector(target, "target")
    pred = cache.prediction
    upstream = 2.0 * (pred - target) / pred.size
    lam_sp_site = lam_sp / m.n_sites if m.mode == "gloria" else 0.0
    lam_orth_eff = lam_orth if m.mode in ("lora", "gloria") else 0.0

    grads: GradSet = {}
    for i in range(m.n_sites - 1, -1, -1):
        if i < m.n_sites - 1:
            upstream = upstream * gelu_grad(cache.pre_acts[i])
        sg = adapter.site_backward(
            m.sites[i], cache.site_caches[i], upstream,
            lam_orth=lam_orth_eff, lam_sp=lam_sp_site,
        )
        upstream = sg.dx
        for name, g in (("a", sg.da), ("b", sg.db), ("w1", sg.dw1),
                        ("b1", sg.db1), ("w2", sg.dw2), ("b2", sg.db2),
                        ("w", sg.dw), ("bias", sg.dbias)):
            if g is not None:
                grads[(i, name)] = g
    return grads


# --- checkpointing ---------------------------------------------------------

def save_backbone(m: ToyBackbone, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for i, site in enumerate(m.sites):
        adapter.save_site(site, os.path.join(dirpath, f"site_{i:03d}"))
    with open(os.path.join(dirpath, "manifest.txt"), "w") as fh:
        fh.write(f"n_sites={m.n_sites}\n")
        for k, v in m.bounds.to_dict().items():
            fh.write(f"{k}={v:.17g}\n")


def load_backbone(dirpath, mode: str = "gloria") -> ToyBackbone:
    kv = {}
    with open(os.path.join(dirpath, "manifest.txt")) as fh:
        for line in fh:
            k, _, v = line.strip().partition("=")
            kv[k] = v
    n_sites = int(kv["n_sites"])
    sites = [adapter.load_site(os.path.join(dirpath, f"site_{i:03d}"))
             for i in range(n_sites)]
    bounds = CoordBounds(float(kv["lat_min"]), float(kv["lat_max"]),
                         float(kv["lng_min"]), float(kv["lng_max"]))
    return ToyBackbone(sites=sites, bounds=bounds, mode=mode)
