"""The gated low-rank adapter: gate MLP, forward passes, regularizers,
and their hand-derived gradients.

One adaptation site wraps a frozen weight matrix with a trainable low-rank
pair (A, B) and a small coordinate-conditioned gate MLP producing strictly
positive per-rank gains via Softplus. The gated update never materializes
the diagonal gain matrix: it scales B·x elementwise before applying A.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .matcore import (
    ConsistencyError,
    DimensionError,
    check_vector,
    gelu,
    gelu_grad,
    load_matrix,
    load_vector,
    save_matrix,
    save_vector,
    sigmoid,
    softplus,
    xavier_uniform,
)

SPARSITY_EPS = 1e-12


@dataclass
class Coord:
    """A (lat, lng) pair; gate inputs are expected scaled to [-1, 1]."""

    lat: float
    lng: float

    def as_array(self) -> np.ndarray:
        return np.array([self.lat, self.lng], dtype=np.float64)


@dataclass
class CoordBounds:
    """Min-max scaling bounds, stored with the model at training time."""

    lat_min: float
    lat_max: float
    lng_min: float
    lng_max: float

    def scale(self, c: Coord) -> Coord:
        """Map raw coordinates into [-1, 1], clipping out-of-bound queries."""
        return Coord(
            _scale1(c.lat, self.lat_min, self.lat_max),
            _scale1(c.lng, self.lng_min, self.lng_max),
        )

    def to_dict(self) -> dict:
        return {
            "lat_min": self.lat_min,
            "lat_max": self.lat_max,
            "lng_min": self.lng_min,
            "lng_max": self.lng_max,
        }


def _scale1(v: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return float(np.clip(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0))


@dataclass
class GateMlp:
    """Two-layer MLP: GeLU hidden layer, Softplus output, one gain per rank."""

    w1: np.ndarray  # (hidden, 2)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (r, hidden)
    b2: np.ndarray  # (r,)

    @property
    def rank(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


def init_gate(rank: int, hidden: int, rng: np.random.Generator) -> GateMlp:
    """Xavier hidden layer, zero output layer: every gain starts at ln 2.

    Zeroing the whole MLP would kill all gate gradients (zero hidden
    activations block w1/b1 and w2 updates); zeroing only the output layer
    keeps the neutral start trainable.
    """
    return GateMlp(
        w1=xavier_uniform(hidden, 2, rng),
        b1=np.zeros(hidden),
        w2=np.zeros((rank, hidden)),
        b2=np.zeros(rank),
    )


@dataclass
class LowRankPair:
    a: np.ndarray  # (d_out, r)
    b: np.ndarray  # (r, d_in)

    def __post_init__(self):
        if self.a.shape[1] != self.b.shape[0]:
            raise DimensionError(
                f"low-rank pair: A is {self.a.shape}, B is {self.b.shape}"
            )
        r = self.a.shape[1]
        if r > min(self.a.shape[0], self.b.shape[1]):
            raise DimensionError(
                f"rank {r} exceeds min dim of A {self.a.shape} / B {self.b.shape}"
            )

    @property
    def rank(self) -> int:
        return self.a.shape[1]


@dataclass
class GloriaSite:
    """One adapted feed-forward site. w_frozen and bias_frozen never train."""

    w_frozen: np.ndarray  # (d_out, d_in)
    bias_frozen: np.ndarray  # (d_out,)
    pair: LowRankPair
    gate: GateMlp

    @property
    def d_in(self) -> int:
        return self.w_frozen.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_frozen.shape[0]

    @property
    def rank(self) -> int:
        return self.pair.rank


def init_site(d_in: int, d_out: int, rank: int, hidden: int,
              rng: np.random.Generator) -> GloriaSite:
    return GloriaSite(
        w_frozen=xavier_uniform(d_out, d_in, rng),
        bias_frozen=np.zeros(d_out),
        pair=LowRankPair(
            a=xavier_uniform(d_out, rank, rng),
            b=xavier_uniform(rank, d_in, rng),
        ),
        gate=init_gate(rank, hidden, rng),
    )


@dataclass
class GateCache:
    c: np.ndarray       # scaled coord, (2,)
    h_pre: np.ndarray   # (hidden,)
    h: np.ndarray       # (hidden,)
    g_pre: np.ndarray   # (r,)
    gamma: np.ndarray   # (r,)


def gate_forward(gate: GateMlp, c: Coord) -> np.ndarray:
    """gamma = softplus(w2 . gelu(w1 . c + b1) + b2); strictly positive."""
    return gate_forward_cached(gate, c).gamma


def gate_forward_cached(gate: GateMlp, c: Coord) -> GateCache:
    cv = c.as_array()
    h_pre = gate.w1 @ cv + gate.b1
    h = gelu(h_pre)
    g_pre = gate.w2 @ h + gate.b2
    return GateCache(c=cv, h_pre=h_pre, h=h, g_pre=g_pre, gamma=softplus(g_pre))


def lora_forward(site: GloriaSite, x: np.ndarray) -> np.ndarray:
    """Ungated low-rank update: W x + bias + A (B x)."""
    x = check_vector(x, "x")
    if x.size != site.d_in:
        raise DimensionError(f"lora_forward: x has {x.size} dims, site wants {site.d_in}")
    return site.w_frozen @ x + site.bias_frozen + site.pair.a @ (site.pair.b @ x)


def gloria_forward(site: GloriaSite, x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Gated update: W x + bias + A (gamma * (B x)), rank gains applied elementwise."""
    x = check_vector(x, "x")
    gamma = check_vector(gamma, "gamma")
    if x.size != site.d_in:
        raise DimensionError(f"gloria_forward: x has {x.size} dims, site wants {site.d_in}")
    if gamma.size != site.rank:
        raise DimensionError(
            f"gloria_forward: gamma has {gamma.size} entries, rank is {site.rank}"
        )
    bx = site.pair.b @ x
    return site.w_frozen @ x + site.bias_frozen + site.pair.a @ (gamma * bx)


def orth_loss(pair: LowRankPair) -> float:
    """||A^T A - I||_F^2 + ||B B^T - I||_F^2."""
    r = pair.rank
    eye = np.eye(r)
    da = pair.a.T @ pair.a - eye
    db = pair.b @ pair.b.T - eye
    return float(np.sum(da * da) + np.sum(db * db))


def orth_loss_grads(pair: LowRankPair) -> tuple[np.ndarray, np.ndarray]:
    """(dL/dA, dL/dB) = (4 A (A^T A - I), 4 (B B^T - I) B)."""
    r = pair.rank
    eye = np.eye(r)
    return (
        4.0 * pair.a @ (pair.a.T @ pair.a - eye),
        4.0 * (pair.b @ pair.b.T - eye) @ pair.b,
    )


def sparsity_loss(gamma: np.ndarray) -> float:
    """Normalized entropy of the gain distribution, in [0, 1]; 0 at rank 1."""
    gamma = np.asarray(gamma, dtype=np.float64)
    r = gamma.size
    if r <= 1:
        return 0.0
    p = gamma / max(float(gamma.sum()), SPARSITY_EPS)
    return float(-(p * np.log(p + SPARSITY_EPS)).sum() / np.log(r))


def sparsity_loss_grad(gamma: np.ndarray) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    r = gamma.size
    if r <= 1:
        return np.zeros_like(gamma)
    s = max(float(gamma.sum()), SPARSITY_EPS)
    p = gamma / s
    t = np.log(p + SPARSITY_EPS) + p / (p + SPARSITY_EPS)
    return -(t - float(t @ p)) / (s * np.log(r))


@dataclass
class SiteCache:
    """Forward intermediates for one site; owned by the producing forward."""

    site: GloriaSite
    mode: str
    x: np.ndarray
    bx: np.ndarray | None = None
    gate: GateCache | None = None

    @property
    def gamma(self) -> np.ndarray | None:
        return self.gate.gamma if self.gate is not None else None


def site_forward(site: GloriaSite, x: np.ndarray, c: Coord | None,
                 mode: str) -> tuple[np.ndarray, SiteCache]:
    """Mode-dispatched forward; caches what the backward pass needs."""
    x = check_vector(x, "x")
    if mode in ("frozen", "full"):
        y = site.w_frozen @ x + site.bias_frozen
        return y, SiteCache(site=site, mode=mode, x=x)
    if mode == "lora":
        bx = site.pair.b @ x
        y = site.w_frozen @ x + site.bias_frozen + site.pair.a @ bx
        return y, SiteCache(site=site, mode=mode, x=x, bx=bx)
    if mode == "gloria":
        if c is None:
            raise ConsistencyError("gloria mode requires a coordinate")
        gc = gate_forward_cached(site.gate, c)
        bx = site.pair.b @ x
        y = site.w_frozen @ x + site.bias_frozen + site.pair.a @ (gc.gamma * bx)
        return y, SiteCache(site=site, mode=mode, x=x, bx=bx, gate=gc)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class SiteGrads:
    """Gradients per trainable tensor plus dL/dx for chaining; frozen tensors
    appear only in full mode."""

    dx: np.ndarray
    da: np.ndarray | None = None
    db: np.ndarray | None = None
    dw1: np.ndarray | None = None
    db1: np.ndarray | None = None
    dw2: np.ndarray | None = None
    db2: np.ndarray | None = None
    dw: np.ndarray | None = None
    dbias: np.ndarray | None = None


def site_backward(site: GloriaSite, cache: SiteCache, upstream: np.ndarray,
                  lam_orth: float = 0.0, lam_sp: float = 0.0) -> SiteGrads:
    """Analytic gradients through one site.

    `lam_sp` here is the per-site weight (the model divides the global
    coefficient by the site count). Orthonormality gradients are added to
    dA/dB; sparsity flows into the gate parameters through gamma.
    """
    if cache.site is not site:
        raise ConsistencyError("site_backward: cache was produced by a different site")
    u = check_vector(upstream, "upstream")
    if u.size != site.d_out:
        raise DimensionError(f"upstream has {u.size} dims, site emits {site.d_out}")
    mode = cache.mode

    if mode == "frozen":
        return SiteGrads(dx=site.w_frozen.T @ u)
    if mode == "full":
        return SiteGrads(dx=site.w_frozen.T @ u, dw=np.outer(u, cache.x), dbias=u.copy())

    if mode == "lora":
        da = np.outer(u, cache.bx)
        dbx = site.pair.a.T @ u
        db = np.outer(dbx, cache.x)
        dx = site.w_frozen.T @ u + site.pair.b.T @ dbx
        if lam_orth != 0.0:
            ga, gb = orth_loss_grads(site.pair)
            da += lam_orth * ga
            db += lam_orth * gb
        return SiteGrads(dx=dx, da=da, db=db)

    # gloria
    gc = cache.gate
    z = gc.gamma * cache.bx
    da = np.outer(u, z)
    dz = site.pair.a.T @ u
    dgamma = dz * cache.bx
    dbx = dz * gc.gamma
    db = np.outer(dbx, cache.x)
    dx = site.w_frozen.T @ u + site.pair.b.T @ dbx
    if lam_sp != 0.0:
        dgamma = dgamma + lam_sp * sparsity_loss_grad(gc.gamma)
    if lam_orth != 0.0:
        ga, gb = orth_loss_grads(site.pair)
        da += lam_orth * ga
        db += lam_orth * gb
    dg_pre = dgamma * sigmoid(gc.g_pre)
    dw2 = np.outer(dg_pre, gc.h)
    db2 = dg_pre
    dh = site.gate.w2.T @ dg_pre
    dh_pre = dh * gelu_grad(gc.h_pre)
    dw1 = np.outer(dh_pre, gc.c)
    db1 = dh_pre
    return SiteGrads(dx=dx, da=da, db=db, dw1=dw1, db1=db1, dw2=dw2, db2=db2)


@dataclass
class ParamCount:
    trainable: int
    frozen: int
    gate: int
    low_rank: int

    @property
    def fraction(self) -> float:
        return self.trainable / (self.trainable + self.frozen)


def param_count(d_in: int, d_out: int, rank: int, hidden: int,
                n_sites: int = 1, gated: bool = True) -> ParamCount:
    """Trainable/frozen counts for `n_sites` identical sites."""
    if min(d_in, d_out, rank, hidden, n_sites) < 1:
        raise DimensionError("param_count: all dimensions must be >= 1")
    low_rank = d_out * rank + rank * d_in
    gate = (2 * hidden + hidden) + (hidden * rank + rank) if gated else 0
    frozen = d_out * d_in + d_out
    return ParamCount(
        trainable=n_sites * (low_rank + gate),
        frozen=n_sites * frozen,
        gate=n_sites * gate,
        low_rank=n_sites * low_rank,
    )


# --- serialization ---------------------------------------------------------

_SITE_FILES = {
    "w": "w_frozen.txt",
    "bias": "bias_frozen.txt",
    "a": "a.txt",
    "b": "b.txt",
    "gate_w1": "gate_w1.txt",
    "gate_b1": "gate_b1.txt",
    "gate_w2": "gate_w2.txt",
    "gate_b2": "gate_b2.txt",
}


def save_site(site: GloriaSite, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_matrix(site.w_frozen, os.path.join(dirpath, _SITE_FILES["w"]))
    save_vector(site.bias_frozen, os.path.join(dirpath, _SITE_FILES["bias"]))
    save_matrix(site.pair.a, os.path.join(dirpath, _SITE_FILES["a"]))
    save_matrix(site.pair.b, os.path.join(dirpath, _SITE_FILES["b"]))
    save_matrix(site.gate.w1, os.path.join(dirpath, _SITE_FILES["gate_w1"]))
    save_vector(site.gate.b1, os.path.join(dirpath, _SITE_FILES["gate_b1"]))
    save_matrix(site.gate.w2, os.path.join(dirpath, _SITE_FILES["gate_w2"]))
    save_vector(site.gate.b2, os.path.join(dirpath, _SITE_FILES["gate_b2"]))
    with open(os.path.join(dirpath, "manifest.txt"), "w") as fh:
        fh.write(f"d_in={site.d_in}\nd_out={site.d_out}\n")
        fh.write(f"rank={site.rank}\nhidden={site.gate.hidden}\n")


def load_site(dirpath) -> GloriaSite:
    return GloriaSite(
        w_frozen=load_matrix(os.path.join(dirpath, _SITE_FILES["w"])),
        bias_frozen=load_vector(os.path.join(dirpath, _SITE_FILES["bias"])),
        pair=LowRankPair(
            a=load_matrix(os.path.join(dirpath, _SITE_FILES["a"])),
            b=load_matrix(os.path.join(dirpath, _SITE_FILES["b"])),
        ),
        gate=GateMlp(
            w1=load_matrix(os.path.join(dirpath, _SITE_FILES["gate_w1"])),
            b1=load_vector(os.path.join(dirpath, _SITE_FILES["gate_b1"])),
            w2=load_matrix(os.path.join(dirpath, _SITE_FILES["gate_w2"])),
            b2=load_vector(os.path.join(dirpath, _SITE_FILES["gate_b2"])),
        ),
    )
