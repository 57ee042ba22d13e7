"""Finite-difference verification of every analytic gradient.

The oracle perturbs each trainable scalar with a central difference on the
full objective (task loss plus both regularizers) and compares against the
manual backward pass. Kept independent of the backward code path.
"""

from __future__ import annotations

import numpy as np

from . import model as model_mod
from .adapter import Coord
from .matcore import central_diff, make_rng
from .model import ToyBackbone, backbone_backward, backbone_forward, task_loss, total_loss

# Relative error uses a magnitude floor so finite-difference noise on
# near-zero gradients is judged absolutely (at ~1e-7) instead of relatively.
REL_FLOOR = 1e-3


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def _randomize(m: ToyBackbone, rng: np.random.Generator) -> None:
    """Perturb all trainable tensors away from zero-init saddle points."""
    for s in m.sites:
        s.gate.w2 += 0.3 * rng.standard_normal(s.gate.w2.shape)
        s.gate.b2 += 0.3 * rng.standard_normal(s.gate.b2.shape)
        s.gate.b1 += 0.1 * rng.standard_normal(s.gate.b1.shape)


def _loss_at(m: ToyBackbone, x, c, target, lam_orth, lam_sp) -> float:
    pred, cache = backbone_forward(m, x, c)
    return total_loss(task_loss(pred, target), m, cache.gammas(), lam_orth, lam_sp)


def check_instance(m: ToyBackbone, x, c: Coord, target,
                   lam_orth: float, lam_sp: float, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    over every trainable tensor of the model's mode."""
    params = m.trainable_params()
    _, cache = backbone_forward(m, x, c)
    analytic = backbone_backward(m, cache, target, lam_orth, lam_sp)
    worst = 0.0
    for key, p in params.items():
        flat = p.reshape(-1)

        def f(vec, _p=p, _flat=flat):
            saved = _flat.copy()
            _flat[:] = vec
            m.bump_version()
            try:
                return _loss_at(m, x, c, target, lam_orth, lam_sp)
            finally:
                _flat[:] = saved
                m.bump_version()

        fd = central_diff(f, flat.copy(), h)
        ana = analytic[key].reshape(-1)
        for a, b in zip(ana, fd):
            worst = max(worst, rel_err(float(a), float(b)))
    return worst


def run_grad_check(seed: int = 0, d: int = 8, rank: int = 4, n_sites: int = 4,
                   instances: int = 1, hidden: int = 8,
                   lam_orth: float = 0.8, lam_sp: float = 5.0) -> float:
    """Worst relative error across seeded random instances and all modes."""
    worst = 0.0
    for inst in range(instances):
        rng = make_rng(seed * 10007 + inst)
        for mode in ("gloria", "lora", "full"):
            m = model_mod.build_backbone(d, n_sites, rank, hidden, rng, mode=mode)
            _randomize(m, rng)
            x = rng.standard_normal(d)
            target = rng.standard_normal(d)
            c = Coord(rng.uniform(0, 1), rng.uniform(0, 1))
            worst = max(worst, check_instance(m, x, c, target, lam_orth, lam_sp))
    return worst
