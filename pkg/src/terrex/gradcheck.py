"""Finite-difference verification of the model's reverse-mode gradients.

Central differences are only meaningful where the loss is smooth. ReLU
masks, max-pool winners and nearest-neighbour assignments are recorded at
each evaluation; a draw whose +-h perturbations change any of them sits on a
kink and is replaced by a fresh draw.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from terrex import autograd as ag
from terrex.cloud import PointCloud
from terrex.dataset import BevMaskSet, BevProjection, TrainingSample
from terrex.model import TINY, ModelConfig, _net, _tensors, init_params, prepare, value_and_grad
from terrex.objective import LossConfig, _spread_pairs, loss_and_grad, nearest

THRESHOLD = 1e-3
MAX_REDRAWS = 200


@dataclass
class GradcheckReport:
    max_error: float = 0.0
    worst_tensor: str = ""
    per_tensor: dict = field(default_factory=dict)
    draws: int = 0
    rejected: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error < THRESHOLD

    def lines(self) -> list:
        out = [f"{name:<16} {err:.3e}" for name, err in self.per_tensor.items()]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"max relative error {self.max_error:.3e} ({self.worst_tensor}) over "
                   f"{self.draws} draws ({self.rejected} near-kink draws replaced): {verdict}")
        return out


def random_problem(cfg: ModelConfig, rng: np.random.Generator):
    """A small random sample whose mask covers only part of the target area."""
    X = rng.uniform([0, 0, -0.2], [4, 2, 0.2], size=(cfg.n_fps + 8, 3))
    Y = rng.uniform([3, 2, -0.2], [5, 6, 0.2], size=(12, 3))
    proj = BevProjection((0.0, 0.0), 0.1, 80, 80)
    masks = BevMaskSet(proj, ([[30, 20], [50, 20], [50, 45], [30, 45]],))
    sample = TrainingSample(PointCloud(X), PointCloud(Y), masks, 1.0, 0, "gradcheck")
    params = OrderedDict(
        (k, v.astype(np.float64) + rng.normal(0.0, 0.2, v.shape))
        for k, v in init_params(cfg, int(rng.integers(2**31))).items())
    return sample, params


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _evaluate(params, sample, cfg, loss_cfg, plan, weights):
    """Loss plus a digest of every discrete choice made while computing it."""
    with ag.record_kinks() as kinks:
        P = _net(plan, _tensors(params, False), cfg).data
    value, _ = loss_and_grad(P, sample.target_cloud, sample.masks, loss_cfg, weights=weights)
    y = sample.target_cloud.as_float64()
    kinks += [nearest(P, y)[1], nearest(y, P)[1]]
    if loss_cfg.spread_weight > 0:
        nb, d = _spread_pairs(P, loss_cfg.spread_k)
        kinks += [nb, d < loss_cfg.spread_margin]
    h = hashlib.sha256()
    for k in kinks:
        h.update(np.ascontiguousarray(k).tobytes())
    return value, h.digest()


def _check_draw(params, sample, cfg, loss_cfg, plan, rng, h, coords_per_tensor, corrupt):
    _, grads, weights = value_and_grad(params, sample, cfg, loss_cfg, plan=plan)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.5 + 1e-3
    _, base = _evaluate(params, sample, cfg, loss_cfg, plan, weights)
    errors = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        num = np.empty(len(picks))
        for j, idx in enumerate(picks):
            keep = flat[idx]
            flat[idx] = keep + h
            up, sig_up = _evaluate(params, sample, cfg, loss_cfg, plan, weights)
            flat[idx] = keep - h
            dn, sig_dn = _evaluate(params, sample, cfg, loss_cfg, plan, weights)
            flat[idx] = keep
            if sig_up != base or sig_dn != base:
                return None
            num[j] = (up - dn) / (2 * h)
        errors[name] = relative_error(grads[name].reshape(-1)[picks], num)
    return errors


def gradcheck(cfg: ModelConfig = TINY, draws: int = 20, seed: int = 0, h: float = 1e-4,
              coords_per_tensor: int = 6, corrupt: Optional[str] = None) -> GradcheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    Every other draw enables the spread penalty so its gradient is covered.
    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed, to exercise the failure path.
    """
    rng = np.random.default_rng(seed)
    report = GradcheckReport(draws=draws)
    done = 0
    while done < draws:
        if report.rejected > MAX_REDRAWS:
            raise RuntimeError("could not find configurations away from kinks")
        sample, params = random_problem(cfg, rng)
        loss_cfg = LossConfig(spread_weight=0.5 if done % 2 else 0.0, spread_margin=1.0)
        plan = prepare(sample.input_cloud, cfg, done)
        errors = _check_draw(params, sample, cfg, loss_cfg, plan, rng, h,
                             coords_per_tensor, corrupt)
        if errors is None:
            report.rejected += 1
            continue
        done += 1
        for name, err in errors.items():
            report.per_tensor[name] = max(report.per_tensor.get(name, 0.0), err)
            if err > report.max_error:
                report.max_error, report.worst_tensor = err, name
    return report
