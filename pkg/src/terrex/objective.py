"""Chamfer losses with mask penalty, spread penalty, and evaluation metrics.

All distances are unsquared Euclidean. Nearest-neighbour assignments are
computed once per evaluation and held fixed when differentiating, which
gives a valid subgradient at ties; coincident pairs contribute zero.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from terrex.cloud import PointCloud
from terrex.dataset import BevMaskSet, points_in_masks
from terrex.errors import ConfigError, DomainError
from terrex.sampling import KdIndex, pairwise_distances

HISTOGRAM_EDGES = (0.4, 0.8, 1.2, 1.6, 2.0)
_CHUNK_ELEMS = 4_000_000


def _xyz(c) -> np.ndarray:
    if isinstance(c, PointCloud):
        return c.as_float64()
    return np.asarray(c, dtype=np.float64).reshape(-1, 3)


def nearest(src: np.ndarray, dst: np.ndarray):
    """For each row of ``src`` the distance to, and index of, its nearest ``dst`` row."""
    if len(src) == 0 or len(dst) == 0:
        raise DomainError("nearest-neighbour query between empty sets")
    rows = max(1, _CHUNK_ELEMS // len(dst))
    dist = np.empty(len(src))
    idx = np.empty(len(src), dtype=np.int64)
    for s in range(0, len(src), rows):
        m = pairwise_distances(src[s:s + rows], dst)
        j = np.argmin(m, axis=1)
        idx[s:s + rows] = j
        dist[s:s + rows] = m[np.arange(len(j)), j]
    return dist, idx


@dataclass(frozen=True)
class LossConfig:
    delta: float = 5.0
    alpha: float = 1.0
    beta: float = 1.0
    spread_weight: float = 0.0
    spread_k: int = 4
    spread_margin: float = 0.25

    def __post_init__(self):
        if not self.delta >= 1:
            raise ConfigError("delta must be >= 1")
        if min(self.alpha, self.beta, self.spread_weight) < 0:
            raise ConfigError("alpha, beta and spread_weight must be non-negative")
        if self.spread_k < 1:
            raise ConfigError("spread_k must be >= 1")
        if self.spread_margin < 0:
            raise ConfigError("spread_margin must be non-negative")


def chamfer(P, G):
    """Symmetric Chamfer distance. Returns ``(value, (p_to_g, g_to_p))``."""
    p, g = _xyz(P), _xyz(G)
    if len(p) == 0 or len(g) == 0:
        raise DomainError("chamfer distance of an empty set")
    d_pg, _ = nearest(p, g)
    d_gp, _ = nearest(g, p)
    return float(d_pg.mean() + d_gp.mean()), (d_pg, d_gp)


def mask_weights(P, masks: Optional[BevMaskSet], delta: float) -> np.ndarray:
    p = _xyz(P)
    if masks is None or delta == 1.0:
        return np.ones(len(p))
    return np.where(points_in_masks(masks, p), 1.0, float(delta))


def masked_chamfer(P, Y, masks: Optional[BevMaskSet], cfg: LossConfig = LossConfig()):
    """Chamfer with predictions outside the masks costing ``delta`` times more.

    Returns ``(value, weights)`` where ``weights`` is the per-prediction
    multiplier (1 inside a mask, delta outside).
    """
    p, y = _xyz(P), _xyz(Y)
    if len(p) == 0 or len(y) == 0:
        raise DomainError("masked chamfer of an empty set")
    w = mask_weights(p, masks, cfg.delta)
    d_py, _ = nearest(p, y)
    d_yp, _ = nearest(y, p)
    value = cfg.alpha * float(np.mean(w * d_py)) + cfg.beta * float(d_yp.mean())
    return value, w


def _spread_pairs(p: np.ndarray, k: int):
    d = pairwise_distances(p, p)
    np.fill_diagonal(d, np.inf)
    k = min(k, len(p) - 1)
    nb = np.argsort(d, axis=1, kind="stable")[:, :k]
    return nb, np.take_along_axis(d, nb, axis=1)


def spread_penalty(P, cfg: LossConfig = LossConfig()) -> float:
    """Hinge on distances to each prediction's nearest fellow predictions."""
    p = _xyz(P)
    if cfg.spread_weight == 0 or len(p) < 2:
        return 0.0
    _, d = _spread_pairs(p, cfg.spread_k)
    hinge = np.maximum(0.0, cfg.spread_margin - d)
    return cfg.spread_weight * float(hinge.mean(axis=1).mean())


def loss(P, Y, masks: Optional[BevMaskSet], cfg: LossConfig = LossConfig()) -> float:
    return masked_chamfer(P, Y, masks, cfg)[0] + spread_penalty(P, cfg)


def _unit(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    out = np.zeros_like(diff)
    nz = dist > 0
    out[nz] = diff[nz] / dist[nz, None]
    return out


def loss_and_grad(P, Y, masks: Optional[BevMaskSet], cfg: LossConfig = LossConfig(),
                  weights: Optional[np.ndarray] = None, parts: bool = False):
    """Loss value and its gradient with respect to the prediction coordinates.

    ``weights`` overrides the mask multipliers (they are piecewise constant in
    P, so callers doing finite differences pin them). With ``parts`` the
    gradient is returned as a dict of per-term contributions.
    """
    p, y = _xyz(P), _xyz(Y)
    if len(p) == 0 or len(y) == 0:
        raise DomainError("loss of an empty set")
    w = mask_weights(p, masks, cfg.delta) if weights is None else np.asarray(weights)
    n_p, n_y = len(p), len(y)

    d_py, j_py = nearest(p, y)
    d_yp, j_yp = nearest(y, p)
    value = cfg.alpha * float(np.mean(w * d_py)) + cfg.beta * float(d_yp.mean())

    g_fwd = (cfg.alpha / n_p) * w[:, None] * _unit(p - y[j_py], d_py)
    g_bwd = np.zeros_like(p)
    np.add.at(g_bwd, j_yp, (cfg.beta / n_y) * _unit(p[j_yp] - y, d_yp))

    g_spread = np.zeros_like(p)
    if cfg.spread_weight > 0 and n_p >= 2:
        nb, d = _spread_pairs(p, cfg.spread_k)
        k = nb.shape[1]
        active = (cfg.spread_margin - d) > 0
        value += cfg.spread_weight * float(
            np.maximum(0.0, cfg.spread_margin - d).mean(axis=1).mean())
        coef = -(cfg.spread_weight / (n_p * k)) * active
        i_idx = np.repeat(np.arange(n_p), k)
        diff = p[i_idx] - p[nb.ravel()]
        u = _unit(diff, d.ravel()) * coef.ravel()[:, None]
        np.add.at(g_spread, i_idx, u)
        np.add.at(g_spread, nb.ravel(), -u)

    grad = g_fwd + g_bwd + g_spread
    if parts:
        return value, {"forward": g_fwd, "backward": g_bwd, "spread": g_spread}
    return value, grad


# -------------------------------------------------------------------- metrics


def membership(gt=None, masks: Optional[BevMaskSet] = None, rho: float = 0.2,
               mode: str = "either") -> Callable[[np.ndarray], np.ndarray]:
    """Ground-truth region test used by :func:`metric_accuracy`.

    ``mode`` is "proximity" (within ``rho`` of a ground-truth point), "mask"
    (inside the BEV masks) or "either".
    """
    if mode not in ("proximity", "mask", "either"):
        raise ConfigError(f"unknown membership mode {mode!r}")
    use_prox = mode in ("proximity", "either")
    use_mask = mode in ("mask", "either")
    if use_prox and gt is None:
        raise ConfigError("proximity membership needs ground-truth points")
    if use_mask and masks is None:
        if mode == "mask":
            raise ConfigError("mask membership needs a mask set")
        use_mask = False
    index = KdIndex(PointCloud(_xyz(gt))) if use_prox else None

    def f(pts: np.ndarray) -> np.ndarray:
        pts = _xyz(pts)
        hit = np.zeros(len(pts), dtype=bool)
        if use_prox and not index.empty:
            hit |= index.nearest_distances(pts) <= rho
        if use_mask:
            hit |= points_in_masks(masks, pts)
        return hit

    return f


def metric_accuracy(P, gt_region: Callable[[np.ndarray], np.ndarray]) -> float:
    """Percentage of predictions that land in the ground-truth region."""
    p = _xyz(P)
    if len(p) == 0:
        raise DomainError("accuracy of an empty prediction set")
    return 100.0 * float(np.count_nonzero(gt_region(p))) / len(p)


def metric_cd_pt(P, G) -> float:
    """Mean distance from each prediction to its nearest ground-truth point."""
    p, g = _xyz(P), _xyz(G)
    if len(p) == 0 or len(g) == 0:
        raise DomainError("cd_pt of an empty set")
    return float(nearest(p, g)[0].mean())


def metric_cd_gt(G, P) -> float:
    """The other Chamfer term: mean distance from ground truth to predictions."""
    return metric_cd_pt(G, P)


def metric_cd_histogram(G, P, edges: Sequence[float] = HISTOGRAM_EDGES) -> np.ndarray:
    """Percent of ground-truth points whose nearest prediction falls in each bin.

    Bins are ``[0, e1), [e1, e2), ...`` plus a final overflow bin ``[e_last, inf)``.
    """
    g, p = _xyz(G), _xyz(P)
    if len(g) == 0 or len(p) == 0:
        raise DomainError("histogram of an empty set")
    e = np.asarray(edges, dtype=np.float64)
    if len(e) == 0 or np.any(np.diff(e) <= 0) or e[0] <= 0:
        raise ConfigError("histogram edges must be positive and strictly increasing")
    d = nearest(g, p)[0]
    bins = np.searchsorted(e, d, side="right")
    counts = np.bincount(bins, minlength=len(e) + 1)
    return 100.0 * counts / len(g)


# --------------------------------------------------------------------- report


@dataclass
class SceneMetrics:
    scene_id: str
    acc: float = float("nan")
    cd_pt: float = float("nan")
    histogram: list = field(default_factory=list)
    n_pred: int = 0
    n_gt: int = 0
    error: Optional[str] = None


def evaluate_scene(scene_id: str, P, Y, masks: Optional[BevMaskSet] = None,
                   edges: Sequence[float] = HISTOGRAM_EDGES, rho: float = 0.2,
                   mode: str = "either") -> SceneMetrics:
    f = membership(Y, masks, rho=rho, mode=mode)
    return SceneMetrics(
        scene_id=scene_id,
        acc=metric_accuracy(P, f),
        cd_pt=metric_cd_pt(P, Y),
        histogram=metric_cd_histogram(Y, P, edges).tolist(),
        n_pred=len(_xyz(P)),
        n_gt=len(_xyz(Y)),
    )


def _round_to_total(values: Sequence[float], decimals: int = 2) -> list:
    """Round percentages so the displayed row still sums to its exact total."""
    scale = 10 ** decimals
    raw = np.asarray(values, dtype=np.float64) * scale
    floor = np.floor(raw)
    short = int(round(raw.sum() - floor.sum()))
    order = np.argsort(-(raw - floor), kind="stable")
    floor[order[:short]] += 1
    return (floor / scale).tolist()


@dataclass
class MetricReport:
    edges: tuple = HISTOGRAM_EDGES
    rows: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(r.error for r in self.rows)

    def to_json(self) -> str:
        doc = {
            "edges": list(self.edges),
            "scenes": {
                r.scene_id: {
                    "acc": r.acc, "cd_pt": r.cd_pt, "histogram": r.histogram,
                    "n_pred": r.n_pred, "n_gt": r.n_gt, "error": r.error,
                } for r in self.rows
            },
        }
        return json.dumps(doc, indent=2, allow_nan=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scene", "acc", "cd_pt", *[f"{e:g}" for e in self.edges],
                    f">{self.edges[-1]:g}", "n_pred", "n_gt", "error"])
        for r in self.rows:
            hist = r.histogram or [""] * (len(self.edges) + 1)
            w.writerow([r.scene_id, f"{r.acc:.4f}", f"{r.cd_pt:.6f}",
                        *[h if h == "" else f"{h:.4f}" for h in hist],
                        r.n_pred, r.n_gt, r.error or ""])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("scene")] + [len(r.scene_id) for r in self.rows]) + 2
        out = ["Accuracy and cd_pt of predicted terrain",
               f"{'scene':<{width}}{'acc':>8}{'cd_pt':>8}"]
        for r in self.rows:
            if r.error:
                out.append(f"{r.scene_id:<{width}}  error: {r.error}")
            else:
                out.append(f"{r.scene_id:<{width}}{r.acc:>8.2f}{r.cd_pt:>8.3f}")
        out.append("")
        out.append("Histogram of CD, ground truth to prediction (percent)")
        heads = [f"{e:g}" for e in self.edges] + [f">{self.edges[-1]:g}"]
        out.append(f"{'scene':<{width}}" + "".join(f"{h:>8}" for h in heads))
        for r in self.rows:
            if r.error:
                continue
            cells = _round_to_total(r.histogram)
            out.append(f"{r.scene_id:<{width}}" + "".join(f"{c:>8.2f}" for c in cells))
        return "\n".join(out) + "\n"


def assemble_report(scenes: Sequence[SceneMetrics],
                    edges: Sequence[float] = HISTOGRAM_EDGES) -> MetricReport:
    return MetricReport(tuple(edges), sorted(scenes, key=lambda r: r.scene_id))
