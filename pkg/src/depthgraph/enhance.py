"""Whole-image enhancement: layering, row-by-row metric learning and MAP solves."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .forward import DepthImage, NoiseModel, QuantizerParams
from .graph import N_FEATURES, learn_metric, pixel_features
from .layering import LayerMap, layer_variance, segment_layers
from .solver import RowData, SolverConfig, enhance_row

__all__ = ["PreparedView", "RowLog", "EnhanceResult", "prepare_view", "enhance_view", "enhance_pair"]

log = logging.getLogger(__name__)


@dataclass
class PreparedView:
    img: DepthImage
    layers: LayerMap
    sigma: np.ndarray
    layer_var: np.ndarray
    features: np.ndarray  # from the pre-filtered depth

    @property
    def xhat(self) -> np.ndarray:
        return self.layers.prefiltered


@dataclass
class RowLog:
    row: int
    iterations: int
    objective: float
    learned_metric: bool
    flags: set = field(default_factory=set)


@dataclass
class EnhanceResult:
    image: DepthImage
    metrics: list
    rows: list


def prepare_view(img: DepthImage, q: QuantizerParams, m: NoiseModel, cfg: SolverConfig, seed: int = 0) -> PreparedView:
    """Layer the observed view, pre-filter it and attach per-layer noise variances."""
    layers = layer_variance(segment_layers(img, cfg.k_max, seed), m, strict=False)
    sigma = np.where(img.mask, np.nan_to_num(layers.sigma_map(), nan=1.0), 1.0)
    layer_var = np.array([st.variance for st in layers.stats])
    cx, cy = img.principal_point
    feats = pixel_features(np.where(img.mask, layers.prefiltered, 0.0), img.mask, img.focal, cx, cy, q.x_max)
    return PreparedView(img, layers, sigma, layer_var, feats)


def _row(view: PreparedView, r: int, features=None) -> RowData:
    return RowData(
        view.img.values[r],
        view.img.mask[r],
        view.xhat[r],
        view.layers.labels[r],
        view.sigma[r],
        view.layer_var,
        view.features[r] if features is None else features,
    )


def enhance_view(
    primary: PreparedView,
    other: PreparedView | None,
    q: QuantizerParams,
    cfg: SolverConfig = SolverConfig(),
    direction: int = -1,
    metrics=None,
) -> EnhanceResult:
    """Enhance ``primary`` top to bottom.

    Without ``metrics`` the metric for row ``r`` is learned from the ``K``
    previously enhanced rows; the first ``K`` rows use the identity.  A
    given ``metrics`` list (one matrix per row) is used as is.
    """
    img = primary.img
    cx, cy = img.principal_point
    work = np.where(img.mask, primary.xhat, 0.0)
    history: list = []
    used: list = []
    logs: list = []
    M = np.eye(N_FEATURES)
    for r in range(img.height):
        learned = False
        if metrics is not None:
            M = metrics[r]
        elif r >= cfg.K:
            res = learn_metric(history[-cfg.K :], maxiter=cfg.metric_iters, M0=M)
            M, learned = res.M, True
        used.append(M)
        # current row: pre-filtered depth, rows above already enhanced
        feats = pixel_features(work, img.mask, img.focal, cx, cy, q.x_max, rows=[r])[0]
        res_row = enhance_row(_row(primary, r, feats), None if other is None else _row(other, r), M, q, img.focal, img.baseline, cfg, direction)
        work[r] = np.where(img.mask[r], res_row.x, 0.0)
        sel = img.mask[r]
        if sel.sum() >= 2:
            f_done = pixel_features(work, img.mask, img.focal, cx, cy, q.x_max, rows=[r])[0]
            history.append((work[r, sel], f_done[sel]))
        logs.append(RowLog(r, res_row.iterations, res_row.objective, learned, res_row.flags))
        log.info("row %d: %d AGD iterations, objective %.6g", r, res_row.iterations, res_row.objective)
    out = img.with_values(work, img.mask)
    return EnhanceResult(out, used, logs)


def enhance_pair(
    left: DepthImage,
    right: DepthImage,
    q: QuantizerParams,
    m: NoiseModel,
    cfg: SolverConfig = SolverConfig(),
    seed: int = 0,
):
    """Enhance both views; the right view reuses the metrics learned on the left."""
    pl = prepare_view(left, q, m, cfg, seed)
    pr = prepare_view(right, q, m, cfg, seed)
    res_l = enhance_view(pl, pr, q, cfg, direction=-1)
    res_r = enhance_view(pr, pl, q, cfg, direction=+1, metrics=res_l.metrics)
    return res_l, res_r, (pl, pr)
