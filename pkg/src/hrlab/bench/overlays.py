"""Bound overlays and growth-shape fits for regret traces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from ..hlml import compare_ratio, flat_lower_bound, hlml_overlay
from ..oucbvi import smdp_log_term, oucbvi_overlay
from .envs import EnvironmentBundle

OVERLAY_CONSTANTS = {"oucbvi_overlay": 1.0, "hlml_overlay": 1.0, "flat_lower_bound": 1.0, "logs": "explicit"}


def emit_overlays(rows: Sequence[dict[str, Any]], env: EnvironmentBundle, algorithm: str, K: int | None = None, delta: float | None = None) -> tuple[list[dict[str, Any]], list[str]]:
    """Append overlay columns to trace rows.

    Returns the extended rows and a list of flags for overlays that could not be
    computed (missing measured ``d`` or concentrability columns).
    """
    if not rows:
        return [], []
    model, opts = env.model, env.options
    H, S, A, O = model.H, model.S, model.A, opts.O
    H_O = opts.H_max
    K = K or len(rows)
    delta = delta or env.delta
    L = smdp_log_term(S, O, K, H, delta)
    alpha = min(H_O / H, 1.0)
    k = np.arange(1, len(rows) + 1, dtype=np.float64)
    flags: list[str] = []
    out = [dict(r) for r in rows]
    lb = flat_lower_bound(k, S, A, H)
    for r, v in zip(out, lb):
        r["flat_lower_bound"] = float(v)
    d = _measured_d(rows, H, algorithm)
    if d is None:
        flags.append("overlay_oucbvi: missing d")
        flags.append("overlay_thm3: missing d")
        return out, flags
    o1 = oucbvi_overlay(k, H, S, O, d, L)
    for r, v in zip(out, o1):
        r["overlay_oucbvi"] = float(v)
    if all("C_H_running" in r and "C_L_running" in r for r in rows):
        ch = np.array([float(r["C_H_running"]) for r in rows])
        cl = np.array([float(r["C_L_running"]) for r in rows])
        o3 = hlml_overlay(k, H, S, O, A, H_O, d, L, ch, cl)
        for i, r in enumerate(out):
            r["overlay_thm3"] = float(o3[i])
            ok = np.isfinite(ch[i]) and np.isfinite(cl[i])
            r["ratio_eq12"] = compare_ratio(S, A, O, H, float(d[i]), alpha, ch[i], cl[i]) if ok else float("nan")
    else:
        flags.append("overlay_thm3: missing C columns")
    return out, flags


def _measured_d(rows: Sequence[dict[str, Any]], H: int, algorithm: str) -> np.ndarray | None:
    if all("d_running" in r for r in rows):
        return np.array([float(r["d_running"]) for r in rows])
    if all("decisions" in r for r in rows):
        dec = np.array([float(r["decisions"]) for r in rows])
        return np.cumsum(dec) / np.arange(1, len(dec) + 1)
    if algorithm == "ucbvi-flat":
        return np.full(len(rows), float(H))
    return None


@dataclass
class GrowthFit:
    c_sqrt: float
    c_lin: float
    aic_sqrt: float
    aic_lin: float

    @property
    def prefers_sqrt(self) -> bool:
        return self.aic_sqrt < self.aic_lin


def fit_growth(curve: np.ndarray) -> GrowthFit:
    """Least-squares fits ``c sqrt(k)`` and ``c k`` to a cumulative curve, compared by AIC."""
    y = np.asarray(curve, dtype=np.float64)
    k = np.arange(1, y.size + 1, dtype=np.float64)
    n = y.size

    def fit(x: np.ndarray) -> tuple[float, float]:
        c = float(x @ y / (x @ x))
        rss = float(((y - c * x) ** 2).sum())
        aic = n * math.log(max(rss, 1e-300) / n) + 2
        return c, aic

    cs, a_s = fit(np.sqrt(k))
    cl, a_l = fit(k)
    return GrowthFit(cs, cl, a_s, a_l)
