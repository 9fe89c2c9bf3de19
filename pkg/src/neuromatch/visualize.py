"""Diagnostics: gradient-weighted activation heatmaps per channel, exact
t-SNE of paired features, and self-contained SVG plot emitters.

SVG is the only plot format: textual, diffable, no plotting dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import tensor as T
from .encoder import Model, embed
from .tensor import Tensor

EXAGGERATION_ITERS = 100
MOMENTUM_SWITCH_ITER = 250
_TSNE_P_FLOOR = 1e-12


class VisualizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# activation heatmaps


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-convention bilinear resampling with edge clamping."""
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def cam_from_features(features: np.ndarray, grads: np.ndarray, grid: int,
                      out_h: int, out_w: int) -> np.ndarray:
    """Weights = spatially averaged gradients; map = ReLU(weighted features),
    bilinear-resized and min-max normalized. Constant maps fall back to zero.
    """
    features = np.asarray(features, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if features.shape != grads.shape:
        raise VisualizationError("features and gradients must share a shape")
    if features.shape[0] != grid * grid:
        raise VisualizationError(f"{features.shape[0]} tokens do not fill a {grid}x{grid} grid")
    weights = grads.mean(axis=0)
    cam = np.maximum(features @ weights, 0.0).reshape(grid, grid)
    cam = bilinear_resize(cam, out_h, out_w)
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo <= 0.0:
        return np.zeros((out_h, out_w))
    return (cam - lo) / (hi - lo)


def grad_cam(model: Model, image: np.ndarray, channel: str) -> np.ndarray:
    """Heatmap over the input for one channel's final attention block.

    The scalar objective is the squared norm of the fused embedding before
    unit normalization (the normalized embedding has constant norm, hence
    zero gradient).
    """
    if channel not in ("local", "global"):
        raise VisualizationError(f"channel must be 'local' or 'global', got {channel!r}")
    cfg = model.config
    if channel == "local" and not cfg.uses_local:
        raise VisualizationError("model has no local channel")
    if channel == "global" and not cfg.uses_global:
        raise VisualizationError("model has no global channel")

    trace: dict[str, Tensor] = {}
    with T.Tape() as tape:
        # normalization is dropped from the objective, not from the model:
        # re-run the fusion pieces up to the pre-norm vector
        from .encoder import gate_fuse, global_channel, local_channel  # cycle-free

        img_t = Tensor(np.asarray(image, dtype=np.float64))
        if cfg.channels == "both":
            f_l = local_channel(img_t, model, trace)
            f_g = global_channel(img_t, model, trace)
            p = model.params
            z = T.concat_last_dim([f_l, f_g])
            g = T.sigmoid(T.add(T.matmul(z, p["gate.weight"]), p["gate.bias"]))
            one_minus = T.add(T.constant(np.ones(g.shape)), T.scale(g, -1.0))
            pre_norm = T.add(T.mul(g, f_l), T.mul(one_minus, f_g))
        elif cfg.channels == "local":
            pre_norm = local_channel(img_t, model, trace)
        else:
            pre_norm = global_channel(img_t, model, trace)
        objective = T.sum_all(T.mul(pre_norm, pre_norm))
        target = trace[channel]
        grads = T.backprop(tape, objective, wanted={target.node_id})
    token_grads = grads[target.node_id].data
    side = cfg.local_crop if channel == "local" else cfg.image_size
    grid = side // cfg.patch_size
    return cam_from_features(target.data, token_grads, grid,
                             cfg.image_size, cfg.image_size)


# ---------------------------------------------------------------------------
# colormap + overlay

_COLORMAP = np.stack([
    np.linspace(0.0, 1.0, 256),          # R ramps up
    np.zeros(256),                        # G stays flat
    np.linspace(1.0, 0.0, 256),          # B ramps down
], axis=1)


def colormap_blue_red(values: np.ndarray) -> np.ndarray:
    """Lookup into the fixed 256-entry blue-to-red ramp; values in [0,1]."""
    idx = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(int)
    return _COLORMAP[idx]


def overlay(heatmap: np.ndarray, image: np.ndarray, blend_alpha: float) -> np.ndarray:
    """blend_alpha * colormap(heatmap) + (1 - blend_alpha) * gray(image)."""
    if not 0.0 <= blend_alpha <= 1.0:
        raise VisualizationError(f"blend_alpha must be in [0, 1], got {blend_alpha}")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if heatmap.shape != image.shape:
        raise VisualizationError(f"shapes differ: {heatmap.shape} vs {image.shape}")
    color = colormap_blue_red(heatmap)
    gray = np.repeat(image[:, :, None], 3, axis=2)
    return blend_alpha * color + (1.0 - blend_alpha) * gray


# ---------------------------------------------------------------------------
# exact t-SNE


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 10.0
    iterations: int = 1000
    learning_rate: float = 100.0
    early_exaggeration: float = 4.0
    seed: int = 0


def _conditional_probabilities(d2: np.ndarray, perplexity: float,
                               tol: float = 1e-4) -> np.ndarray:
    """Row-stochastic P(j|i) with per-point precision found by bisection so
    2^entropy matches the target perplexity within tol."""
    n = d2.shape[0]
    p = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        lo, hi = 0.0, math.inf
        beta = 1.0
        for _ in range(200):
            w = np.exp(-row * beta)
            s = w.sum()
            if s <= 0:
                prob = np.full(row.size, 1.0 / row.size)
            else:
                prob = w / s
            nz = prob[prob > 0]
            entropy_bits = float(-(nz * np.log2(nz)).sum())
            perp = 2.0**entropy_bits
            if abs(perp - perplexity) <= tol:
                break
            if perp > perplexity:
                lo = beta
                beta = beta * 2.0 if hi is math.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (lo + beta) / 2.0
        p[i, np.arange(n) != i] = prob
    return p


def tsne(features: np.ndarray, config: TsneConfig,
         return_history: bool = False):
    """Exact (quadratic) t-SNE to 2-D with early exaggeration and the
    0.5 -> 0.8 momentum schedule; deterministic given config.seed."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise VisualizationError("t-SNE needs at least 4 points")
    if not config.perplexity < (n - 1) / 3.0:
        raise VisualizationError(
            f"perplexity {config.perplexity} infeasible for {n} points "
            f"(needs perplexity < {(n - 1) / 3.0:.2f})"
        )
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    p_cond = _conditional_probabilities(d2, config.perplexity)
    p = (p_cond + p_cond.T) / (2.0 * n)
    p = np.maximum(p, _TSNE_P_FLOOR)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**63 - 1), 0x7453]))
    y = rng.normal(0.0, 1e-4, (n, 2))
    vel = np.zeros_like(y)
    history: list[float] = []
    eye = np.eye(n, dtype=bool)

    for it in range(config.iterations):
        p_eff = p * config.early_exaggeration if it < EXAGGERATION_ITERS else p
        diff = y[:, None, :] - y[None, :, :]
        num = 1.0 / (1.0 + (diff**2).sum(axis=2))
        num[eye] = 0.0
        q = np.maximum(num / num.sum(), _TSNE_P_FLOOR)
        grad = 4.0 * (((p_eff - q) * num)[:, :, None] * diff).sum(axis=1)
        momentum = 0.5 if it < MOMENTUM_SWITCH_ITER else 0.8
        vel = momentum * vel - config.learning_rate * grad
        y = y + vel
        y = y - y.mean(axis=0)
        if return_history:
            history.append(float((p * np.log(p / q)).sum()))
    return (y, history) if return_history else y


# ---------------------------------------------------------------------------
# SVG emission

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 64, 24, 36, 48


def _scaler(lo: float, hi: float, out_lo: float, out_hi: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: out_lo + (v - lo) / span * (out_hi - out_lo)


def _axes(title: str, xlabel: str, ylabel: str, xlo, xhi, ylo, yhi) -> list[str]:
    sx = _scaler(xlo, xhi, _ML, _W - _MR)
    sy = _scaler(ylo, yhi, _H - _MB, _MT)
    parts = [
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {_H / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        xv = xlo + (xhi - xlo) * i / 4
        yv = ylo + (yhi - ylo) * i / 4
        parts.append(f'<text x="{sx(xv):.1f}" y="{_H - _MB + 16}" text-anchor="middle" '
                     f'font-size="10">{xv:.3g}</text>')
        parts.append(f'<text x="{_ML - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" '
                     f'font-size="10">{yv:.3g}</text>')
    return parts


def _polyline(xs, ys, sx, sy, color: str, klass: str | None = None) -> str:
    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    cls = f' class="{klass}"' if klass else ""
    return f'<polyline{cls} fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def _svg_doc(parts: list[str]) -> str:
    body = "\n".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">\n<rect width="{_W}" height="{_H}" fill="white"/>\n'
            f"{body}\n</svg>\n")


def _topk_svg(data: dict) -> str:
    series = data["series"]
    if not series:
        raise VisualizationError("topk_curve needs at least one series")
    k_max = max(len(s["accuracy"]) for s in series)
    parts = _axes(data.get("title", "Top-K accuracy"), "k", "accuracy", 1, k_max, 0.0, 1.0)
    sx = _scaler(1, k_max, _ML, _W - _MR)
    sy = _scaler(0.0, 1.0, _H - _MB, _MT)
    for idx, s in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        ks = list(range(1, len(s["accuracy"]) + 1))
        parts.append(_polyline(ks, s["accuracy"], sx, sy, color, klass="topk-series"))
        parts.append(f'<text x="{_W - _MR - 6}" y="{_MT + 14 * (idx + 1)}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{escape(str(s["label"]))}</text>')
    return _svg_doc(parts)


def _kde_pair_svg(data: dict) -> str:
    (px, pd), (nx, nd) = data["pos"], data["neg"]
    xlo = min(float(np.min(px)), float(np.min(nx)))
    xhi = max(float(np.max(px)), float(np.max(nx)))
    yhi = max(float(np.max(pd)), float(np.max(nd)))
    parts = _axes(data.get("title", "Similarity density"), data.get("xlabel", "similarity"),
                  "density", xlo, xhi, 0.0, yhi)
    sx = _scaler(xlo, xhi, _ML, _W - _MR)
    sy = _scaler(0.0, yhi, _H - _MB, _MT)
    parts.append(_polyline(px, pd, sx, sy, "#1f77b4", klass="kde-pos"))
    parts.append(_polyline(nx, nd, sx, sy, "#ff7f0e", klass="kde-neg"))
    parts.append(f'<text x="{_W - _MR - 6}" y="{_MT + 14}" text-anchor="end" font-size="11" '
                 f'fill="#1f77b4">matched</text>')
    parts.append(f'<text x="{_W - _MR - 6}" y="{_MT + 28}" text-anchor="end" font-size="11" '
                 f'fill="#ff7f0e">unmatched</text>')
    return _svg_doc(parts)


def _heatmap_svg(data) -> str:
    m = np.asarray(data["matrix"] if isinstance(data, dict) else data, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise VisualizationError("similarity_heatmap needs a non-empty 2-D matrix")
    lo, hi = float(m.min()), float(m.max())
    norm = (m - lo) / (hi - lo) if hi > lo else np.full_like(m, 0.5)
    rows, cols = m.shape
    cw = (_W - _ML - _MR) / cols
    ch = (_H - _MT - _MB) / rows
    title = data.get("title", "Similarity matrix") if isinstance(data, dict) else "Similarity matrix"
    parts = [f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
             f"{escape(title)}</text>"]
    for i in range(rows):
        for j in range(cols):
            r, g, b = (int(round(255 * c)) for c in colormap_blue_red(norm[i, j]))
            parts.append(f'<rect class="cell" x="{_ML + j * cw:.2f}" y="{_MT + i * ch:.2f}" '
                         f'width="{cw:.2f}" height="{ch:.2f}" fill="rgb({r},{g},{b})"/>')
    parts.append(f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle" '
                 f'font-size="12">gallery index</text>')
    parts.append(f'<text x="16" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 16 {_H / 2:.1f})">query index</text>')
    return _svg_doc(parts)


def _tsne_pairs_svg(data: dict) -> str:
    points = data["points"]
    if not points:
        raise VisualizationError("tsne_pairs needs points")
    xs = [p["x"] for p in points]
    ys = [p["y"] for p in points]
    parts = _axes(data.get("title", "Paired feature embedding"), "dim 1", "dim 2",
                  min(xs), max(xs), min(ys), max(ys))
    sx = _scaler(min(xs), max(xs), _ML, _W - _MR)
    sy = _scaler(min(ys), max(ys), _H - _MB, _MT)
    pair_ids = sorted({p["pair_id"] for p in points})
    color_of = {pid: _PALETTE[i % len(_PALETTE)] for i, pid in enumerate(pair_ids)}
    by_pair: dict = {}
    for p in points:
        by_pair.setdefault(p["pair_id"], []).append(p)
    for pid, members in sorted(by_pair.items()):
        color = color_of[pid]
        if len(members) == 2:
            (a, b) = members
            parts.append(f'<line class="pair-link" x1="{sx(a["x"]):.2f}" y1="{sy(a["y"]):.2f}" '
                         f'x2="{sx(b["x"]):.2f}" y2="{sy(b["y"]):.2f}" stroke="{color}" '
                         f'stroke-width="0.8"/>')
        for p in members:
            filled = p["modality"] == "a"
            fill = color if filled else "none"
            parts.append(f'<circle class="tsne-point" cx="{sx(p["x"]):.2f}" '
                         f'cy="{sy(p["y"]):.2f}" r="4" fill="{fill}" stroke="{color}" '
                         f'stroke-width="1.5"/>')
    parts.append(f'<text x="{_W - _MR - 6}" y="{_MT + 14}" text-anchor="end" font-size="11">'
                 f"filled = modality A, hollow = modality B</text>")
    return _svg_doc(parts)


_PLOT_KINDS = {
    "topk_curve": _topk_svg,
    "kde_pair": _kde_pair_svg,
    "similarity_heatmap": _heatmap_svg,
    "tsne_pairs": _tsne_pairs_svg,
}


def export_plot(kind: str, data, path: str | Path) -> Path:
    """Write one self-contained SVG; see _PLOT_KINDS for the data layouts."""
    try:
        builder = _PLOT_KINDS[kind]
    except KeyError:
        raise VisualizationError(
            f"unknown plot kind {kind!r}; choose from {sorted(_PLOT_KINDS)}"
        ) from None
    try:
        svg = builder(data)
    except (KeyError, TypeError) as e:
        raise VisualizationError(f"data does not match plot kind {kind!r}: {e}") from None
    path = Path(path)
    path.write_text(svg, encoding="utf-8")
    return path
