"""Independent brute-force reference implementations used to pin expected values.

Everything here is deliberately slow and simple: explicit Python loops and
textbook formulas, sharing no code with the package under test.
"""
from __future__ import annotations

import math

import numpy as np


def mean_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    count = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += abs(x - y)
        count += 1
    return total / count


def naive_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Direct sliding-window 2-D convolution with zero same-padding.

    x: [C_in, H, W]; weight: [C_out, C_in, k, k]; returns [C_out, H, W].
    """
    c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    pad = k // 2
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    out = np.zeros((c_out, h, w))
    for co in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for ci in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += weight[co, ci, di, dj] * xp[ci, i + di, j + dj]
                out[co, i, j] = acc + (bias[co] if bias is not None else 0.0)
    return out


def dice_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    inter = 0
    size_a = 0
    size_b = 0
    for pa, pb in zip(a.ravel().tolist(), b.ravel().tolist()):
        size_a += bool(pa)
        size_b += bool(pb)
        inter += bool(pa) and bool(pb)
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * inter / (size_a + size_b)


def iou_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    inter = 0
    union = 0
    for pa, pb in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += bool(pa) and bool(pb)
        union += bool(pa) or bool(pb)
    if union == 0:
        return 1.0
    return inter / union


def boundary_bruteforce(mask: np.ndarray) -> list[tuple[int, int]]:
    """Foreground pixels with a 4-neighbor background pixel (outside = background)."""
    h, w = mask.shape
    points = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if ni < 0 or nj < 0 or ni >= h or nj >= w or not mask[ni, nj]:
                    points.append((i, j))
                    break
    return points


def percentile_linear(values: list[float], pct: float) -> float:
    """Percentile with linear interpolation between order statistics."""
    vals = sorted(values)
    if len(vals) == 1:
        return vals[0]
    rank = (len(vals) - 1) * pct / 100.0
    lo = math.floor(rank)
    hi = math.ceil(rank)
    if lo == hi:
        return vals[lo]
    frac = rank - lo
    return vals[lo] * (1.0 - frac) + vals[hi] * frac


def hd95_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    """All-pairs nearest-neighbor version of the 95th-percentile boundary distance."""
    pa = boundary_bruteforce(a.astype(bool))
    pb = boundary_bruteforce(b.astype(bool))
    if not pa or not pb:
        return float("nan")
    pooled = []
    for src, dst in ((pa, pb), (pb, pa)):
        for (i, j) in src:
            best = min(math.hypot(i - x, j - y) for (x, y) in dst)
            pooled.append(best)
    return percentile_linear(pooled, 95.0)


def staple_bruteforce(
    masks: np.ndarray, tol: float = 1e-6, max_iters: int = 100, init: float = 0.99999
):
    """Loop-based STAPLE EM over [R, H, W] binary masks.

    Same protocol constants as the production code (init 0.99999, mean
    foreground prior, max|dp| + max|dq| stopping rule), implemented with
    per-pixel Python loops.  Returns (fused, p, q, log_likelihoods).
    """
    masks = masks.astype(bool)
    n_raters, h, w = masks.shape
    pixels = [(i, j) for i in range(h) for j in range(w)]
    total_fg = sum(int(masks[r, i, j]) for r in range(n_raters) for (i, j) in pixels)
    prior = total_fg / (n_raters * h * w)
    if prior == 0.0:
        return np.zeros((h, w), dtype=bool), [float("nan")] * n_raters, [1.0] * n_raters, []

    p = [init] * n_raters
    q = [init] * n_raters
    log_likelihoods = []
    weights = {(i, j): prior for (i, j) in pixels}
    for _ in range(max_iters):
        loglik = 0.0
        for (i, j) in pixels:
            fg = prior
            bg = 1.0 - prior
            for r in range(n_raters):
                if masks[r, i, j]:
                    fg *= p[r]
                    bg *= 1.0 - q[r]
                else:
                    fg *= 1.0 - p[r]
                    bg *= q[r]
            denom = fg + bg
            weights[(i, j)] = fg / max(denom, 1e-300) if denom > 0 else prior
            loglik += math.log(max(denom, 1e-300))
        log_likelihoods.append(loglik)

        new_p = []
        new_q = []
        w_sum = sum(weights.values())
        cw_sum = sum(1.0 - v for v in weights.values())
        for r in range(n_raters):
            num_p = sum(weights[(i, j)] for (i, j) in pixels if masks[r, i, j])
            num_q = sum(1.0 - weights[(i, j)] for (i, j) in pixels if not masks[r, i, j])
            new_p.append(num_p / w_sum if w_sum > 0 else p[r])
            new_q.append(num_q / cw_sum if cw_sum > 0 else q[r])
        delta = max(abs(a - b) for a, b in zip(new_p, p)) + max(
            abs(a - b) for a, b in zip(new_q, q)
        )
        p, q = new_p, new_q
        if delta < tol:
            break

    fused = np.array([[weights[(i, j)] >= 0.5 for j in range(w)] for i in range(h)])
    return fused, p, q, log_likelihoods


def ema_closed_form(s0: float, target: float, decay: float, n: int) -> float:
    return target + (s0 - target) * decay**n


def finite_difference_grad(loss_fn, param, index, step: float = 1e-4) -> float:
    """Central finite difference of a scalar loss w.r.t. one tensor element."""
    with_no_grad = param.detach()
    original = with_no_grad.flatten()[index].item()
    with_no_grad.flatten()[index] = original + step
    up = loss_fn()
    with_no_grad.flatten()[index] = original - step
    down = loss_fn()
    with_no_grad.flatten()[index] = original
    return (up - down) / (2.0 * step)
