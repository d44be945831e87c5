"""Independent reference implementations used to check the package.

Everything here is written the slow, obvious way (explicit loops, direct
formulas) and shares no code with the package under test.
"""

import numpy as np

from chromatile.numerics import Tape, Tensor


def conv2d_loop(x, w, b=None, stride=1, padding=0):
    """Direct quadruple-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oc in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[ni, ic, i * stride + ki, j * stride + kj]
                                    * w[oc, ic, ki, kj]
                                )
                    out[ni, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def conv_transpose2d_loop(x, w, stride=1, padding=0):
    """Scatter-style transposed convolution: each input element stamps the
    kernel onto the output at its strided location."""
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    full = np.zeros((n, cout, ho + 2 * padding, wo + 2 * padding), dtype=np.float64)
    for ni in range(n):
        for ic in range(cin):
            for i in range(h):
                for j in range(wd):
                    v = x[ni, ic, i, j]
                    for oc in range(cout):
                        for ki in range(kh):
                            for kj in range(kw):
                                full[ni, oc, i * stride + ki, j * stride + kj] += (
                                    v * w[ic, oc, ki, kj]
                                )
    if padding:
        return full[:, :, padding:-padding, padding:-padding]
    return full


def batchnorm_train_loop(x, gamma, beta, eps):
    """Per-channel normalization with explicitly computed biased statistics."""
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    means = np.zeros(c)
    variances = np.zeros(c)
    for ci in range(c):
        vals = x[:, ci, :, :].ravel()
        mu = vals.sum() / vals.size
        var = ((vals - mu) ** 2).sum() / vals.size
        means[ci] = mu
        variances[ci] = var
        out[:, ci, :, :] = gamma[ci] * (x[:, ci, :, :] - mu) / np.sqrt(var + eps) + beta[ci]
    return out, means, variances


def max_pool2d_loop(x, kernel, stride):
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    window = x[
                        ni,
                        ci,
                        i * stride : i * stride + kernel,
                        j * stride : j * stride + kernel,
                    ]
                    out[ni, ci, i, j] = window.max()
    return out


def average_precision_bruteforce(scores, relevance):
    """Non-interpolated AP by explicit rank enumeration.

    Descending score order; equal scores keep their original index order.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if relevance[idx]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def precision_recall_f1_bruteforce(pred, true):
    """Counting-based precision/recall/F1 for one binary column."""
    tp = sum(1 for p, t in zip(pred, true) if p and t)
    fp = sum(1 for p, t in zip(pred, true) if p and not t)
    fn = sum(1 for p, t in zip(pred, true) if not p and t)
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if (precision + recall)
        else 0.0
    )
    return precision, recall, f1


def percentile_sorted(values, q):
    """Percentile as linear interpolation at fractional rank q/100*(n-1)."""
    s = sorted(values)
    rank = q / 100.0 * (len(s) - 1)
    lo = int(np.floor(rank))
    hi = int(np.ceil(rank))
    frac = rank - lo
    return s[lo] * (1 - frac) + s[hi] * frac


def catmull_rom_weights(t):
    """The four interpolation weights at fractional offset t (a = -0.5)."""
    return (
        -0.5 * t**3 + t**2 - 0.5 * t,
        1.5 * t**3 - 2.5 * t**2 + 1.0,
        -1.5 * t**3 + 2.0 * t**2 + 0.5 * t,
        0.5 * t**3 - 0.5 * t**2,
    )


def resample_cubic_loop(grid, out_h, out_w):
    """Separable Catmull-Rom resampling, one output pixel at a time."""
    in_h, in_w = grid.shape

    def axis_sample(vec, length, out_len, d):
        src = (d + 0.5) * length / out_len - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        ws = catmull_rom_weights(t)
        acc = 0.0
        for k, wk in enumerate(ws):
            idx = min(max(i0 - 1 + k, 0), length - 1)
            acc += wk * vec[idx]
        return acc

    rows = np.zeros((in_h, out_w), dtype=np.float64)
    for r in range(in_h):
        for c in range(out_w):
            rows[r, c] = axis_sample(grid[r, :], in_w, out_w, c)
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for c in range(out_w):
        for r in range(out_h):
            out[r, c] = axis_sample(rows[:, c], in_h, out_h, r)
    return out


def finite_difference_gradients(fn, arrays, step=1e-5):
    """Central-difference gradients of ``fn`` w.r.t. each input array.

    ``fn`` takes numpy arrays and returns a float.  All math in 64-bit.
    """
    grads = []
    for target in range(len(arrays)):
        base = [a.astype(np.float64).copy() for a in arrays]
        g = np.zeros_like(base[target])
        flat = base[target].ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(*base)
            flat[i] = orig - step
            down = fn(*base)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def check_gradients(build_loss, arrays, step=1e-5, tol=1e-4, floor=1e-4):
    """Compare taped gradients of ``build_loss`` against central differences.

    ``build_loss(*tensors)`` composes taped ops into a scalar Tensor.  The
    relative error uses ``max(|analytic|, |numeric|, floor)`` as denominator
    so that near-zero entries are judged on an absolute scale.  Returns the
    maximum relative error across all inputs.
    """
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(*tensors)
    grads = tape.backward(loss)
    analytic = [grads.get(t) for t in tensors]

    def value(*raw):
        return float(build_loss(*[Tensor(r) for r in raw]).data)

    numeric = finite_difference_gradients(value, arrays, step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    if worst >= tol:
        raise AssertionError(f"gradient mismatch: max relative error {worst:.3e}")
    return worst
