"""Independent reference implementations used by the tests.

Everything here is written in plain float64 numpy (or Python loops) and
shares no code with the package under test.
"""

import numpy as np


def conv2d_loops(x, w, stride=1, padding=0):
    """Direct nested-loop cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    assert c == c2
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * w[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


def cross_entropy_ref(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    out = []
    for row, y in zip(z, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        out.append(lse - row[y])
    return float(np.mean(out))


def batch_norm_train_ref(x, gamma, beta, eps):
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[1]
    out = np.empty_like(x)
    means, variances = np.empty(c), np.empty(c)
    for ch in range(c):
        vals = x[:, ch].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[:, ch] = gamma[ch] * (x[:, ch] - mu) / np.sqrt(var + eps) + beta[ch]
        means[ch], variances[ch] = mu, var
    return out, means, variances


def central_difference(f, arrays, h=1e-3):
    """Numerical gradient of scalar ``f()`` w.r.t. each float64 array in ``arrays`` (modified in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f()
            a[idx] = orig - h
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def grad_rel_error(analytic, numeric):
    """Relative error of a whole gradient array, robust to individual tiny entries."""
    a, b = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)
