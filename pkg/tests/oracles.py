"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (scalar loops, brute force,
finite differences, Monte Carlo) and never shares code with the package
paths it checks.
"""

import numpy as np


def conv2d_loop(x, w, stride=1, cyclic=False):
    """Quintuple-loop direct convolution with 'same' padding."""
    b, c_in, n, m = x.shape
    d_out, _, r, s = w.shape
    h_out = -(-n // stride)
    w_out = -(-m // stride)
    pt_y = max((h_out - 1) * stride + r - n, 0)
    pt_x = max((w_out - 1) * stride + s - m, 0)
    pl_y, pl_x = pt_y // 2, pt_x // 2
    out = np.zeros((b, d_out, h_out, w_out))
    for bi in range(b):
        for o in range(d_out):
            for y in range(h_out):
                for xo in range(w_out):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(r):
                            for j in range(s):
                                yy = y * stride + i - pl_y
                                xx = xo * stride + j - pl_x
                                if cyclic:
                                    acc += w[o, c, i, j] * x[bi, c, yy % n, xx % m]
                                elif 0 <= yy < n and 0 <= xx < m:
                                    acc += w[o, c, i, j] * x[bi, c, yy, xx]
                    out[bi, o, y, xo] = acc
    return out


def dense_loop(x, w):
    b, d_in = x.shape
    d_out = w.shape[0]
    out = np.zeros((b, d_out))
    for bi in range(b):
        for o in range(d_out):
            acc = 0.0
            for c in range(d_in):
                acc += w[o, c] * x[bi, c]
            out[bi, o] = acc
    return out


def channel_stats_loop(x):
    """Per-channel mean and biased variance over (batch, h, w) by loops."""
    b, c, h, w = x.shape
    means = np.zeros(c)
    variances = np.zeros(c)
    for ci in range(c):
        vals = []
        for bi in range(b):
            for y in range(h):
                for xx in range(w):
                    vals.append(x[bi, ci, y, xx])
        vals = np.array(vals)
        means[ci] = vals.mean()
        variances[ci] = ((vals - vals.mean()) ** 2).mean()
    return means, variances


def central_difference(f, arr, h=1e-5):
    """Gradient of scalar f wrt every entry of arr by central differences."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def householder_qr(a):
    """Textbook Householder QR with the positive-diagonal convention."""
    a = np.array(a, dtype=np.float64)
    m, n = a.shape
    q = np.eye(m)
    r = a.copy()
    for k in range(min(m, n)):
        v = r[k:, k].copy()
        alpha = -np.sign(v[0]) * np.linalg.norm(v) if v[0] != 0 else -np.linalg.norm(v)
        v[0] -= alpha
        norm = np.linalg.norm(v)
        if norm < 1e-300:
            continue
        v /= norm
        r[k:, :] -= 2.0 * np.outer(v, v @ r[k:, :])
        q[:, k:] -= 2.0 * np.outer(q[:, k:] @ v, v)
    sign = np.sign(np.diag(r)[:n])
    sign[sign == 0] = 1.0
    q[:, :n] = q[:, :n] * sign
    r[:n, :] = r[:n, :] * sign[:, None]
    return q[:, :n], r[:n, :]


def mc_gauss_expect(f, v, n_samples=10_000_000, seed=0):
    """Monte Carlo E[f(sqrt(v) z)] with its standard error."""
    z = np.random.default_rng(seed).standard_normal(n_samples)
    vals = f(np.sqrt(v) * z)
    return vals.mean(), vals.std(ddof=1) / np.sqrt(n_samples)


def cyclic_conv_loop(h, f):
    """Direct O(n^2 r^2 d) double-loop circular convolution."""
    d, n, _ = h.shape
    r = f.shape[1]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for c in range(d):
                for a in range(r):
                    for bb in range(r):
                        acc += f[c, a, bb] * h[c, (i + a) % n, (j + bb) % n]
            out[i, j] = acc
    return out


def max_patch_norm_loop(h, r):
    """Exhaustive wrap-around patch norms."""
    d, n, _ = h.shape
    best = 0.0
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for c in range(d):
                for a in range(r):
                    for b in range(r):
                        acc += h[c, (i + a) % n, (j + b) % n] ** 2
            best = max(best, np.sqrt(acc))
    return best


def enumerate_best(table_scores, flops, max_flops, k=1):
    """Brute-force best subnets under a FLOP cap for tiny explicit tables."""
    import itertools
    dims = [len(row) for row in table_scores]
    results = []
    for choices in itertools.product(*[range(d) for d in dims]):
        f = sum(flops[l][m] for l, m in enumerate(choices))
        if max_flops is not None and f > max_flops:
            continue
        s = sum(table_scores[l][m] for l, m in enumerate(choices))
        results.append((s, choices, f))
    results.sort(key=lambda t: (-t[0], t[1]))
    return results[:k]


def spearman(a, b):
    """Rank correlation from first principles (average ranks for ties)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def ranks(x):
        order = np.argsort(x)
        r = np.empty(len(x))
        i = 0
        while i < len(x):
            j = i
            while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
                j += 1
            r[order[i:j + 1]] = 0.5 * (i + j) + 1
            i = j + 1
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    return float((ra * rb).sum() / denom) if denom > 0 else 0.0
