"""Independent brute-force implementations used as oracles.

Everything here is written as plain loops over voxels/windows/points, sharing
no code with the package's vectorized paths.
"""

import math

import numpy as np


def trilinear(data, point):
    """Direct 8-neighbor weighted sum with border clamping."""
    nx, ny, nz = data.shape
    x = min(max(point[0], 0.0), nx - 1.0)
    y = min(max(point[1], 0.0), ny - 1.0)
    z = min(max(point[2], 0.0), nz - 1.0)
    x0 = min(int(math.floor(x)), max(nx - 2, 0))
    y0 = min(int(math.floor(y)), max(ny - 2, 0))
    z0 = min(int(math.floor(z)), max(nz - 2, 0))
    fx, fy, fz = x - x0, y - y0, z - z0
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((fx if dx else 1 - fx)
                     * (fy if dy else 1 - fy)
                     * (fz if dz else 1 - fz))
                xi = min(x0 + dx, nx - 1)
                yi = min(y0 + dy, ny - 1)
                zi = min(z0 + dz, nz - 1)
                total += w * data[xi, yi, zi]
    return total


def warp(data, u):
    out = np.zeros_like(data)
    nx, ny, nz = data.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                p = (i + u[0, i, j, k], j + u[1, i, j, k], k + u[2, i, j, k])
                out[i, j, k] = trilinear(data, p)
    return out


def lncc(fixed, moved, window, var_eps=1e-5):
    """Literal per-window evaluation of the squared-correlation similarity."""
    r = window // 2
    w3 = window ** 3
    n = fixed.shape
    total = 0.0
    count = 0
    for cx in range(r, n[0] - r):
        for cy in range(r, n[1] - r):
            for cz in range(r, n[2] - r):
                fw = fixed[cx - r:cx + r + 1, cy - r:cy + r + 1, cz - r:cz + r + 1].ravel()
                jw = moved[cx - r:cx + r + 1, cy - r:cy + r + 1, cz - r:cz + r + 1].ravel()
                count += 1
                fd = fw - fw.mean()
                jd = jw - jw.mean()
                b = (fd * fd).sum()
                c = (jd * jd).sum()
                if b / w3 < var_eps or c / w3 < var_eps:
                    continue
                a = (fd * jd).sum()
                total += a * a / (b * c)
    return -total / count


def smoothness(u):
    nx, ny, nz = u.shape[1:]
    total = 0.0
    for comp in range(3):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if i + 1 < nx:
                        total += (u[comp, i + 1, j, k] - u[comp, i, j, k]) ** 2
                    if j + 1 < ny:
                        total += (u[comp, i, j + 1, k] - u[comp, i, j, k]) ** 2
                    if k + 1 < nz:
                        total += (u[comp, i, j, k + 1] - u[comp, i, j, k]) ** 2
    return total / (nx * ny * nz)


def dice_loss(fixed_ch, moved_ch, eps=1e-7, presence=1e-7):
    dices = []
    for k in range(fixed_ch.shape[0]):
        sf = fixed_ch[k].sum()
        sm = moved_ch[k].sum()
        if sf <= presence and sm <= presence:
            continue
        inter = (fixed_ch[k] * moved_ch[k]).sum()
        dices.append(2.0 * inter / (sf + sm + eps))
    if not dices:
        return 0.0
    return 1.0 - sum(dices) / len(dices)


def prototypes(features, mask_ch, eps=1e-7):
    k = mask_ch.shape[0]
    c = features.shape[0]
    out = np.zeros((k, c))
    present = np.zeros(k, dtype=bool)
    for kk in range(k):
        denom = mask_ch[kk].sum()
        if denom < eps:
            continue
        present[kk] = True
        for cc in range(c):
            out[kk, cc] = (features[cc] * mask_ch[kk]).sum() / denom
    return out, present


def contrast(features, assign, protos, present, temperature, norm_eps=1e-8):
    rows = [k for k in range(len(present)) if present[k]]
    if len(rows) < 2:
        return 0.0
    total = 0.0
    count = 0
    nx, ny, nz = assign.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                a = assign[i, j, k]
                if a == 0 or not present[a - 1]:
                    continue
                f = features[:, i, j, k]
                nf = max(np.linalg.norm(f), norm_eps)
                sims = []
                for r in rows:
                    p = protos[r]
                    npn = max(np.linalg.norm(p), norm_eps)
                    sims.append(float(f @ p) / (nf * npn) / temperature)
                sims = np.array(sims)
                pos = rows.index(a - 1)
                m = sims.max()
                log_prob = sims[pos] - m - math.log(np.exp(sims - m).sum())
                total += -log_prob
                count += 1
    return total / count if count else 0.0


def align(protos_f, present_f, protos_m, present_m, norm_eps=1e-8):
    total = 0.0
    for k in range(len(present_f)):
        if not (present_f[k] and present_m[k]):
            continue
        a, b = protos_f[k], protos_m[k]
        na = max(np.linalg.norm(a), norm_eps)
        nb = max(np.linalg.norm(b), norm_eps)
        total += 1.0 - float(a @ b) / (na * nb)
    return total


def chamfer(a, b):
    """O(n*m) exhaustive symmetric mean squared nearest-neighbor distance."""
    d_ab = 0.0
    for p in a:
        d_ab += min(((p - q) ** 2).sum() for q in b)
    d_ba = 0.0
    for q in b:
        d_ba += min(((q - p) ** 2).sum() for p in a)
    return d_ab / len(a) + d_ba / len(b)


def cross_attention(q, k, v):
    """Two-loop softmax attention."""
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = np.array([float(q[i] @ k[j]) / math.sqrt(d) for j in range(k.shape[0])])
        m = logits.max()
        w = np.exp(logits - m)
        w /= w.sum()
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out


def jacobian_dets(u):
    """Second differencing implementation via np.gradient."""
    grads = [np.gradient(u[c], axis=(0, 1, 2)) for c in range(3)]
    jac = np.zeros(u.shape[1:] + (3, 3))
    for c in range(3):
        for a in range(3):
            jac[..., c, a] = grads[c][a]
        jac[..., c, c] += 1.0
    return np.linalg.det(jac)
