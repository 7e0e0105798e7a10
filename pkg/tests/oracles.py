"""Independent brute-force and closed-form references shared by the unit and acceptance tests."""

import math

import mpmath
import numpy as np
from scipy.spatial.transform import Rotation


def naive_conv1d(x, w, b, stride, pad):
    T, Ci = x.shape
    Co, _, K = w.shape
    xp = np.zeros((T + 2 * pad, Ci))
    xp[pad : pad + T] = x
    Tout = (T + 2 * pad - K) // stride + 1
    out = np.zeros((Tout, Co))
    for t in range(Tout):
        for o in range(Co):
            s = 0.0 if b is None else b[o]
            for c in range(Ci):
                for k in range(K):
                    s += w[o, c, k] * xp[t * stride + k, c]
            out[t, o] = s
    return out


def naive_skeletal_conv(x, w, b, adjacency):
    """Per joint: mean over neighbours of a same-padded temporal conv, then bias."""
    B, T, J, Ci = x.shape
    E, Co, _, K = w.shape
    pad = (K - 1) // 2
    out = np.zeros((B, T, J, Co))
    e = 0
    for i, nbrs in enumerate(adjacency):
        acc = np.zeros((B, T, Co))
        for j in nbrs:
            xp = np.zeros((B, T + 2 * pad, Ci))
            xp[:, pad : pad + T] = x[:, :, j]
            for t in range(T):
                acc[:, t] += np.einsum("bck,ock->bo", xp[:, t : t + K].transpose(0, 2, 1), w[e])
            e += 1
        out[:, :, i] = acc / len(nbrs) + b[i]
    return out


def naive_pool(x, groups):
    """Group mean over joints, then mean of consecutive frame pairs."""
    B, T, _, C = x.shape
    out = np.zeros((B, T // 2, len(groups), C))
    for g, members in enumerate(groups):
        for t in range(T // 2):
            s = np.zeros((B, C))
            for j in members:
                s += x[:, 2 * t, j] + x[:, 2 * t + 1, j]
            out[:, t, g] = s / (2 * len(members))
    return out


def fk_matrix_oracle(sk, rot, root):
    """Recursive FK with rotation matrices, one frame at a time."""
    T, J = rot.shape[:2]
    out = np.zeros((T, J, 3))
    for t in range(T):
        mats = Rotation.from_quat(np.concatenate([rot[t, :, 1:], rot[t, :, :1]], axis=1)).as_matrix()
        glob = [None] * J

        def solve(j):
            if glob[j] is not None:
                return
            p = sk.parent[j]
            if p < 0:
                glob[j] = mats[j]
                out[t, j] = root[t]
                return
            solve(p)
            glob[j] = glob[p] @ mats[j]
            out[t, j] = out[t, p] + glob[p] @ sk.offset[j]

        for j in range(J):
            solve(j)
    return out


def reward_oracle(a, b, sigma):
    with mpmath.workdps(40):
        s = mpmath.fsum((mpmath.mpf(float(x)) - mpmath.mpf(float(y))) ** 2 for x, y in zip(a, b))
        return float(mpmath.exp(-s / mpmath.mpf(float(sigma))))


def return_oracle(rewards, gamma):
    total = 0.0
    for t, r in enumerate(rewards):
        total += gamma**t * r
    return total


def akte_oracle(p, q, keys):
    vals = [math.dist(p[t, j], q[t, j]) for t in range(p.shape[0]) for j in keys]
    return sum(vals) / len(vals)


def akja_oracle(p, keys, fps):
    """Acceleration as the difference of successive finite-difference velocities."""
    vals = []
    for t in range(1, p.shape[0] - 1):
        for j in keys:
            v_next = (p[t + 1, j] - p[t, j]) * fps
            v_prev = (p[t, j] - p[t - 1, j]) * fps
            vals.append(math.sqrt(sum(((v_next - v_prev) * fps) ** 2)))
    return sum(vals) / len(vals)


def pearson_oracle(a, b):
    with mpmath.workdps(40):
        A, B = [mpmath.mpf(float(v)) for v in a], [mpmath.mpf(float(v)) for v in b]
        n = len(A)
        ma, mb = mpmath.fsum(A) / n, mpmath.fsum(B) / n
        cov = mpmath.fsum((u - ma) * (v - mb) for u, v in zip(A, B))
        sa = mpmath.sqrt(mpmath.fsum((u - ma) ** 2 for u in A))
        sb = mpmath.sqrt(mpmath.fsum((v - mb) ** 2 for v in B))
        return float(cov / (sa * sb))
