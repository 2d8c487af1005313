"""Independent reference implementations used only by the tests."""

import numpy as np


def raycast_depth(vertices_cam, triangles, K):
    """Brute-force Moller-Trumbore ray casting of a camera-frame mesh.

    Rays go through pixel centers with unit z, so the hit parameter is the
    depth directly. Returns an (H, W) array with 0 where nothing is hit.
    """
    out = np.zeros((K.height, K.width))
    tri = np.asarray(vertices_cam, dtype=float)[np.asarray(triangles)]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    for v in range(K.height):
        for u in range(K.width):
            d = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            p = np.cross(d, e2)
            det = np.einsum("ij,ij->i", e1, p)
            ok = np.abs(det) > 1e-15
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            s = -v0
            a = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1)
            b = (q @ d) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
            hit = ok & (a >= 0) & (b >= 0) & (a + b <= 1) & (t > 1e-3)
            if hit.any():
                out[v, u] = t[hit].min()
    return out


def overlap_by_counting(depth_a, pose_a, depth_b, pose_b, K, tol=0.01, rel_tol=0.01):
    """Per-pixel loop version of the visibility overlap of view a in view b."""
    Ra, ta = pose_a.rotation, pose_a.translation
    Rb, tb = pose_b.rotation, pose_b.translation
    total = seen = 0
    for v in range(K.height):
        for u in range(K.width):
            z = depth_a[v, u]
            if z <= 0:
                continue
            total += 1
            pc = np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
            pw = Ra @ pc + ta
            pb = Rb.T @ (pw - tb)
            if pb[2] <= 1e-3:
                continue
            ub = K.fx * pb[0] / pb[2] + K.cx
            vb = K.fy * pb[1] / pb[2] + K.cy
            iu, iv = int(np.floor(ub + 0.5)), int(np.floor(vb + 0.5))
            if not (0 <= iu < K.width and 0 <= iv < K.height):
                continue
            zb = depth_b[iv, iu]
            if zb > 0 and abs(zb - pb[2]) <= tol + rel_tol * pb[2]:
                seen += 1
    return seen / total if total else 0.0


def greedy_pairs_exhaustive(points0, valid0, points1, valid1):
    """Smallest-distance-first one-to-one matching by repeated full scans.

    At every step all remaining (i, j) candidates are scanned and the pair
    with minimal (distance, i, j) is taken.
    """
    rem0 = [i for i in range(len(points0)) if valid0[i]]
    rem1 = [j for j in range(len(points1)) if valid1[j]]
    pairs, dists = [], []
    while rem0 and rem1:
        best = None
        for i in rem0:
            for j in rem1:
                d = float(np.sqrt(np.sum((np.asarray(points0[i]) - np.asarray(points1[j])) ** 2)))
                key = (d, i, j)
                if best is None or key < best:
                    best = key
        d, i, j = best
        pairs.append((i, j))
        dists.append(d)
        rem0.remove(i)
        rem1.remove(j)
    return pairs, dists


def nearest_neighbor_scan(queries, database):
    """Quadratic scan with strict '<' so the first minimum wins."""
    idx = []
    for q in np.asarray(queries, dtype=np.float64):
        best, best_d = -1, np.inf
        for k, r in enumerate(np.asarray(database, dtype=np.float64)):
            d = float(np.sum((q - r) ** 2))
            if d < best_d:
                best, best_d = k, d
        idx.append(best)
    return np.array(idx)


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """max |a - n| / max |n| (norm-wise relative error)."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-30)
    return float(np.max(np.abs(a - n)) / scale)
