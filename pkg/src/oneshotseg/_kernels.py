"""Compiled inner loops: direct stride-1 3D convolution and geodesic raster sweeps."""

import numba
import numpy as np

_REASSOC = {"reassoc", "contract", "nsz"}


@numba.njit(cache=True)
def conv3d_direct(xp, w, out):
    """out[co] += sum_ci w[co, ci] (*) xp[ci]; xp is padded, out pre-filled."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    D, H, W = out.shape[1], out.shape[2], out.shape[3]
    for co in range(cout):
        for ci in range(cin):
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        wv = w[co, ci, a, b, c]
                        for z in range(D):
                            for x in range(H):
                                for y in range(W):
                                    out[co, z, x, y] += wv * xp[ci, z + a, x + b, y + c]


@numba.njit(cache=True)
def conv3d_direct_grad_input(w, g, gxp):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    D, H, W = g.shape[1], g.shape[2], g.shape[3]
    for ci in range(cin):
        for co in range(cout):
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        wv = w[co, ci, a, b, c]
                        for z in range(D):
                            for x in range(H):
                                for y in range(W):
                                    gxp[ci, z + a, x + b, y + c] += wv * g[co, z, x, y]


@numba.njit(cache=True, fastmath=_REASSOC)
def conv3d_direct_grad_weight(xp, g, gw):
    cout, cin, k = gw.shape[0], gw.shape[1], gw.shape[2]
    D, H, W = g.shape[1], g.shape[2], g.shape[3]
    for co in range(cout):
        for ci in range(cin):
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        acc = 0.0
                        for z in range(D):
                            for x in range(H):
                                for y in range(W):
                                    acc += g[co, z, x, y] * xp[ci, z + a, x + b, y + c]
                        gw[co, ci, a, b, c] += acc


@numba.njit(cache=True)
def geodesic_sweep(img, dist, offsets, lengths2, gamma2, reverse):
    """One raster pass relaxing each voxel from the causal neighbours in ``offsets``.

    ``offsets`` must all precede the voxel in the traversal order (forward
    order for reverse=False). Returns the number of voxels improved.
    """
    D, H, W = img.shape
    n_off = offsets.shape[0]
    improved = 0
    for zi in range(D):
        z = D - 1 - zi if reverse else zi
        for xi in range(H):
            x = H - 1 - xi if reverse else xi
            for yi in range(W):
                y = W - 1 - yi if reverse else yi
                best = dist[z, x, y]
                iv = img[z, x, y]
                for o in range(n_off):
                    nz = z + offsets[o, 0]
                    nx = x + offsets[o, 1]
                    ny = y + offsets[o, 2]
                    if nz < 0 or nz >= D or nx < 0 or nx >= H or ny < 0 or ny >= W:
                        continue
                    dn = dist[nz, nx, ny]
                    if dn >= best:
                        continue
                    di = iv - img[nz, nx, ny]
                    cand = dn + np.sqrt(lengths2[o] + gamma2 * di * di)
                    if cand < best:
                        best = cand
                if best < dist[z, x, y]:
                    dist[z, x, y] = best
                    improved += 1
    return improved
