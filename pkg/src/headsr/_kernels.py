"""Numba kernels: triangle z-buffer raster, splat compositing fwd/bwd, binding.

Everything here is single-threaded per call and uses no shared mutable
state, so results are bit-identical regardless of how many of these calls
run concurrently (callers parallelize across renders, never within one).
All math is float64.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def mesh_depth_raster(vcam, tris, focal, cx, cy, width, height, near):
    """Z-buffered triangle raster with perspective-correct depth.

    vcam: (T, 3) camera-space vertices (+z is the looking direction).
    Returns (depth, cover): depth +inf outside coverage.
    """
    depth = np.full((height, width), np.inf)
    cover = np.zeros((height, width), np.uint8)
    for t in range(tris.shape[0]):
        ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
        za, zb, zc = vcam[ia, 2], vcam[ib, 2], vcam[ic, 2]
        if za < near or zb < near or zc < near:
            continue
        ax = focal * vcam[ia, 0] / za + cx
        ay = focal * vcam[ia, 1] / za + cy
        bx = focal * vcam[ib, 0] / zb + cx
        by = focal * vcam[ib, 1] / zb + cy
        cx2 = focal * vcam[ic, 0] / zc + cx
        cy2 = focal * vcam[ic, 1] / zc + cy
        denom = (bx - ax) * (cy2 - ay) - (by - ay) * (cx2 - ax)
        if abs(denom) < 1e-18:
            continue
        lox = min(ax, min(bx, cx2))
        hix = max(ax, max(bx, cx2))
        loy = min(ay, min(by, cy2))
        hiy = max(ay, max(by, cy2))
        px0 = max(int(np.floor(lox - 0.5)), 0)
        px1 = min(int(np.ceil(hix - 0.5)), width - 1)
        py0 = max(int(np.floor(loy - 0.5)), 0)
        py1 = min(int(np.ceil(hiy - 0.5)), height - 1)
        for py in range(py0, py1 + 1):
            qy = py + 0.5
            for px in range(px0, px1 + 1):
                qx = px + 0.5
                lb = ((qx - ax) * (cy2 - ay) - (qy - ay) * (cx2 - ax)) / denom
                if lb < 0.0:
                    continue
                lc = ((bx - ax) * (qy - ay) - (by - ay) * (qx - ax)) / denom
                if lc < 0.0:
                    continue
                la = 1.0 - lb - lc
                if la < 0.0:
                    continue
                z = 1.0 / (la / za + lb / zb + lc / zc)
                if z < depth[py, px]:
                    depth[py, px] = z
                    cover[py, px] = 1
    return depth, cover


@njit(cache=True, nogil=True)
def bin_splats(order, x0, x1, y0, y1, width, height, tile):
    """CSR tile lists of depth-sorted splat indices overlapping each tile."""
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty, np.int64)
    for oi in range(order.shape[0]):
        g = order[oi]
        for ty in range(y0[g] // tile, y1[g] // tile + 1):
            for tx in range(x0[g] // tile, x1[g] // tile + 1):
                counts[ty * ntx + tx] += 1
    starts = np.zeros(ntx * nty + 1, np.int64)
    for i in range(ntx * nty):
        starts[i + 1] = starts[i] + counts[i]
    entries = np.empty(starts[ntx * nty], np.int64)
    fill = starts[: ntx * nty].copy()
    for oi in range(order.shape[0]):
        g = order[oi]
        for ty in range(y0[g] // tile, y1[g] // tile + 1):
            for tx in range(x0[g] // tile, x1[g] // tile + 1):
                t = ty * ntx + tx
                entries[fill[t]] = g
                fill[t] += 1
    return starts, entries


@njit(cache=True, nogil=True)
def composite_forward(
    starts,
    entries,
    mean2d,
    conic,
    pmax,
    opac,
    colors,
    zdepth,
    x0,
    x1,
    y0,
    y1,
    width,
    height,
    tile,
    opacity_clamp,
    t_min,
):
    """Front-to-back alpha compositing over tile lists.

    conic is the packed inverse 2D covariance (a, b, c) with the splat
    weight exp(-(0.5*a*dx^2 + b*dx*dy + 0.5*c*dy^2)); contributions with
    quadratic form above pmax[g] are skipped (alpha below the support
    threshold), matching the bounding-box radius used by the caller.

    Returns color, wsum (accumulated alpha), wdepth (unnormalized
    alpha-weighted depth), tfinal, ncontrib (entries scanned per pixel).
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    color = np.zeros((height, width, 3))
    wsum = np.zeros((height, width))
    wdepth = np.zeros((height, width))
    tfinal = np.ones((height, width))
    ncontrib = np.zeros((height, width), np.int64)
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            s0 = starts[t]
            s1 = starts[t + 1]
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                qy = py + 0.5
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    qx = px + 0.5
                    T = 1.0
                    scanned = s1 - s0
                    for ei in range(s0, s1):
                        g = entries[ei]
                        if px < x0[g] or px > x1[g] or py < y0[g] or py > y1[g]:
                            continue
                        dx = qx - mean2d[g, 0]
                        dy = qy - mean2d[g, 1]
                        p = 0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) + conic[g, 1] * dx * dy
                        if p > pmax[g]:
                            continue
                        a = opac[g] * np.exp(-p)
                        if a > opacity_clamp:
                            a = opacity_clamp
                        w = a * T
                        color[py, px, 0] += colors[g, 0] * w
                        color[py, px, 1] += colors[g, 1] * w
                        color[py, px, 2] += colors[g, 2] * w
                        wdepth[py, px] += zdepth[g] * w
                        wsum[py, px] += w
                        T *= 1.0 - a
                        if T < t_min:
                            scanned = ei - s0 + 1
                            break
                    tfinal[py, px] = T
                    ncontrib[py, px] = scanned
    return color, wsum, wdepth, tfinal, ncontrib


@njit(cache=True, nogil=True)
def composite_backward(
    starts,
    entries,
    mean2d,
    conic,
    pmax,
    opac,
    colors,
    zdepth,
    x0,
    x1,
    y0,
    y1,
    width,
    height,
    tile,
    opacity_clamp,
    tfinal,
    ncontrib,
    u_color,
    u_wd,
    u_a,
):
    """Reverse-mode pass of composite_forward.

    u_color / u_wd / u_a are per-pixel upstream gradients w.r.t. the color
    channels, the raw alpha-weighted depth sum, and the accumulated alpha.
    Iterates each pixel's contributors back-to-front, reconstructing
    transmittance from tfinal. Returns per-splat gradients w.r.t. the 2D
    mean, packed conic, activated opacity, activated color, and depth.
    """
    n = mean2d.shape[0]
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_z = np.zeros(n)
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            s0 = starts[t]
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                qy = py + 0.5
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    uc0 = u_color[py, px, 0]
                    uc1 = u_color[py, px, 1]
                    uc2 = u_color[py, px, 2]
                    uwd = u_wd[py, px]
                    ua = u_a[py, px]
                    if uc0 == 0.0 and uc1 == 0.0 and uc2 == 0.0 and uwd == 0.0 and ua == 0.0:
                        continue
                    qx = px + 0.5
                    T_cur = tfinal[py, px]
                    S = 0.0
                    for ei in range(s0 + ncontrib[py, px] - 1, s0 - 1, -1):
                        g = entries[ei]
                        if px < x0[g] or px > x1[g] or py < y0[g] or py > y1[g]:
                            continue
                        dx = qx - mean2d[g, 0]
                        dy = qy - mean2d[g, 1]
                        p = 0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) + conic[g, 1] * dx * dy
                        if p > pmax[g]:
                            continue
                        gauss = np.exp(-p)
                        a_raw = opac[g] * gauss
                        clamped = a_raw > opacity_clamp
                        a = opacity_clamp if clamped else a_raw
                        T_before = T_cur / (1.0 - a)
                        w = a * T_before
                        q = uc0 * colors[g, 0] + uc1 * colors[g, 1] + uc2 * colors[g, 2]
                        q += uwd * zdepth[g] + ua
                        d_alpha = q * T_before - S / (1.0 - a)
                        S += q * w
                        T_cur = T_before
                        d_color[g, 0] += uc0 * w
                        d_color[g, 1] += uc1 * w
                        d_color[g, 2] += uc2 * w
                        d_z[g] += uwd * w
                        if not clamped:
                            d_opac[g] += d_alpha * gauss
                            dp = -d_alpha * a_raw
                            d_conic[g, 0] += dp * 0.5 * dx * dx
                            d_conic[g, 1] += dp * dx * dy
                            d_conic[g, 2] += dp * 0.5 * dy * dy
                            d_mean2d[g, 0] -= dp * (conic[g, 0] * dx + conic[g, 1] * dy)
                            d_mean2d[g, 1] -= dp * (conic[g, 1] * dx + conic[g, 2] * dy)
    return d_mean2d, d_conic, d_opac, d_color, d_z


@njit(cache=True, nogil=True)
def _point_tri_d2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Squared distance point -> triangle (Ericson, closest-point regions)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        ex, ey, ez = apx - v * abx, apy - v * aby, apz - v * abz
        return ex * ex + ey * ey + ez * ez
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        v = d2 / (d2 - d6)
        ex, ey, ez = apx - v * acx, apy - v * acy, apz - v * acz
        return ex * ex + ey * ey + ez * ez
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        v = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        ex = bpx - v * (cx - bx)
        ey = bpy - v * (cy - by)
        ez = bpz - v * (cz - bz)
        return ex * ex + ey * ey + ez * ez
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    ex = apx - v * abx - w * acx
    ey = apy - v * aby - w * acy
    ez = apz - v * abz - w * acz
    return ex * ex + ey * ey + ez * ez


@njit(cache=True, nogil=True)
def nearest_face(points, verts, tris):
    """Exact nearest mesh face per point; ties keep the lowest face index."""
    n = points.shape[0]
    out = np.empty(n, np.int64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        besti = -1
        for f in range(tris.shape[0]):
            a = tris[f, 0]
            b = tris[f, 1]
            c = tris[f, 2]
            d2 = _point_tri_d2(
                px, py, pz,
                verts[a, 0], verts[a, 1], verts[a, 2],
                verts[b, 0], verts[b, 1], verts[b, 2],
                verts[c, 0], verts[c, 1], verts[c, 2],
            )
            if d2 < best:
                best = d2
                besti = f
        out[i] = besti
    return out
