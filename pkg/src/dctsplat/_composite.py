"""Per-pixel alpha-compositing core: numba forward kernel plus its hand-derived
adjoint, wrapped as a torch autograd Function.

Inputs arrive as flat per-(gaussian, tile) pair arrays in front-to-back order
within each tile (CSR layout via tile_starts). The projection, covariance and
color chains stay in torch; this Function only owns the compositing math

    alpha_k = opac_k * exp(-((v1 dx + v2 dy)^2 + (v3 dy)^2))
    w_k     = alpha_k * T,   T <- T * (1 - alpha_k)

with the square footprint test, the skip threshold and early termination.
Gradients flow to mx, my, v1, v2, v3, opac and the 5-channel payload
(rgb, depth, alpha mass); the discrete masks are treated as constants.
"""

import numpy as np
import torch

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _forward_kernel(tile_starts, tx0, ty0, ts, width, height,
                        mx, my, v1, v2, v3, r, opac, payload, skip, mint):
        n_occ = tile_starts.shape[0] - 1
        p = ts * ts
        out = np.zeros((n_occ, p, 5), dtype=payload.dtype)
        touched = np.zeros(mx.shape[0], dtype=np.uint8)
        for t in range(n_occ):
            s, e = tile_starts[t], tile_starts[t + 1]
            for pi in range(p):
                pxx = tx0[t] + pi % ts
                pyy = ty0[t] + pi // ts
                if pxx >= width or pyy >= height:
                    continue
                trans = 1.0
                for k in range(s, e):
                    if trans < mint:
                        break
                    dx = pxx - mx[k]
                    dy = pyy - my[k]
                    if abs(dx) > r[k] or abs(dy) > r[k]:
                        continue
                    t1 = v1[k] * dx + v2[k] * dy
                    t2 = v3[k] * dy
                    a = opac[k] * np.exp(-(t1 * t1 + t2 * t2))
                    if a < skip:
                        continue
                    w = a * trans
                    for c in range(5):
                        out[t, pi, c] += w * payload[k, c]
                    touched[k] = 1
                    trans *= 1.0 - a
        return out, touched

    @numba.njit(cache=True, fastmath=False)
    def _backward_kernel(tile_starts, tx0, ty0, ts, width, height,
                         mx, my, v1, v2, v3, r, opac, payload, skip, mint,
                         grad_out, max_count):
        pairs = mx.shape[0]
        g_mx = np.zeros(pairs, dtype=payload.dtype)
        g_my = np.zeros(pairs, dtype=payload.dtype)
        g_v1 = np.zeros(pairs, dtype=payload.dtype)
        g_v2 = np.zeros(pairs, dtype=payload.dtype)
        g_v3 = np.zeros(pairs, dtype=payload.dtype)
        g_opac = np.zeros(pairs, dtype=payload.dtype)
        g_payload = np.zeros((pairs, 5), dtype=payload.dtype)

        idx_buf = np.empty(max_count, dtype=np.int64)
        a_buf = np.empty(max_count, dtype=np.float64)
        t_buf = np.empty(max_count, dtype=np.float64)
        t1_buf = np.empty(max_count, dtype=np.float64)
        t2_buf = np.empty(max_count, dtype=np.float64)
        dx_buf = np.empty(max_count, dtype=np.float64)
        dy_buf = np.empty(max_count, dtype=np.float64)

        n_occ = tile_starts.shape[0] - 1
        p = ts * ts
        for t in range(n_occ):
            s, e = tile_starts[t], tile_starts[t + 1]
            for pi in range(p):
                pxx = tx0[t] + pi % ts
                pyy = ty0[t] + pi // ts
                if pxx >= width or pyy >= height:
                    continue
                # Replay the forward compositing, recording contributions.
                m = 0
                trans = 1.0
                for k in range(s, e):
                    if trans < mint:
                        break
                    dx = pxx - mx[k]
                    dy = pyy - my[k]
                    if abs(dx) > r[k] or abs(dy) > r[k]:
                        continue
                    t1 = v1[k] * dx + v2[k] * dy
                    t2 = v3[k] * dy
                    a = opac[k] * np.exp(-(t1 * t1 + t2 * t2))
                    if a < skip:
                        continue
                    idx_buf[m] = k
                    a_buf[m] = a
                    t_buf[m] = trans
                    t1_buf[m] = t1
                    t2_buf[m] = t2
                    dx_buf[m] = dx
                    dy_buf[m] = dy
                    m += 1
                    trans *= 1.0 - a

                if m == 0:
                    continue
                g0 = grad_out[t, pi, 0]
                g1 = grad_out[t, pi, 1]
                g2 = grad_out[t, pi, 2]
                g3 = grad_out[t, pi, 3]
                g4 = grad_out[t, pi, 4]
                # Back-to-front: suffix holds sum of w_l * s_l over later hits.
                suffix = 0.0
                for j in range(m - 1, -1, -1):
                    k = idx_buf[j]
                    a = a_buf[j]
                    tr = t_buf[j]
                    w = a * tr
                    sval = (payload[k, 0] * g0 + payload[k, 1] * g1 + payload[k, 2] * g2
                            + payload[k, 3] * g3 + payload[k, 4] * g4)
                    g_payload[k, 0] += w * g0
                    g_payload[k, 1] += w * g1
                    g_payload[k, 2] += w * g2
                    g_payload[k, 3] += w * g3
                    g_payload[k, 4] += w * g4
                    da = tr * sval
                    if suffix != 0.0:
                        da -= suffix / (1.0 - a)
                    suffix += w * sval
                    g_opac[k] += da * (a / opac[k])
                    dq = -a * da  # q = t1^2 + t2^2
                    dt1 = 2.0 * t1_buf[j] * dq
                    dt2 = 2.0 * t2_buf[j] * dq
                    g_v1[k] += dt1 * dx_buf[j]
                    g_v2[k] += dt1 * dy_buf[j]
                    g_v3[k] += dt2 * dy_buf[j]
                    g_mx[k] -= dt1 * v1[k]
                    g_my[k] -= dt1 * v2[k] + dt2 * v3[k]
        return g_mx, g_my, g_v1, g_v2, g_v3, g_opac, g_payload

    @numba.njit(cache=True, fastmath=False)
    def _records_kernel(tile_starts, tx0, ty0, ts, width, height,
                        mx, my, v1, v2, v3, r, opac, skip, mint):
        """Dense (pairs, P) map of composited per-pixel alphas (0 elsewhere)."""
        n_occ = tile_starts.shape[0] - 1
        p = ts * ts
        amap = np.zeros((mx.shape[0], p), dtype=mx.dtype)
        for t in range(n_occ):
            s, e = tile_starts[t], tile_starts[t + 1]
            for pi in range(p):
                pxx = tx0[t] + pi % ts
                pyy = ty0[t] + pi // ts
                if pxx >= width or pyy >= height:
                    continue
                trans = 1.0
                for k in range(s, e):
                    if trans < mint:
                        break
                    dx = pxx - mx[k]
                    dy = pyy - my[k]
                    if abs(dx) > r[k] or abs(dy) > r[k]:
                        continue
                    t1 = v1[k] * dx + v2[k] * dy
                    t2 = v3[k] * dy
                    a = opac[k] * np.exp(-(t1 * t1 + t2 * t2))
                    if a < skip:
                        continue
                    amap[k, pi] = a
                    trans *= 1.0 - a
        return amap


class CompositeFunction(torch.autograd.Function):
    """Differentiable tile compositing over flat pair arrays."""

    @staticmethod
    def forward(ctx, mx, my, v1, v2, v3, opac, payload, r, tile_starts, tx0, ty0,
                ts, width, height, skip, mint):
        mx_n, my_n, v1_n, v2_n, v3_n, opac_n, payload_n = (
            t.detach().contiguous().numpy() for t in (mx, my, v1, v2, v3, opac, payload))
        r_np = r.detach().contiguous().numpy()
        dt = payload_n.dtype.type
        out, touched = _forward_kernel(tile_starts, tx0, ty0, ts, width, height,
                                       mx_n, my_n, v1_n, v2_n, v3_n, r_np, opac_n,
                                       payload_n, dt(skip), dt(mint))
        ctx.save_for_backward(mx, my, v1, v2, v3, opac, payload, r)
        ctx.meta = (tile_starts, tx0, ty0, ts, width, height, float(skip), float(mint))
        out_t = torch.from_numpy(out)
        touched_t = torch.from_numpy(touched)
        ctx.mark_non_differentiable(touched_t)
        return out_t, touched_t

    @staticmethod
    def backward(ctx, grad_out, _grad_touched):
        mx, my, v1, v2, v3, opac, payload, r = ctx.saved_tensors
        tile_starts, tx0, ty0, ts, width, height, skip, mint = ctx.meta
        dt = payload.detach().numpy().dtype.type
        counts = np.diff(tile_starts)
        max_count = int(counts.max()) if counts.size else 1
        grads = _backward_kernel(
            tile_starts, tx0, ty0, ts, width, height,
            mx.detach().contiguous().numpy(), my.detach().contiguous().numpy(),
            v1.detach().contiguous().numpy(), v2.detach().contiguous().numpy(),
            v3.detach().contiguous().numpy(), r.detach().contiguous().numpy(),
            opac.detach().contiguous().numpy(), payload.detach().contiguous().numpy(),
            dt(skip), dt(mint),
            grad_out.detach().contiguous().numpy(), max(max_count, 1),
        )
        g_mx, g_my, g_v1, g_v2, g_v3, g_opac, g_payload = (torch.from_numpy(g) for g in grads)
        return (g_mx, g_my, g_v1, g_v2, g_v3, g_opac, g_payload,
                None, None, None, None, None, None, None, None, None)


def composite_pairs(mx, my, v1, v2, v3, opac, payload, r, tile_starts, tx0, ty0,
                    ts, width, height, skip, mint):
    """Run the numba compositing core; returns ((n_occ, P, 5) tile outputs,
    (pairs,) uint8 touched flags)."""
    return CompositeFunction.apply(mx, my, v1, v2, v3, opac, payload, r,
                                   tile_starts, tx0, ty0, ts, width, height, skip, mint)


def alpha_records(mx, my, v1, v2, v3, opac, r, tile_starts, tx0, ty0,
                  ts, width, height, skip, mint):
    """Dense per-pair, per-tile-pixel composited alpha map (no gradients)."""
    dt = mx.detach().numpy().dtype.type
    amap = _records_kernel(
        tile_starts, tx0, ty0, ts, width, height,
        mx.detach().contiguous().numpy(), my.detach().contiguous().numpy(),
        v1.detach().contiguous().numpy(), v2.detach().contiguous().numpy(),
        v3.detach().contiguous().numpy(), r.detach().contiguous().numpy(),
        opac.detach().contiguous().numpy(), dt(skip), dt(mint),
    )
    return torch.from_numpy(amap)
