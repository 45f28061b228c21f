"""Fused forward/backward for a whole example (and a batch of them).

The tape in :mod:`rmfn.numcore` is the reference; these kernels compute the
same function and the same gradient with hand-written backpropagation
through time, and are what training runs on. They compile with numba unless
``RMFN_NUMBA=0`` (see :mod:`rmfn._accel`), in which case the identical source
runs as plain numpy.

Layout conventions:
  * parameters: one flat float64 vector, slot offsets in ``model.SLOTS`` order
    (-1 for slots the variant does not have);
  * ``dims``: ``[d_l, d_v, d_a, h_l, h_v, h_a, d_hl, d_f, d_z, K, use_mfp,
    use_highlight, n_out, is_classification]``;
  * inputs: ``X[n, T_max, d_l + d_v + d_a]`` with per-example ``lengths``.
"""
import numpy as np

from ._accel import kernel

# slot indices (see model.SLOTS)
S_MEM_W, S_MEM_B = 12, 13
S_HL_W, S_HL_U, S_HL_B = 14, 15, 16
S_PROJ_W, S_PROJ_B = 17, 18
S_FU_W, S_FU_U, S_FU_B = 19, 20, 21
S_SUM_W, S_SUM_B = 22, 23
S_HEAD_W, S_HEAD_B = 24, 25


@kernel
def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@kernel
def _view(flat, off, r, c):
    if off < 0:
        return flat[0:0].reshape((0, 0))
    return flat[off:off + r * c].reshape((r, c))


@kernel
def _vec(flat, off, n):
    if off < 0:
        return flat[0:0]
    return flat[off:off + n]


@kernel
def _gates(pre, c_prev, n, gates, c_new, h_new):
    """Activate stacked pre-activations (i, f, o, candidate) and update the cell."""
    gates[0:3 * n] = _sigmoid(pre[0:3 * n])
    gates[3 * n:4 * n] = np.tanh(pre[3 * n:4 * n])
    i = gates[0:n]
    f = gates[n:2 * n]
    o = gates[2 * n:3 * n]
    g = gates[3 * n:4 * n]
    c_new[:] = f * c_prev + i * g
    h_new[:] = o * np.tanh(c_new)


@kernel
def _gates_backward(gates, c_prev, c_new, n, dh, dc, dpre):
    """Fill ``dpre`` from output grads; return the grad on ``c_prev``."""
    i = gates[0:n]
    f = gates[n:2 * n]
    o = gates[2 * n:3 * n]
    g = gates[3 * n:4 * n]
    tc = np.tanh(c_new)
    dct = dc + dh * o * (1.0 - tc * tc)
    dpre[0:n] = dct * g * i * (1.0 - i)
    dpre[n:2 * n] = dct * c_prev * f * (1.0 - f)
    dpre[2 * n:3 * n] = dh * tc * o * (1.0 - o)
    dpre[3 * n:4 * n] = dct * i * (1.0 - g * g)
    return dct * f


@kernel
def example_pass(theta, offs, dims, fuse_init, x, T, mask, target, want_grad, grad, att_out):
    """Forward (and optionally backward) for one example.

    Returns ``(loss, output)``; accumulates into ``grad`` when ``want_grad``
    and writes stage attention into ``att_out[t, k, :]``.
    """
    d_in = dims[0:3]
    h_dim = dims[3:6]
    d_hl = dims[6]
    d_f = dims[7]
    d_z = dims[8]
    K = dims[9]
    use_mfp = dims[10] != 0
    use_hl = dims[11] != 0
    n_out = dims[12]
    is_cls = dims[13] != 0
    if not use_mfp:
        d_z = 0
    H = h_dim[0] + h_dim[1] + h_dim[2]
    xo = np.zeros(3, dtype=np.int64)
    ho = np.zeros(3, dtype=np.int64)
    for m in range(1, 3):
        xo[m] = xo[m - 1] + d_in[m - 1]
        ho[m] = ho[m - 1] + h_dim[m - 1]

    lh = np.zeros((T + 1, H))
    lc = np.zeros((T + 1, H))
    lg = np.zeros((T, 4 * H))
    zs = np.zeros((T + 1, d_z))
    hl_h = np.zeros((T, K + 1, d_hl))
    hl_c = np.zeros((T, K + 1, d_hl))
    hl_g = np.zeros((T, K, 4 * d_hl))
    att = np.zeros((T, K + 1, H))
    fu_h = np.zeros((T, K + 1, d_f))
    fu_c = np.zeros((T, K + 1, d_f))
    fu_g = np.zeros((T, K, 4 * d_f))
    ht = np.zeros((T, K, H))

    mem_W = _view(theta, offs[S_MEM_W], d_hl, H)
    mem_b = _vec(theta, offs[S_MEM_B], d_hl)
    hl_W = _view(theta, offs[S_HL_W], 4 * d_hl, H)
    hl_U = _view(theta, offs[S_HL_U], 4 * d_hl, d_hl)
    hl_b = _vec(theta, offs[S_HL_B], 4 * d_hl)
    pr_W = _view(theta, offs[S_PROJ_W], H, d_hl)
    pr_b = _vec(theta, offs[S_PROJ_B], H)
    fu_W = _view(theta, offs[S_FU_W], 4 * d_f, H)
    fu_U = _view(theta, offs[S_FU_U], 4 * d_f, d_f)
    fu_b = _vec(theta, offs[S_FU_B], 4 * d_f)
    su_W = _view(theta, offs[S_SUM_W], d_z, K * d_f)
    su_b = _vec(theta, offs[S_SUM_B], d_z)
    dim_E = H + d_z
    hd_W = _view(theta, offs[S_HEAD_W], n_out, dim_E)
    hd_b = _vec(theta, offs[S_HEAD_B], n_out)

    # ---- forward ----
    for t in range(T):
        z_prev = zs[t].copy()
        for m in range(3):
            n = h_dim[m]
            W = _view(theta, offs[4 * m], 4 * n, d_in[m])
            U = _view(theta, offs[4 * m + 1], 4 * n, n)
            V = _view(theta, offs[4 * m + 2], 4 * n, d_z)
            b = _vec(theta, offs[4 * m + 3], 4 * n)
            xm = x[t, xo[m]:xo[m] + d_in[m]].copy()
            pre = np.dot(W, xm) + np.dot(U, lh[t, ho[m]:ho[m] + n].copy())
            if use_mfp:
                pre = pre + np.dot(V, z_prev)
            pre = pre + b
            _gates(pre, lc[t, ho[m]:ho[m] + n].copy(), n, lg[t, 4 * ho[m]:4 * ho[m] + 4 * n],
                   lc[t + 1, ho[m]:ho[m] + n], lh[t + 1, ho[m]:ho[m] + n])
        if use_mfp:
            hcat = lh[t + 1].copy()
            if use_hl:
                hl_c[t, 0] = np.dot(mem_W, hcat) + mem_b
                att[t, 0] = 1.0 / H
            fu_c[t, 0] = fuse_init
            for k in range(K):
                if use_hl:
                    pre = np.dot(hl_W, att[t, k].copy()) + np.dot(hl_U, hl_h[t, k].copy())
                    pre = pre + hl_b
                    _gates(pre, hl_c[t, k].copy(), d_hl, hl_g[t, k], hl_c[t, k + 1], hl_h[t, k + 1])
                    logits = np.dot(pr_W, hl_h[t, k + 1].copy()) + pr_b
                    e = np.exp(logits - logits.max())
                    att[t, k + 1] = e / e.sum()
                    ht[t, k] = hcat * att[t, k + 1]
                    att_out[t, k] = att[t, k + 1]
                else:
                    ht[t, k] = hcat
                pre = np.dot(fu_W, ht[t, k].copy()) + np.dot(fu_U, fu_h[t, k].copy())
                pre = pre + fu_b
                _gates(pre, fu_c[t, k].copy(), d_f, fu_g[t, k], fu_c[t, k + 1], fu_h[t, k + 1])
            scat = fu_h[t, 1:K + 1].copy().reshape(K * d_f)
            zs[t + 1] = np.tanh(np.dot(su_W, scat) + su_b)

    E = np.zeros(dim_E)
    E[0:H] = lh[T]
    E[H:] = zs[T]
    Ed = E * mask
    out = np.dot(hd_W, Ed) + hd_b

    dout = np.zeros(n_out)
    if is_cls:
        shifted = out - out.max()
        lse = np.log(np.exp(shifted).sum())
        logp = shifted - lse
        loss = -np.sum(target * logp)
        dout[:] = np.exp(logp) * target.sum() - target
    else:
        diff = out[0] - target[0]
        loss = abs(diff)
        dout[0] = np.sign(diff)
    if not want_grad:
        return loss, out

    # ---- backward ----
    g_hd_W = _view(grad, offs[S_HEAD_W], n_out, dim_E)
    g_hd_b = _vec(grad, offs[S_HEAD_B], n_out)
    g_hd_W += np.outer(dout, Ed)
    g_hd_b += dout
    dE = np.dot(hd_W.T, dout) * mask
    dh = dE[0:H].copy()
    dc = np.zeros(H)
    dz = dE[H:].copy()

    g_mem_W = _view(grad, offs[S_MEM_W], d_hl, H)
    g_mem_b = _vec(grad, offs[S_MEM_B], d_hl)
    g_hl_W = _view(grad, offs[S_HL_W], 4 * d_hl, H)
    g_hl_U = _view(grad, offs[S_HL_U], 4 * d_hl, d_hl)
    g_hl_b = _vec(grad, offs[S_HL_B], 4 * d_hl)
    g_pr_W = _view(grad, offs[S_PROJ_W], H, d_hl)
    g_pr_b = _vec(grad, offs[S_PROJ_B], H)
    g_fu_W = _view(grad, offs[S_FU_W], 4 * d_f, H)
    g_fu_U = _view(grad, offs[S_FU_U], 4 * d_f, d_f)
    g_fu_b = _vec(grad, offs[S_FU_B], 4 * d_f)
    g_su_W = _view(grad, offs[S_SUM_W], d_z, K * d_f)
    g_su_b = _vec(grad, offs[S_SUM_B], d_z)

    for t in range(T - 1, -1, -1):
        if use_mfp:
            hcat = lh[t + 1].copy()
            dpre_s = dz * (1.0 - zs[t + 1] * zs[t + 1])
            scat = fu_h[t, 1:K + 1].copy().reshape(K * d_f)
            g_su_W += np.outer(dpre_s, scat)
            g_su_b += dpre_s
            dscat = np.dot(su_W.T, dpre_s)
            dhcat = np.zeros(H)
            dfh = np.zeros(d_f)
            dfc = np.zeros(d_f)
            dhh = np.zeros(d_hl)
            dhc = np.zeros(d_hl)
            da_next = np.zeros(H)
            dpre_f = np.zeros(4 * d_f)
            dpre_h = np.zeros(4 * d_hl)
            for k in range(K - 1, -1, -1):
                dfh = dfh + dscat[k * d_f:(k + 1) * d_f]
                dfc = _gates_backward(fu_g[t, k], fu_c[t, k], fu_c[t, k + 1], d_f, dfh, dfc, dpre_f)
                g_fu_W += np.outer(dpre_f, ht[t, k])
                g_fu_U += np.outer(dpre_f, fu_h[t, k])
                g_fu_b += dpre_f
                dht = np.dot(fu_W.T, dpre_f)
                dfh = np.dot(fu_U.T, dpre_f)
                if use_hl:
                    a = att[t, k + 1].copy()
                    dhcat += dht * a
                    da = dht * hcat + da_next
                    dlog = a * (da - np.dot(da, a))
                    g_pr_W += np.outer(dlog, hl_h[t, k + 1])
                    g_pr_b += dlog
                    dhh = dhh + np.dot(pr_W.T, dlog)
                    dhc = _gates_backward(hl_g[t, k], hl_c[t, k], hl_c[t, k + 1], d_hl, dhh, dhc, dpre_h)
                    g_hl_W += np.outer(dpre_h, att[t, k])
                    g_hl_U += np.outer(dpre_h, hl_h[t, k])
                    g_hl_b += dpre_h
                    da_next = np.dot(hl_W.T, dpre_h)
                    dhh = np.dot(hl_U.T, dpre_h)
                else:
                    dhcat += dht
            if use_hl:
                g_mem_W += np.outer(dhc, hcat)
                g_mem_b += dhc
                dhcat += np.dot(mem_W.T, dhc)
            dh += dhcat
        dz_prev = np.zeros(d_z)
        for m in range(3):
            n = h_dim[m]
            a0 = ho[m]
            W = _view(theta, offs[4 * m], 4 * n, d_in[m])
            U = _view(theta, offs[4 * m + 1], 4 * n, n)
            V = _view(theta, offs[4 * m + 2], 4 * n, d_z)
            gW = _view(grad, offs[4 * m], 4 * n, d_in[m])
            gU = _view(grad, offs[4 * m + 1], 4 * n, n)
            gV = _view(grad, offs[4 * m + 2], 4 * n, d_z)
            gb = _vec(grad, offs[4 * m + 3], 4 * n)
            dpre = np.zeros(4 * n)
            dc_prev = _gates_backward(lg[t, 4 * a0:4 * a0 + 4 * n], lc[t, a0:a0 + n], lc[t + 1, a0:a0 + n],
                                      n, dh[a0:a0 + n].copy(), dc[a0:a0 + n].copy(), dpre)
            gW += np.outer(dpre, x[t, xo[m]:xo[m] + d_in[m]])
            gU += np.outer(dpre, lh[t, a0:a0 + n])
            gb += dpre
            if use_mfp:
                gV += np.outer(dpre, zs[t])
                dz_prev += np.dot(V.T, dpre)
            dh[a0:a0 + n] = np.dot(U.T, dpre)
            dc[a0:a0 + n] = dc_prev
        dz = dz_prev
    return loss, out


@kernel
def batch_pass(theta, offs, dims, fuse_init, X, lengths, masks, targets, want_grad, grad, preds, losses,
               att_out):
    """Run :func:`example_pass` over a batch, filling ``preds`` and ``losses``.

    ``grad`` receives the sum of per-example gradients.
    """
    for e in range(X.shape[0]):
        loss, out = example_pass(theta, offs, dims, fuse_init, X[e], lengths[e], masks[e], targets[e],
                                 want_grad, grad, att_out[e])
        preds[e] = out
        losses[e] = loss


def dims_vector(config):
    c = config
    return np.array([c.d_l, c.d_v, c.d_a, c.h_l, c.h_v, c.h_a,
                     c.highlight_hidden if c.uses_highlight else 0, c.d_f, c.d_z, c.K,
                     int(c.uses_mfp), int(c.uses_highlight), c.n_out,
                     int(c.task == "classification")], dtype=np.int64)


def pack_inputs(examples):
    """Stack examples into ``X[n, T_max, d_l + d_v + d_a]`` plus lengths."""
    lengths = np.array([len(ex.x_l) for ex in examples], dtype=np.int64)
    t_max = int(lengths.max()) if len(examples) else 0
    width = sum(np.shape(s)[1] for s in (examples[0].x_l, examples[0].x_v, examples[0].x_a)) if examples else 0
    X = np.zeros((len(examples), t_max, width))
    for e, ex in enumerate(examples):
        X[e, :lengths[e]] = np.hstack([ex.x_l, ex.x_v, ex.x_a])
    return X, lengths


def run_batch(params, X, lengths, targets, masks=None, want_grad=True):
    """Per-example losses, summed gradient (flat), predictions and attention.

    ``attention`` has shape ``[n, T_max, K, n_features]`` and is only
    meaningful for the full variant.
    """
    cfg = params.config
    n = X.shape[0]
    if masks is None:
        masks = np.ones((n, cfg.dim_E))
    grad = np.zeros_like(params.theta)
    preds = np.zeros((n, cfg.n_out))
    losses = np.zeros(n)
    att = np.zeros((n, X.shape[1], cfg.K, cfg.n_features))
    fuse_init = params.buffers.get("mfp.fuse_init_memory", np.zeros(0))
    batch_pass(params.theta, params.slot_offsets(), dims_vector(cfg), np.ascontiguousarray(fuse_init),
                      np.ascontiguousarray(X, dtype=np.float64), lengths,
                      np.ascontiguousarray(masks, dtype=np.float64),
                      np.ascontiguousarray(targets, dtype=np.float64), want_grad, grad, preds, losses, att)
    return losses, grad, preds, att
