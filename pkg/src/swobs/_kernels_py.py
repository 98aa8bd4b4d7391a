"""Pure numpy versions of the hot loops; the compiled extension mirrors them."""
from __future__ import annotations

import numpy as np

# nodes per vectorised chunk: keeps the (chunk, samples, coords) temporaries small
_CHUNK_ELEMS = 2_000_000


def dissipation_scan(M0, P, lo, hi, rows, cols, G, W, phi):
    """Per-node scan of the box-sup of the dissipation form over sphere samples.

    For every node ``i`` and sample ``w`` the form is
    ``w' M0_i w + sum_j q_j (P_i w)_{rows_j} w_{cols_j}``; its sup over the box
    ``[lo_i, hi_i]`` is taken coordinate-wise. Returns, per node,

    * the smallest ``w' G_i w`` among samples whose sup is ``>= 0``
      (``inf`` when there is none),
    * the largest ``sup - phi_i w' G_i w`` and the index of that sample.
    """
    M0 = np.asarray(M0, dtype=float)
    N, n, _ = M0.shape
    S = W.shape[0]
    ell = len(rows)
    omega2 = np.full(N, np.inf)
    worst = np.empty(N)
    arg = np.empty(N, dtype=np.intp)
    step = max(1, _CHUNK_ELEMS // max(1, S * max(ell, n)))
    for a in range(0, N, step):
        b = min(N, a + step)
        PW = np.einsum("nij,sj->nsi", P[a:b], W)
        sup = np.einsum("si,nij,sj->ns", W, M0[a:b], W)
        if ell:
            c = PW[:, :, rows] * W[None, :, cols]
            sup += np.maximum(lo[a:b, None, :] * c, hi[a:b, None, :] * c).sum(axis=2)
        hw = np.einsum("si,nij,sj->ns", W, G[a:b], W)
        bad = sup >= 0.0
        masked = np.where(bad, hw, np.inf)
        omega2[a:b] = masked.min(axis=1)
        v = sup - phi[a:b, None] * hw
        k = np.argmax(v, axis=1)
        arg[a:b] = k
        worst[a:b] = v[np.arange(b - a), k]
    return omega2, worst, arg


def vertex_norm_max(base, lo, hi, rows, cols, active):
    """Per node, the largest spectral norm of ``base + q`` over box vertices."""
    base = np.asarray(base, dtype=float)
    N = base.shape[0]
    idx = np.nonzero(active)[0]
    out = np.zeros(N)
    fixed = [j for j in range(len(rows)) if not active[j]]
    A0 = base.copy()
    for j in fixed:
        A0[:, rows[j], cols[j]] += lo[:, j]
    for mask in range(1 << len(idx)):
        A = A0.copy()
        for bit, j in enumerate(idx):
            v = hi[:, j] if (mask >> bit) & 1 else lo[:, j]
            A[:, rows[j], cols[j]] += v
        out = np.maximum(out, np.linalg.norm(A, ord=2, axis=(1, 2)))
    return out
