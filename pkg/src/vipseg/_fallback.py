"""Pure-numpy implementations of the hot kernels.

Every function here has a twin in ``_native.pyx`` with the same signature and
semantics. ``vipseg.kernels`` picks one at import time.
"""

from __future__ import annotations

import numpy as np

IMPLEMENTATION = "numpy"

AGG_FREE_ENERGY = 0
AGG_MAX = 1
AGG_MEAN = 2


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def transition_matrix(a, alpha):
    """Row-normalised elementwise power ``a ** alpha``.

    Rows whose power sums to zero become a one-hot on their own index.
    Returns ``(w, isolated)`` where ``isolated`` is the number of such rows.
    """
    a = np.asarray(a, dtype=np.float64)
    p = a ** alpha
    deg = p.sum(axis=1)
    dead = deg <= 0.0
    if dead.any():
        idx = np.flatnonzero(dead)
        p[idx, :] = 0.0
        p[idx, idx] = 1.0
        deg[idx] = 1.0
    return p / deg[:, None], int(dead.sum())


def propagate(w, m, beta):
    out = np.asarray(m, dtype=np.float64)
    for _ in range(beta):
        out = w @ out
    return out


def _excluded_partitions(canon):
    """Per-row log-partition pieces of ``canon`` with each column left out.

    Returns ``(r, p, e)`` of shape [n, C]: for column c, ``r`` is the max over
    the other columns, ``p = sum exp(z_j - r)`` and ``e = sum exp(z_j - r) z_j``
    over j != c.
    """
    n, c = canon.shape
    if c == 1:
        return (np.full((n, 1), -np.inf), np.zeros((n, 1)), np.zeros((n, 1)))
    order = np.argsort(canon, axis=1)
    top = np.take_along_axis(canon, order[:, -1:], axis=1)
    second = np.take_along_axis(canon, order[:, -2:-1], axis=1)
    r = np.where(np.arange(c)[None, :] == order[:, -1:], second, top)
    with np.errstate(over="ignore"):
        # the excluded column may overflow here; it is zeroed just below
        ex = np.exp(canon[:, None, :] - r[:, :, None])
    diag = np.arange(c)
    ex[:, diag, diag] = 0.0
    p = ex.sum(axis=2)
    e = (ex * canon[:, None, :]).sum(axis=2)
    return r, p, e


def score_substitutions(canon, cand, cand_class, w, beta, threshold):
    """Grounding and certainty scores for candidate columns on one image.

    ``canon`` [n, C] holds scaled logits of the canonical vocabulary and
    ``cand`` [n, Q] scaled logits of candidate queries; candidate q replaces
    column ``cand_class[q]``. Returns ``(vg, sc, count)``, each of length Q;
    scores are NaN where ``count`` is zero.
    """
    canon = np.asarray(canon, dtype=np.float64)
    cand = np.asarray(cand, dtype=np.float64)
    cls = np.asarray(cand_class, dtype=np.intp)
    r, p, e = _excluded_partitions(canon)
    r_q, p_q, e_q = r[:, cls], p[:, cls], e[:, cls]

    big = np.maximum(r_q, cand)
    scale_rest = np.exp(r_q - big)
    own = np.exp(cand - big)
    total = p_q * scale_rest + own
    m = own / total
    log_z = big + np.log(total)
    mean_logit = (e_q * scale_rest + own * cand) / total
    ent = np.maximum(log_z - mean_logit, 0.0)

    m_tilde = propagate(w, m, beta)
    region = m >= threshold
    count = region.sum(axis=0)
    inter = (m * m_tilde * region).sum(axis=0)
    s_m = (m * region).sum(axis=0)
    s_t = (m_tilde * region).sum(axis=0)
    ent_sum = (ent * region).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = s_m + s_t - inter
        vg = np.where(count > 0, np.where(denom > 0, inter / np.where(denom > 0, denom, 1.0), 0.0), np.nan)
        sc = np.where(count > 0, ent_sum / np.maximum(count, 1), np.nan)
    return vg, sc, count.astype(np.int64)


def free_energy(s, tau):
    s = np.asarray(s, dtype=np.float64)
    top = s.max(axis=1)
    return top + np.log(np.exp(tau * (s - top[:, None])).sum(axis=1)) / tau


def aggregate_groups(probs, gsim, group_ptr, tau, mode):
    """Fuse per-query maps into one column per class.

    Queries are laid out contiguously by class: class c owns columns
    ``group_ptr[c]:group_ptr[c + 1]`` of ``probs`` [n, Q]. ``gsim`` [Q] holds the
    global image-to-query cosines that set the saliency weights.
    """
    probs = np.asarray(probs, dtype=np.float64)
    gsim = np.asarray(gsim, dtype=np.float64)
    n_cls = len(group_ptr) - 1
    out = np.empty((probs.shape[0], n_cls))
    for c in range(n_cls):
        lo, hi = group_ptr[c], group_ptr[c + 1]
        block = probs[:, lo:hi]
        if mode == AGG_MAX:
            out[:, c] = block.max(axis=1)
        elif mode == AGG_MEAN:
            out[:, c] = block.mean(axis=1)
        else:
            g = gsim[lo:hi]
            d = np.exp(g - g.max())
            d = d / d.sum()
            out[:, c] = free_energy(block * d[None, :], tau)
    return out
