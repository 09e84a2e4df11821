"""Hot loops with a numba path and a pure-numpy path.

The public functions dispatch on :data:`mlip._accel.USE_NUMBA`; the ``*_numpy``
and ``*_numba`` variants stay importable so tests and the benchmark can run
both side by side.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# Sinkhorn-Knopp equipartition scaling
# --------------------------------------------------------------------------


def sinkhorn_numpy(scores: np.ndarray, eps: float, iters: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    B, C = scores.shape
    z = scores / eps
    Q = np.exp(z - z.max()).T  # C x B
    Q /= Q.sum()
    for _ in range(iters):
        Q /= Q.sum(axis=1, keepdims=True)
        Q /= C
        Q /= Q.sum(axis=0, keepdims=True)
        Q /= B
    return np.ascontiguousarray((Q * B).T)


@njit
def sinkhorn_numba(scores, eps, iters):
    B, C = scores.shape
    zmax = -np.inf
    for i in range(B):
        for c in range(C):
            v = scores[i, c] / eps
            if v > zmax:
                zmax = v
    Q = np.empty((C, B))
    total = 0.0
    for c in range(C):
        for i in range(B):
            Q[c, i] = np.exp(scores[i, c] / eps - zmax)
            total += Q[c, i]
    for c in range(C):
        for i in range(B):
            Q[c, i] /= total
    for _ in range(iters):
        for c in range(C):
            s = 0.0
            for i in range(B):
                s += Q[c, i]
            for i in range(B):
                Q[c, i] = Q[c, i] / s / C
        for i in range(B):
            s = 0.0
            for c in range(C):
                s += Q[c, i]
            for c in range(C):
                Q[c, i] = Q[c, i] / s / B
    out = np.empty((B, C))
    for i in range(B):
        for c in range(C):
            out[i, c] = Q[c, i] * B
    return out


def sinkhorn(scores: np.ndarray, eps: float, iters: int) -> np.ndarray:
    """Balanced soft assignment of ``B`` rows to ``C`` columns.

    Rows of the result sum to 1; columns sum to ``B/C`` once converged.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if USE_NUMBA:
        return sinkhorn_numba(scores, float(eps), int(iters))
    return sinkhorn_numpy(scores, eps, iters)


# --------------------------------------------------------------------------
# TransE margin-ranking SGD
# --------------------------------------------------------------------------


def transe_epochs_numpy(E, R, triples, negatives, orders, margin, lr):
    """Run ``len(orders)`` epochs of per-triple SGD in place; return epoch losses."""
    n_epochs = orders.shape[0]
    losses = np.zeros(n_epochs)
    for ep in range(n_epochs):
        total = 0.0
        for k in orders[ep]:
            h, r, t = triples[k]
            hn, tn = negatives[ep, k]
            pos = E[h] + R[r] - E[t]
            neg = E[hn] + R[r] - E[tn]
            dp = np.sqrt(pos @ pos)
            dn = np.sqrt(neg @ neg)
            loss = margin + dp - dn
            if loss > 0.0:
                total += loss
                gp = pos / max(dp, 1e-12)
                gn = neg / max(dn, 1e-12)
                E[h] -= lr * gp
                E[t] += lr * gp
                R[r] -= lr * (gp - gn)
                E[hn] += lr * gn
                E[tn] -= lr * gn
        norms = np.sqrt(np.sum(E * E, axis=1, keepdims=True))
        E /= np.maximum(norms, 1e-12)
        losses[ep] = total / len(orders[ep])
    return losses


@njit
def transe_epochs_numba(E, R, triples, negatives, orders, margin, lr):
    n_epochs, n = orders.shape
    d = E.shape[1]
    losses = np.zeros(n_epochs)
    pos = np.empty(d)
    neg = np.empty(d)
    for ep in range(n_epochs):
        total = 0.0
        for kk in range(n):
            k = orders[ep, kk]
            h = triples[k, 0]
            r = triples[k, 1]
            t = triples[k, 2]
            hn = negatives[ep, k, 0]
            tn = negatives[ep, k, 1]
            sp = 0.0
            sn = 0.0
            for j in range(d):
                pos[j] = E[h, j] + R[r, j] - E[t, j]
                neg[j] = E[hn, j] + R[r, j] - E[tn, j]
                sp += pos[j] * pos[j]
                sn += neg[j] * neg[j]
            dp = np.sqrt(sp)
            dn = np.sqrt(sn)
            loss = margin + dp - dn
            if loss > 0.0:
                total += loss
                ip = 1.0 / max(dp, 1e-12)
                ineg = 1.0 / max(dn, 1e-12)
                for j in range(d):
                    gp = pos[j] * ip
                    gn = neg[j] * ineg
                    E[h, j] -= lr * gp
                    E[t, j] += lr * gp
                    R[r, j] -= lr * (gp - gn)
                    E[hn, j] += lr * gn
                    E[tn, j] -= lr * gn
        for e in range(E.shape[0]):
            s = 0.0
            for j in range(d):
                s += E[e, j] * E[e, j]
            s = max(np.sqrt(s), 1e-12)
            for j in range(d):
                E[e, j] /= s
        losses[ep] = total / n
    return losses


def transe_epochs(E, R, triples, negatives, orders, margin, lr):
    if USE_NUMBA:
        return transe_epochs_numba(E, R, triples, negatives, orders, float(margin), float(lr))
    return transe_epochs_numpy(E, R, triples, negatives, orders, margin, lr)
