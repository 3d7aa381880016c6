"""Pure numpy versions of the compiled kernels in ``_core.pyx``."""
import numpy as np


def transe_sgd_epoch(E, R, pos, neg, batch_size, lr, margin, p):
    n = len(pos)
    total = 0.0
    for start in range(0, n, batch_size):
        bp = pos[start:start + batch_size]
        bn = neg[start:start + batch_size]
        w = 1.0 / len(bp)
        vp = E[bp[:, 0]] + R[bp[:, 1]] - E[bp[:, 2]]
        vn = E[bn[:, 0]] + R[bn[:, 1]] - E[bn[:, 2]]
        if p == 1:
            sp, sn = np.abs(vp).sum(1), np.abs(vn).sum(1)
        else:
            sp, sn = np.sqrt((vp * vp).sum(1)), np.sqrt((vn * vn).sum(1))
        diff = margin + sp - sn
        act = diff > 0
        if not act.any():
            continue
        total += diff[act].sum()
        bp, bn, vp, vn, sp, sn = bp[act], bn[act], vp[act], vn[act], sp[act], sn[act]
        if p == 1:
            gp = np.sign(vp) * w
            gn = np.sign(vn) * (-w)
        else:
            gp = np.divide(vp, sp[:, None], out=np.zeros_like(vp), where=sp[:, None] > 0) * w
            gn = np.divide(vn, sn[:, None], out=np.zeros_like(vn), where=sn[:, None] > 0) * (-w)
        for b, g in ((bp, gp), (bn, gn)):
            np.add.at(E, b[:, 0], -lr * g)
            np.add.at(E, b[:, 2], -lr * (-g))
            np.add.at(R, b[:, 1], -lr * g)
        rows = np.unique(np.concatenate([bp[:, [0, 2]].ravel(), bn[:, [0, 2]].ravel()]))
        nrm = np.sqrt((E[rows] * E[rows]).sum(1))
        big = nrm > 1.0
        E[rows[big]] = E[rows[big]] / nrm[big, None]
    return total / n if n else 0.0


def transe_candidate_scores(E, R, anchor, rel, p, predict_head, chunk_elems=4_000_000):
    q, n = len(anchor), len(E)
    out = np.empty((q, n))
    if predict_head:
        base = R[rel] - E[anchor]
    else:
        base = E[anchor] + R[rel]
    step = max(1, chunk_elems // max(1, n * E.shape[1]))
    for s in range(0, q, step):
        b = base[s:s + step, None, :]
        v = E[None, :, :] + b if predict_head else b - E[None, :, :]
        out[s:s + step] = np.abs(v).sum(2) if p == 1 else np.sqrt((v * v).sum(2))
    return out
