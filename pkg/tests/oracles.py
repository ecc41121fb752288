"""Independent reference implementations used only by the test suite.

Everything here is deliberately written without importing the package under
test: plain numpy, explicit loops, no shared helpers. Tests compare package
output against these references (dual-route checking).
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# numeric gradients

def fd_gradient(fn, array: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar fn() w.r.t. every entry of array.

    ``fn`` must read ``array`` afresh on every call and return a float.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def rel_err(a: float, b: float, floor: float = 1e-3) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# straight-line evaluation of one context branch (attention, gate, GRU)
#
# Row-vector convention: positions are rows of x (n, d_m). Parameters come in
# as a plain dict of numpy arrays:
#   wq, wk, wv : lists of (d_m, d_k) per head
#   wo         : (n_h*d_k, d_m)
#   w1, b1     : (d_m, 4*d_m), (1, 4*d_m)
#   w2, b2     : (4*d_m, d_m), (1, d_m)
#   rpk, rpv   : lists of (2*clip+1, d_k) per head, row = distance + clip
#   ws         : (d_m, d_m)
#   gru        : dict wz, uz, bz, wr, ur, br, wn, un, bn

def straightline_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def straightline_attention(x: np.ndarray, p: dict, clip: int) -> np.ndarray:
    """Eqs. 8-12 for one local area; returns h (n, d_m)."""
    n, d_m = x.shape
    n_h = len(p["wq"])
    d_k = p["wq"][0].shape[1]
    heads = []
    for h_i in range(n_h):
        q = x @ p["wq"][h_i]
        k = x @ p["wk"][h_i]
        v = x @ p["wv"][h_i]
        rpk = p["rpk"][h_i]
        rpv = p["rpv"][h_i]
        out = np.zeros((n, d_k))
        for j in range(n):
            e = np.zeros(n)
            for kk in range(n):
                dist = max(-clip, min(clip, kk - j))
                e[kk] = (q[j] @ (k[kk] + rpk[dist + clip])) / math.sqrt(d_k)
            alpha = straightline_softmax(e)
            acc = np.zeros(d_k)
            for kk in range(n):
                dist = max(-clip, min(clip, kk - j))
                acc += alpha[kk] * (v[kk] + rpv[dist + clip])
            out[j] = acc
        heads.append(out)
    concat = np.concatenate(heads, axis=1)
    h_prime = concat @ p["wo"]
    inner = np.maximum(0.0, h_prime @ p["w1"] + p["b1"])
    return inner @ p["w2"] + p["b2"]


def straightline_gate(h: np.ndarray, target_pos: int, ws: np.ndarray) -> np.ndarray:
    """Eqs. 13-15; returns s (d_m,). Empty non-target set gives zeros."""
    n, d_m = h.shape
    others = [j for j in range(n) if j != target_pos]
    if not others:
        return np.zeros(d_m)
    st = np.array([math.tanh(float(h[j] @ ws @ h[target_pos])) for j in others])
    beta = straightline_softmax(st)
    s = np.zeros(d_m)
    for w, j in zip(beta, others):
        s += w * h[j]
    return s


def straightline_gru(s: np.ndarray, t_prev: np.ndarray, g: dict) -> np.ndarray:
    """Gated recurrent step: t = (1-z)*n + z*t_prev."""
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    z = sig(s @ g["wz"] + t_prev @ g["uz"] + g["bz"])
    r = sig(s @ g["wr"] + t_prev @ g["ur"] + g["br"])
    n = np.tanh(s @ g["wn"] + r * (t_prev @ g["un"]) + g["bn"])
    return (1.0 - z) * n + z * t_prev


def straightline_branch(x: np.ndarray, target_pos: int, t_prev: np.ndarray,
                        p: dict, clip: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full branch on one area: returns (h_target, s, t)."""
    h = straightline_attention(x, p, clip)
    s = straightline_gate(h, target_pos, p["ws"])
    t = straightline_gru(s.reshape(1, -1), t_prev.reshape(1, -1), p["gru"]).reshape(-1)
    return h[target_pos], s, t


# ---------------------------------------------------------------------------
# metric references (explicit counting, no vectorization)

def brute_weighted_f1(gold, pred, n_classes: int) -> float:
    total = 0.0
    for c in range(n_classes):
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, pred) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, pred) if g == c and p != c)
        support = tp + fn
        if tp == 0:
            f1 = 0.0
        else:
            prec = tp / (tp + fp)
            rec = tp / (tp + fn)
            f1 = 2 * prec * rec / (prec + rec)
        total += support * f1
    return total / len(gold)


def brute_micro_f1_excluding(gold, pred, excluded: int) -> float:
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        if g == excluded and p == excluded:
            continue
        if g == p:
            tp += 1
        else:
            if p != excluded:
                fp += 1
            if g != excluded:
                fn += 1
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


def ec_reference(labels, start: int, ell: int, weighting: str) -> float:
    """Windowed label-consistency score in [0, 100]."""
    first = labels[start]
    if weighting == "uniform":
        weights = [1.0 / ell] * ell
    else:
        raw = [math.exp(math.exp(ell - i)) for i in range(1, ell + 1)]
        total = sum(raw)
        weights = [r / total for r in raw]
    score = 0.0
    for i in range(1, ell + 1):
        if labels[start + i] == first:
            score += weights[i - 1]
    return 100.0 * score


# ---------------------------------------------------------------------------
# mock-futures reference: exhaustive nearest-neighbor with query folding

def brute_mock_futures(all_vecs: np.ndarray, flat_i: int, history_rows: list[int],
                       m: int) -> np.ndarray:
    """Replay the retrieval fold with explicit candidate scans.

    all_vecs: (N, d) pool of every utterance embedding (flat corpus order).
    history_rows: flat rows of u_{i-k}..u_i (query seed).
    """
    n, d = all_vecs.shape
    query_members = [all_vecs[r] for r in history_rows]
    excluded = {flat_i}
    picks = np.zeros((m, d))
    for step in range(m):
        query = np.mean(query_members, axis=0)
        qn = np.linalg.norm(query)
        best_idx = -1
        best_sim = None
        for cand in range(n):
            if cand in excluded:
                continue
            v = all_vecs[cand]
            vn = np.linalg.norm(v)
            if qn == 0.0 or vn == 0.0:
                sim = 0.0
            else:
                sim = float(query @ v) / (qn * vn)
            if best_sim is None or sim > best_sim:
                best_sim = sim
                best_idx = cand
        if best_idx < 0:
            picks[step] = query
            query_members.append(query.copy())
            continue
        picks[step] = all_vecs[best_idx]
        excluded.add(best_idx)
        query_members.append(all_vecs[best_idx])
    return picks


# ---------------------------------------------------------------------------
# optimizer reference (single parameter, explicit moments)

def adamw_reference(p: float, grads: list[float], lr: float, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8,
                    wd: float = 0.01) -> float:
    m = 0.0
    v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * (mhat / (math.sqrt(vhat) + eps) + wd * p)
    return p
