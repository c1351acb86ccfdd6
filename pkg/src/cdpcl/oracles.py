"""Plain-Python reference implementations used to cross-check the array code.

Everything here loops over scalars with :mod:`math` and never touches the
tensor machinery, so a bug in the vectorised path cannot hide in both.
"""

from __future__ import annotations

import math


def _tolist(x):
    return x.tolist() if hasattr(x, "tolist") else x


def downsample_labels(labels, h, w):
    labels = _tolist(labels)
    out = []
    for lab in labels:
        H, W = len(lab), len(lab[0])
        sy, sx = H // h, W // w
        out.append([[lab[y * sy][x * sx] for x in range(w)] for y in range(h)])
    return out


def pool_class_features(features, labels, num_classes, ignore_index=255):
    """features: B x N x h x w nested lists; labels: B x H x W."""
    features = _tolist(features)
    B, N = len(features), len(features[0])
    h, w = len(features[0][0]), len(features[0][0][0])
    small = downsample_labels(labels, h, w)
    sums = [[0.0] * N for _ in range(num_classes)]
    counts = [0] * num_classes
    for b in range(B):
        for y in range(h):
            for x in range(w):
                c = small[b][y][x]
                if c == ignore_index:
                    continue
                counts[c] += 1
                for n in range(N):
                    sums[c][n] += features[b][n][y][x]
    rows = [[s / counts[c] if counts[c] else 0.0 for s in sums[c]] for c in range(num_classes)]
    return rows, [cnt > 0 for cnt in counts]


def difference_matrix(src, aug, valid):
    src, aug = _tolist(src), _tolist(aug)
    return [
        [abs(src[i][n] - aug[i][n]) if valid[i] else 0.0 for n in range(len(src[i]))]
        for i in range(len(src))
    ]


def uncertainty_matrix(D, valid):
    D = _tolist(D)
    C, N = len(D), len(D[0])
    U = [[1.0] * N for _ in range(C)]
    members = [i for i in range(C) if valid[i]]
    if len(members) < 2:
        return U
    for n in range(N):
        exps = {i: math.exp(D[i][n]) for i in members}
        total = sum(exps.values())
        for i in members:
            U[i][n] = 1.0 - exps[i] / total
    return U


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def similarity_matrix(src, aug, valid):
    src, aug = _tolist(src), _tolist(aug)
    C = len(src)
    S = [[1.0 if i == k else 0.0 for k in range(C)] for i in range(C)]
    for i in range(C):
        for k in range(C):
            if valid[i] and valid[k]:
                S[i][k] = max(-1.0, min(1.0, cosine(src[i], aug[k])))
    return S


def hard_weight_matrix(S, eps_h=1e-4):
    S = _tolist(S)
    C = len(S)
    H = [[0.0] * C for _ in range(C)]
    for i in range(C):
        for k in range(C):
            v = abs(S[i][k]) if i == k else abs(1.0 - S[i][k])
            H[i][k] = max(v, eps_h)
    return H


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def contrast_loss(protos, feats, active, tau, normalize=True, include_positive=True, scale=None):
    """Sum over active anchors i of -log(exp(l_ii) / sum_k exp(l_ik))."""
    protos, feats = _tolist(protos), _tolist(feats)
    idx = [i for i in range(len(feats)) if active[i]]
    if not idx or (len(idx) == 1 and not include_positive):
        return 0.0
    total = 0.0
    for i in idx:
        f = _unit(feats[i]) if normalize else feats[i]
        logit = {}
        for k in idx:
            p = _unit(protos[k]) if normalize else protos[k]
            s = 1.0 if scale is None else scale[i][k]
            logit[k] = s * sum(a * b for a, b in zip(p, f)) / tau
        denom_keys = [k for k in idx if include_positive or k != i]
        m = max(logit[k] for k in denom_keys)
        lse = m + math.log(sum(math.exp(logit[k] - m) for k in denom_keys))
        total += lse - logit[i]
    return total


def upcl_loss(protos, U, feats, active, tau, normalize=True, include_positive=True):
    protos, U = _tolist(protos), _tolist(U)
    weighted = [[p * u for p, u in zip(pr, ur)] for pr, ur in zip(protos, U)]
    return contrast_loss(weighted, feats, active, tau, normalize, include_positive)


def hpcl_loss(protos, H, feats, active, tau, normalize=True, include_positive=True):
    H = _tolist(H)
    C = len(H)
    scale = [[H[i][k] if i == k else 1.0 / H[i][k] for k in range(C)] for i in range(C)]
    return contrast_loss(protos, feats, active, tau, normalize, include_positive, scale)


def seg_loss(logits, labels, ignore_index=255):
    logits, labels = _tolist(logits), _tolist(labels)
    B, C = len(logits), len(logits[0])
    H, W = len(logits[0][0]), len(logits[0][0][0])
    total, n = 0.0, 0
    for b in range(B):
        for y in range(H):
            for x in range(W):
                t = labels[b][y][x]
                if t == ignore_index:
                    continue
                zs = [logits[b][c][y][x] for c in range(C)]
                m = max(zs)
                lse = m + math.log(sum(math.exp(z - m) for z in zs))
                total += lse - zs[t]
                n += 1
    return total / n if n else 0.0


def confusion_matrix(pred, gt, num_classes, ignore_index=255):
    pred, gt = _tolist(pred), _tolist(gt)
    cm = [[0] * num_classes for _ in range(num_classes)]

    def walk(p, g):
        if isinstance(g, list):
            for pp, gg in zip(p, g):
                walk(pp, gg)
        elif g != ignore_index:
            cm[g][p] += 1

    walk(pred, gt)
    return cm


def miou(cm):
    """Per-class IoU (None where the class never occurs) and mean of the rest."""
    cm = _tolist(cm)
    C = len(cm)
    ious = []
    for c in range(C):
        tp = cm[c][c]
        fn = sum(cm[c][k] for k in range(C)) - tp
        fp = sum(cm[k][c] for k in range(C)) - tp
        denom = tp + fp + fn
        ious.append(tp / denom if denom else None)
    kept = [v for v in ious if v is not None]
    return ious, (sum(kept) / len(kept) if kept else float("nan"))


def softmax_log_grad(x, index):
    """d/dx log(softmax(x))[index] = onehot(index) - softmax(x)."""
    m = max(x)
    e = [math.exp(v - m) for v in x]
    s = sum(e)
    return [(1.0 if j == index else 0.0) - e[j] / s for j in range(len(x))]
