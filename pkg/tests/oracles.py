"""Independent scalar-loop reference implementations (plain Python, math module only)."""

import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def norm(a):
    return math.sqrt(dot(a, a))


def softmax(row):
    top = max(row)
    ex = [math.exp(v - top) for v in row]
    s = sum(ex)
    return [e / s for e in ex]


def cosine_softmax(tokens, texts, scale):
    """Row-wise softmax of scale * cosine(token, text)."""
    out = []
    for t in tokens:
        nt = norm(t)
        row = []
        for q in texts:
            c = 0.0 if nt == 0 else dot(t, q) / (nt * norm(q))
            row.append(scale * c)
        out.append(softmax(row))
    return out


def self_similarity(v):
    d = len(v[0])
    out = []
    for a in v:
        out.append(softmax([dot(a, b) / math.sqrt(d) for b in v]))
    return out


def layer_mean(layers):
    n = len(layers)
    hw = len(layers[0])
    return [[sum(layers[l][i][j] for l in range(n)) / n for j in range(hw)] for i in range(hw)]


def random_walk(a, m, alpha, beta):
    hw = len(a)
    w = []
    for i in range(hw):
        p = [a[i][j] ** alpha for j in range(hw)]
        s = sum(p)
        if s <= 0:
            w.append([1.0 if j == i else 0.0 for j in range(hw)])
        else:
            w.append([x / s for x in p])
    cur = [list(r) for r in m]
    for _ in range(beta):
        nxt = []
        for i in range(hw):
            nxt.append([sum(w[i][k] * cur[k][c] for k in range(hw)) for c in range(len(m[0]))])
        cur = nxt
    return cur


def soft_iou(m, mt, col, threshold):
    num = s1 = s2 = 0.0
    n = 0
    for i in range(len(m)):
        if m[i][col] >= threshold:
            n += 1
            num += m[i][col] * mt[i][col]
            s1 += m[i][col]
            s2 += mt[i][col]
    if n == 0:
        return None
    den = s1 + s2 - num
    return num / den if den > 0 else 0.0


def region_entropy(m, col, threshold):
    total = 0.0
    n = 0
    for row in m:
        if row[col] >= threshold:
            n += 1
            for p in row:
                if p > 0:
                    total -= p * math.log(p)
    return None if n == 0 else total / n


def lse(row, tau):
    top = max(row)
    return top + math.log(sum(math.exp(tau * (v - top)) for v in row)) / tau


def iou_from_pairs(pred, gt, num_classes, ignore):
    inter = [0] * num_classes
    p_cnt = [0] * num_classes
    g_cnt = [0] * num_classes
    for p, g in zip(pred, gt):
        if g == ignore:
            continue
        p_cnt[p] += 1
        g_cnt[g] += 1
        if p == g:
            inter[p] += 1
    out = []
    for c in range(num_classes):
        union = p_cnt[c] + g_cnt[c] - inter[c]
        out.append(None if union == 0 else inter[c] / union)
    return out


def bilinear_1d_weights(out_size, in_size):
    """Half-pixel (align_corners=False) interpolation weights, clamped at the borders."""
    rows = []
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), in_size - 1)
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        row = [0.0] * in_size
        row[lo] += 1 - frac
        row[hi] += frac
        rows.append(row)
    return rows
