"""Straight-loop reference implementations used as independent oracles.

Everything here is computed with Python floats, ``math`` and explicit
loops: no numpy kernels, no code shared with the package.  Slow and
obviously correct; tests compare package outputs against these.
"""

import math


def matmul_loops(a, b):
    """Plain triple-loop matrix product of two 2-d arrays."""
    p, r = len(a), len(a[0])
    s = len(b[0])
    out = [[0.0] * s for _ in range(p)]
    for i in range(p):
        for k in range(r):
            aik = float(a[i][k])
            for j in range(s):
                out[i][j] += aik * float(b[k][j])
    return out


def conv2d_loops(x, kernel):
    """Six-loop 3x3 cross-correlation with stride 1, padding 1."""
    bsz = len(x)
    ci, h, w = len(x[0]), len(x[0][0]), len(x[0][0][0])
    co = len(kernel)
    out = [[[[0.0] * w for _ in range(h)] for _ in range(co)] for _ in range(bsz)]
    for n in range(bsz):
        for o in range(co):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for c in range(ci):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += float(x[n][c][ii][jj]) * float(kernel[o][c][di][dj])
                    out[n][o][i][j] = acc
    return out


def maxpool_loops(x):
    """2x2/stride-2 max pooling by explicit window scan."""
    bsz, c, h, w = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    out = [[[[0.0] * (w // 2) for _ in range(h // 2)] for _ in range(c)] for _ in range(bsz)]
    for n in range(bsz):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    vals = [float(x[n][ch][2 * i + di][2 * j + dj])
                            for di in (0, 1) for dj in (0, 1)]
                    out[n][ch][i][j] = max(vals)
    return out


def softmax_row(row):
    m = max(float(v) for v in row)
    exps = [math.exp(float(v) - m) for v in row]
    z = sum(exps)
    return [e / z for e in exps]


def bi_attention_loops(qp, cp, d_z):
    """Per-row scaled attention: softmax(q c^T / sqrt(d_z)) c, three loops."""
    rows = len(qp)
    seq, dim = len(qp[0]), len(qp[0][0])
    out = []
    for r in range(rows):
        logits = [[sum(float(qp[r][t][u]) * float(cp[r][s][u]) for u in range(dim))
                   / math.sqrt(d_z) for s in range(seq)] for t in range(seq)]
        attn = [softmax_row(row) for row in logits]
        out.append([[sum(attn[t][s] * float(cp[r][s][u]) for s in range(seq))
                     for u in range(dim)] for t in range(seq)])
    return out


def _sigmoid(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _flatten_feature(emb):
    """Row-major flatten of one (l, d, d) feature map into a list."""
    flat = []
    for channel in emb:
        for row in channel:
            flat.extend(float(v) for v in row)
    return flat


def compare_loops(query_embs, class_embs, tensors, heads, hidden_size):
    """Full bi-attention comparator, scalar loops end to end.

    ``tensors`` maps the checkpoint names (biattn/head{i}/Wq, ...) to
    arrays; query_embs is (M, l, d, d) and class_embs (N, l, d, d).
    Returns the M x N score matrix as nested lists.
    """
    m, n = len(query_embs), len(class_embs)
    feat = len(_flatten_feature(query_embs[0]))
    seq = feat // hidden_size
    dq = hidden_size // heads
    w1 = [float(tensors["biattn/W1"][u][0]) for u in range(hidden_size)]
    b1 = float(tensors["biattn/b1"])
    w2 = [float(tensors["biattn/W2"][t][0]) for t in range(seq)]
    b2 = float(tensors["biattn/b2"])
    wo = tensors["biattn/Wo"]

    scores = [[0.0] * n for _ in range(m)]
    for j in range(m):
        qvec = _flatten_feature(query_embs[j])
        qp = [[qvec[t * hidden_size + u] for u in range(hidden_size)] for t in range(seq)]
        for c in range(n):
            cvec = _flatten_feature(class_embs[c])
            cp = [[cvec[t * hidden_size + u] for u in range(hidden_size)] for t in range(seq)]
            head_cols = []
            for i in range(heads):
                wq = tensors[f"biattn/head{i}/Wq"]
                wc = tensors[f"biattn/head{i}/Wc"]
                qh = matmul_loops(qp, wq)
                ch = matmul_loops(cp, wc)
                head = bi_attention_loops([qh], [ch], float(dq))[0]
                head_cols.append(head)
            concat = [[head_cols[i][t][u] for i in range(heads) for u in range(dq)]
                      for t in range(seq)]
            hmat = matmul_loops(concat, wo)
            u_vals = [_sigmoid(sum(hmat[t][u] * w1[u] for u in range(hidden_size)) + b1)
                      for t in range(seq)]
            scores[j][c] = sum(u_vals[t] * w2[t] for t in range(seq)) + b2
    return scores


def relation_loops(query_embs, class_embs, tensors):
    """Relation-CNN comparator via the loop conv/pool/linear oracles."""
    m, n = len(query_embs), len(class_embs)
    scores = [[0.0] * n for _ in range(m)]
    k0, bias0 = tensors["relation/conv0/kernel"], tensors["relation/conv0/bias"]
    k1, bias1 = tensors["relation/conv1/kernel"], tensors["relation/conv1/bias"]
    w0, c0 = tensors["relation/fc0/weight"], tensors["relation/fc0/bias"]
    w1, c1 = tensors["relation/fc1/weight"], tensors["relation/fc1/bias"]
    for j in range(m):
        for c in range(n):
            x = [list(query_embs[j]) + list(class_embs[c])]
            for kernel, bias in ((k0, bias0), (k1, bias1)):
                x = conv2d_loops(x, kernel)
                x = [[[[max(0.0, v + float(bias[ch][0][0])) for v in row]
                       for row in x[0][ch]] for ch in range(len(x[0]))]]
                x = maxpool_loops(x)
            flat = _flatten_feature(x[0])
            hidden = [max(0.0, sum(flat[a] * float(w0[a][b]) for a in range(len(flat)))
                          + float(c0[b])) for b in range(len(c0))]
            raw = sum(hidden[b] * float(w1[b][0]) for b in range(len(hidden))) + float(c1[0])
            scores[j][c] = _sigmoid(raw)
    return scores


def proto_loops(query_embs, class_embs, k_shot):
    """Negative squared distance to class prototype (class sum / K)."""
    m, n = len(query_embs), len(class_embs)
    scores = [[0.0] * n for _ in range(m)]
    for j in range(m):
        q = _flatten_feature(query_embs[j])
        for c in range(n):
            proto = [v / k_shot for v in _flatten_feature(class_embs[c])]
            scores[j][c] = -sum((a - b) ** 2 for a, b in zip(q, proto))
    return scores


def episode_loss_scalar(scores, labels):
    """Mean negative log softmax probability of the labeled class."""
    total = 0.0
    for row, label in zip(scores, labels):
        m = max(float(v) for v in row)
        lse = m + math.log(sum(math.exp(float(v) - m) for v in row))
        total += lse - float(row[int(label)])
    return total / len(scores)


def ci95_scalar(accuracies):
    """1.96 * unbiased sample std / sqrt(n), by hand."""
    n = len(accuracies)
    mean = sum(accuracies) / n
    var = sum((a - mean) ** 2 for a in accuracies) / (n - 1)
    return 1.96 * math.sqrt(var) / math.sqrt(n)
