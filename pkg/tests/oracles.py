"""Independent brute-force references shared by the unit and acceptance tests."""
import itertools
import math

import numpy as np

from priordetr.prior_dcn import PriorDCN, kernel_grid, scalar_bilinear


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def randomize_heads(m: PriorDCN, rng, scale=0.7):
    for lin in (m.offset_head, m.scale_head, m.weight_head):
        lin.weight.data = rng.normal(scale=scale, size=lin.weight.shape)
        lin.bias.data = rng.normal(scale=scale, size=lin.bias.shape)


def brute_force_forward(m: PriorDCN, x, H, W, w_t, r_t):
    """Scalar reimplementation straight from the algorithm steps."""
    cfg = m.cfg
    G, K = cfg.groups, cfg.K
    _, L, C = x.shape
    cg = C // G
    grid = kernel_grid(K)
    maps = [x[0, :, c].reshape(H, W) for c in range(C)]
    Wo, bo = m.out_proj.weight.data, m.out_proj.bias.data
    out = np.zeros((L, C))
    for l in range(L):
        xl = x[0, l]
        raw = (m.offset_head.weight.data @ xl + m.offset_head.bias.data).reshape(G, K, 2)
        s = m.scale_head.weight.data @ xl + m.scale_head.bias.data
        logit = (m.weight_head.weight.data @ xl + m.weight_head.bias.data).reshape(G, K)
        agg = np.zeros(C)
        for g in range(G):
            e = [math.exp(v - logit[g].max()) for v in logit[g]]
            a = [v / sum(e) for v in e]
            for k in range(K):
                bx = (raw[g, k, 0] + grid[k, 0]) * sig(s[g]) * cfg.S_max
                by = (raw[g, k, 1] + grid[k, 1]) * sig(s[g]) * cfg.S_max
                mx, my = bx * w_t[g], by * w_t[g] * r_t[g]
                lim_x, lim_y = w_t[g] * cfg.S_max, w_t[g] * r_t[g] * cfg.S_max
                fx = min(max(mx, -lim_x), lim_x)
                fy = min(max(my, -lim_y), lim_y)
                px, py = l % W + fx, l // W + fy
                for c in range(g * cg, (g + 1) * cg):
                    agg[c] += a[k] * scalar_bilinear(maps[c], px, py)
        out[l] = Wo @ agg + bo
    return out


def brute_force_min(cost):
    q, g = cost.shape
    best = np.inf
    for rows in itertools.permutations(range(q), g):
        best = min(best, cost[list(rows), range(g)].sum())
    return best


def random_dataset(rng, n_images, size=256):
    dets, gts = [], []
    for i in range(n_images):
        n = int(rng.integers(1, 5))
        wh = rng.uniform(0.05, 0.6, (n, 2))
        c = rng.uniform(0.3, 0.7, (n, 2))
        boxes = np.concatenate([c, wh], 1)
        labels = rng.integers(0, 2, n)
        gts.append({"id": i, "boxes": boxes, "labels": labels, "height": size, "width": size})
        k = int(rng.integers(0, 7))
        src = rng.integers(0, n, k)
        jitter = rng.normal(scale=0.03, size=(k, 4))
        db = np.clip(boxes[src] + jitter, 0.01, 1.0)
        dl = np.where(rng.random(k) < 0.8, labels[src], 1 - labels[src])
        dets.append({"boxes": db, "scores": rng.random(k), "labels": dl})
    return dets, gts


# -- independent brute-force oracle ----------------------------------------

def oracle_iou(a, b, H, W):
    ax1, ay1 = (a[0] - a[2] / 2) * W, (a[1] - a[3] / 2) * H
    ax2, ay2 = (a[0] + a[2] / 2) * W, (a[1] + a[3] / 2) * H
    bx1, by1 = (b[0] - b[2] / 2) * W, (b[1] - b[3] / 2) * H
    bx2, by2 = (b[0] + b[2] / 2) * W, (b[1] + b[3] / 2) * H
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def oracle_ap(dets, gts, cls, thr, lo, hi):
    """Recount TP/FP from scratch at every score cutoff, then 101-point AP."""
    def area(b, g):
        return b[2] * g["width"] * b[3] * g["height"]

    n_pos = sum(1 for g in gts for b, l in zip(g["boxes"], g["labels"])
                if l == cls and lo <= area(b, g) < hi)
    if n_pos == 0:
        return None
    all_scores = sorted({s for d in dets for s, l in zip(d["scores"], d["labels"]) if l == cls},
                        reverse=True)
    points = []
    for cut in all_scores:
        tp = fp = 0
        for d, g in zip(dets, gts):
            cand = [(s, b) for s, b, l in zip(d["scores"], d["boxes"], d["labels"])
                    if l == cls and s >= cut]
            cand.sort(key=lambda t: -t[0])
            gt_list = [(b, not (lo <= area(b, g) < hi))
                       for b, l in zip(g["boxes"], g["labels"]) if l == cls]
            used = [False] * len(gt_list)
            for _, b in cand:
                best_reg, best_ign = None, None
                for j, (gb, ign) in enumerate(gt_list):
                    if used[j]:
                        continue
                    v = oracle_iou(b, gb, g["height"], g["width"])
                    if v < thr:
                        continue
                    if not ign and (best_reg is None or v >= best_reg[1]):
                        best_reg = (j, v)
                    if ign and (best_ign is None or v >= best_ign[1]):
                        best_ign = (j, v)
                if best_reg is not None:
                    used[best_reg[0]] = True
                    tp += 1
                elif best_ign is not None:
                    used[best_ign[0]] = True
                elif lo <= area(b, g) < hi:
                    fp += 1
        points.append((tp / max(tp + fp, 1), tp / n_pos))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        ok = [p for p, rc in points if rc >= r]
        total += max(ok) if ok else 0.0
    return total / 101
