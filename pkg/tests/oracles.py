"""Independent reference implementations used as test oracles.

These deliberately avoid the package's vectorized code paths: plain loops,
explicit geometry and hand arithmetic.
"""
import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=None):
    """Direct nested-loop convolution (cross-correlation), zero padding."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding is None:
        padding = (kh - 1) // 2
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for di in range(kh):
                    for dj in range(kw):
                        r = i * stride + di - padding
                        c = j * stride + dj - padding
                        if 0 <= r < h and 0 <= c < wd:
                            for ci in range(cin):
                                acc += x[r, c, ci] * w[di, dj, ci, o]
                out[i, j, o] = acc
    return out


def block_mean(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = (x[2 * i, 2 * j] + x[2 * i + 1, 2 * j] + x[2 * i, 2 * j + 1] + x[2 * i + 1, 2 * j + 1]) / 4
    return out


def replicate(x):
    h, w, c = x.shape
    out = np.zeros((2 * h, 2 * w, c))
    for i in range(2 * h):
        for j in range(2 * w):
            out[i, j] = x[i // 2, j // 2]
    return out


def softmax_cells(logits):
    """Per-cell softmax across the first axis, computed cell by cell."""
    out = np.zeros_like(logits)
    flat_in = logits.reshape(logits.shape[0], -1)
    flat_out = out.reshape(logits.shape[0], -1)
    for j in range(flat_in.shape[1]):
        m = max(flat_in[:, j])
        e = [math.exp(v - m) for v in flat_in[:, j]]
        s = sum(e)
        for i in range(len(e)):
            flat_out[i, j] = e[i] / s
    return out


def fuse_loops(weights, feats):
    """weights (N, H, W), feats (N, H, W, C) -> (H, W, C) by scalar loops."""
    n, h, w, c = feats.shape
    out = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                out[i, j, ch] = sum(weights[a, i, j] * feats[a, i, j, ch] for a in range(n))
    return out


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_bruteforce(boxes, scores, keys, thresh):
    """Greedy NMS by repeated selection of the best remaining candidate."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = min(remaining, key=lambda i: (-scores[i], keys[i]))
        keep.append(best)
        remaining = [i for i in remaining if i != best and box_iou(boxes[best], boxes[i]) <= thresh]
    return keep


def ray_blocked(p0, p1, box, steps=4000):
    """Dense sampling along the segment; True if any sample lies in the closed box."""
    for s in range(steps + 1):
        t = s / steps
        x = p0[0] + t * (p1[0] - p0[0])
        y = p0[1] + t * (p1[1] - p0[1])
        if box[0] <= x <= box[2] and box[1] <= y <= box[3]:
            return True
    return False


def observe_raycast(scenario, agent_id, frame):
    """Per-cell brute-force visibility, straight from the observation definition."""
    cfg = scenario.config
    agent = scenario.agents[agent_id]
    boxes = scenario.boxes_at(frame)
    s = cfg.cell
    grid = np.zeros((cfg.grid, cfg.grid))
    for r in range(cfg.grid):
        for c in range(cfg.grid):
            x0, y0 = cfg.lo + c * s, cfg.lo + r * s
            cx, cy = x0 + s / 2, y0 + s / 2
            hits = [b for b in range(len(boxes))
                    if boxes[b][0] < x0 + s and boxes[b][2] > x0 and boxes[b][1] < y0 + s and boxes[b][3] > y0]
            if not hits:
                continue
            dx, dy = cx - agent.position[0], cy - agent.position[1]
            if math.hypot(dx, dy) > agent.range:
                continue
            ang = math.atan2(dy, dx) - agent.orientation
            ang = abs(math.atan2(math.sin(ang), math.cos(ang)))
            if ang > agent.half_angle:
                continue
            if cfg.occlusion:
                others = [b for b in range(len(boxes)) if b not in hits]
                if any(ray_blocked(agent.position, (cx, cy), boxes[b]) for b in others):
                    continue
            grid[r, c] = 1.0
    return grid


def pr_area(flags, n_gt):
    """All-point interpolated AP from TP flags in rank order, by hand-style steps."""
    tp = fp = 0
    points = []
    for f in flags:
        tp += f
        fp += (not f)
        points.append((tp / n_gt, tp / (tp + fp)))
    area, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(points):
        p_interp = max(p for rr, p in points[i:])
        area += (r - prev_r) * p_interp
        prev_r = r
    return area
