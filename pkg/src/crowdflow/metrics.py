"""Trajectory evaluation metrics.

Episode-level metrics compare a predicted and a ground-truth episode after
aligning them by pedestrian id and frame number; only (pedestrian, frame)
cells observed in both count.  Per-frame reductions run in frame order and
per-pedestrian ones in id order, so results are deterministic.

Report fields (JSON object and CSV row, in this order):

    mae   mean l2 position error over mutually observed cells
    fde   mean l2 error at each pedestrian's last mutually observed frame
    ot    per-frame entropic optimal-transport cost between position sets, averaged
    mmd   per-frame biased squared MMD between pairwise-distance sets, averaged
    dtw   per-pedestrian dynamic-time-warping distance, averaged
    col   number of (frame, pair) cells closer than d_thres in the prediction
    ot_epsilon, ot_debiased, mmd_bandwidth, d_thres   configuration echo
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .scene import Episode


class MetricError(ValueError):
    pass


# alignment


def align(pred: Episode, gt: Episode):
    """Common pedestrian ids and frames; returns ``(ids, frames, pred_pos, gt_pos, mask)``.

    Positions are (P, T, 2) over the sorted common ids and frames; ``mask``
    marks cells observed in both episodes.
    """
    ids = np.intersect1d(pred.ped_ids, gt.ped_ids)
    frames = np.intersect1d(pred.frames, gt.frames)
    pi = _index(pred.ped_ids, ids)
    gi = _index(gt.ped_ids, ids)
    pf = _index(pred.frames, frames)
    gf = _index(gt.frames, frames)
    pp = pred.pos[np.ix_(pi, pf)] if ids.size and frames.size else np.zeros((len(ids), len(frames), 2))
    gp = gt.pos[np.ix_(gi, gf)] if ids.size and frames.size else np.zeros((len(ids), len(frames), 2))
    mask = (pred.has_pos[np.ix_(pi, pf)] & gt.has_pos[np.ix_(gi, gf)]) if ids.size and frames.size \
        else np.zeros((len(ids), len(frames)), dtype=bool)
    return ids, frames, pp, gp, mask


def _index(values: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    lookup = {int(v): i for i, v in enumerate(values)}
    return np.array([lookup[int(w)] for w in wanted], dtype=np.intp)


# displacement errors


def mae(pred: Episode, gt: Episode) -> float:
    _, _, pp, gp, mask = align(pred, gt)
    if not mask.any():
        raise MetricError("mae: no mutually valid (pedestrian, frame) pairs")
    return float(np.linalg.norm(pp[mask] - gp[mask], axis=-1).mean())


def fde(pred: Episode, gt: Episode) -> float:
    _, _, pp, gp, mask = align(pred, gt)
    errors = []
    for i in range(mask.shape[0]):
        idx = np.flatnonzero(mask[i])
        if idx.size:
            t = idx[-1]
            errors.append(float(np.linalg.norm(pp[i, t] - gp[i, t])))
    if not errors:
        raise MetricError("fde: no pedestrian has a mutually valid frame")
    return float(np.mean(errors))


# optimal transport


def _lse(M: np.ndarray, axis: int) -> np.ndarray:
    # max-shifted log-sum-exp; scipy's version costs more than the math on 3x3 inputs
    top = M.max(axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.exp(M - top).sum(axis=axis))


def sinkhorn(x: np.ndarray, y: np.ndarray, epsilon: float, tol: float = 1e-9, max_iter: int = 10_000):
    """Log-domain Sinkhorn between uniform point sets under the l2 cost.

    Returns ``(cost, plan, iterations)`` where ``cost = <plan, C>``.  Iteration
    stops when the row-marginal violation (l1) drops below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 2)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise MetricError("sinkhorn: empty point set")
    if epsilon <= 0:
        raise MetricError(f"sinkhorn: epsilon must be > 0, got {epsilon}")
    C = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1)
    K = -C / epsilon
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    g = np.zeros(m)
    # row reduction for the current g; it yields both the next f and the row marginals
    L = _lse(K + (g / epsilon + log_b)[None, :], axis=1)
    it = 0
    for it in range(1, max_iter + 1):
        f = -epsilon * L
        g = -epsilon * _lse(K + (f / epsilon + log_a)[:, None], axis=0)
        L = _lse(K + (g / epsilon + log_b)[None, :], axis=1)
        row = np.exp(f / epsilon + log_a + L)
        if np.abs(row - np.exp(log_a)).sum() < tol:
            break
    plan = np.exp(K + (f / epsilon + log_a)[:, None] + (g / epsilon + log_b)[None, :])
    return float((plan * C).sum()), plan, it


def ot_cost(x: np.ndarray, y: np.ndarray, epsilon: float = 0.01, debiased: bool = False) -> float:
    cost = sinkhorn(x, y, epsilon)[0]
    if debiased:
        cost -= 0.5 * (sinkhorn(x, x, epsilon)[0] + sinkhorn(y, y, epsilon)[0])
        cost = max(cost, 0.0)
    return cost


def ot(pred: Episode, gt: Episode, epsilon: float = 0.01, debiased: bool = False) -> float:
    """Per-frame OT cost between the predicted and true position sets, averaged over frames."""
    pred_sets, gt_sets = _frame_sets(pred, gt)
    costs = [ot_cost(a, b, epsilon, debiased) for a, b in zip(pred_sets, gt_sets) if len(a) and len(b)]
    if not costs:
        raise MetricError("ot: every frame has an empty position set")
    return float(np.mean(costs))


def _frame_sets(pred: Episode, gt: Episode):
    frames = np.intersect1d(pred.frames, gt.frames)
    pf = _index(pred.frames, frames)
    gf = _index(gt.frames, frames)
    pred_sets = [pred.pos[pred.has_pos[:, t], t] for t in pf]
    gt_sets = [gt.pos[gt.has_pos[:, t], t] for t in gf]
    return pred_sets, gt_sets


# maximum mean discrepancy


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Distances of every unordered pair ``i < j``, in index order."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    i, j = np.triu_indices(len(pts), k=1)
    return np.linalg.norm(pts[i] - pts[j], axis=-1)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median of absolute differences over the pooled sample; 1.0 when degenerate."""
    pooled = np.concatenate([np.ravel(x), np.ravel(y)])
    diffs = np.abs(pooled[:, None] - pooled[None, :])[np.triu_indices(len(pooled), k=1)]
    med = float(np.median(diffs)) if diffs.size else 0.0
    return med if med > 0 else 1.0


def mmd2(x: np.ndarray, y: np.ndarray, bandwidth: float) -> float:
    """Biased squared MMD of 1-D samples with ``k(a, b) = exp(-(a - b)^2 / (2 h^2))``."""
    x = np.ravel(np.asarray(x, dtype=np.float64))
    y = np.ravel(np.asarray(y, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise MetricError("mmd: empty sample")

    def k(a, b):
        return np.exp(-((a[:, None] - b[None, :]) ** 2) / (2.0 * bandwidth * bandwidth))

    value = k(x, x).mean() + k(y, y).mean() - 2.0 * k(x, y).mean()
    return float(max(value, 0.0))


def mmd(pred: Episode, gt: Episode, bandwidth: float = 0.0) -> float:
    """Per-frame MMD between inter-pedestrian distance sets; ``bandwidth <= 0`` selects the median heuristic."""
    pred_sets, gt_sets = _frame_sets(pred, gt)
    values = []
    for a, b in zip(pred_sets, gt_sets):
        if len(a) < 2 or len(b) < 2:
            continue
        da, db = pairwise_distances(a), pairwise_distances(b)
        h = bandwidth if bandwidth > 0 else median_bandwidth(da, db)
        values.append(mmd2(da, db, h))
    if not values:
        raise MetricError("mmd: no frame has at least two pedestrians on both sides")
    return float(np.mean(values))


# dynamic time warping


def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("dtw: empty sequence")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    n, m = cost.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = cost[i - 1, j - 1] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[n, m])


def dtw(pred: Episode, gt: Episode) -> float:
    """Mean DTW over pedestrians present in both episodes, each using its own observed frames."""
    ids = np.intersect1d(pred.ped_ids, gt.ped_ids)
    pi = _index(pred.ped_ids, ids)
    gi = _index(gt.ped_ids, ids)
    values = []
    for i, j in zip(pi, gi):
        a = pred.pos[i, pred.has_pos[i]]
        b = gt.pos[j, gt.has_pos[j]]
        if len(a) and len(b):
            values.append(dtw_distance(a, b))
    if not values:
        raise MetricError("dtw: no pedestrian has observations in both episodes")
    return float(np.mean(values))


# collisions


def collision_count(episode: Episode, d_thres: float = 0.5) -> int:
    if d_thres <= 0:
        raise MetricError(f"d_thres must be > 0, got {d_thres}")
    count = 0
    for t in range(episode.n_frames):
        pts = episode.pos[episode.has_pos[:, t], t]
        if len(pts) >= 2:
            count += int((pairwise_distances(pts) < d_thres).sum())
    return count


# report


@dataclass
class MetricReport:
    mae: float
    fde: float
    ot: float
    mmd: float
    dtw: float
    col: int
    ot_epsilon: float
    ot_debiased: bool
    mmd_bandwidth: float
    d_thres: float

    FIELDS = ("mae", "fde", "ot", "mmd", "dtw", "col", "ot_epsilon", "ot_debiased", "mmd_bandwidth", "d_thres")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.FIELDS)

    def csv_row(self) -> str:
        out = []
        for name in self.FIELDS:
            v = getattr(self, name)
            out.append(str(v).lower() if isinstance(v, bool) else (str(v) if isinstance(v, int) else repr(float(v))))
        return ",".join(out)


def evaluate(pred: Episode, gt: Episode, epsilon: float = 0.01, debiased: bool = False,
             bandwidth: float = 0.0, d_thres: float = 0.5) -> MetricReport:
    return MetricReport(
        mae=mae(pred, gt),
        fde=fde(pred, gt),
        ot=ot(pred, gt, epsilon, debiased),
        mmd=mmd(pred, gt, bandwidth),
        dtw=dtw(pred, gt),
        col=collision_count(pred, d_thres),
        ot_epsilon=float(epsilon),
        ot_debiased=bool(debiased),
        mmd_bandwidth=float(bandwidth),
        d_thres=float(d_thres),
    )
