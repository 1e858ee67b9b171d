"""MOT 评测：CLEAR (MOTA)、IDF1、HOTA (DetA/AssA)，以及嵌入相似度分析"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from adaptrack.geometry import gated_assignment, hungarian, iou_matrix
from adaptrack.tracker import TrackRecord

logger = logging.getLogger(__name__)

HOTA_ALPHAS = np.arange(0.05, 0.99, 0.05)
_EPS = np.finfo(np.float64).eps


class MetricError(Exception):
    """评测输入无效"""
    pass


@dataclass
class _Frame:
    ids: np.ndarray
    boxes: np.ndarray


def _by_frame(records: Sequence[TrackRecord]) -> dict[int, _Frame]:
    grouped: dict[int, list[TrackRecord]] = {}
    for r in records:
        grouped.setdefault(r.frame, []).append(r)
    return {
        frame: _Frame(
            ids=np.array([r.id for r in rows], dtype=np.int64),
            boxes=np.array([r.box.as_array() for r in rows]).reshape(-1, 4),
        )
        for frame, rows in grouped.items()
    }


def _frames(gt: Sequence[TrackRecord], pred: Sequence[TrackRecord]):
    if not gt:
        raise MetricError("真值为空，指标分母未定义")
    g, p = _by_frame(gt), _by_frame(pred)
    empty = _Frame(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
    for frame in sorted(set(g) | set(p)):
        yield frame, g.get(frame, empty), p.get(frame, empty)


# ---------------------------------------------------------------- CLEAR


@dataclass
class ClearResult:
    mota: float
    tp: int
    fp: int
    fn: int
    idsw: int
    num_gt: int


def clear_mota(gt: Sequence[TrackRecord], pred: Sequence[TrackRecord], iou_threshold: float = 0.5) -> ClearResult:
    """
    MOTA = 1 - (FN + FP + IDSW) / num_gt

    每帧先沿用上一帧仍然有效（IoU ≥ 阈值）的匹配，其余在 1-IoU 上做匈牙利；
    真值匹配到的预测身份与其上一次匹配不同时记一次 IDSW。
    """
    tp = fp = fn = idsw = num_gt = 0
    previous: dict[int, int] = {}
    last_match: dict[int, int] = {}
    for _, g, p in _frames(gt, pred):
        num_gt += g.ids.size
        ious = iou_matrix(g.boxes, p.boxes)
        allowed = ious >= iou_threshold
        matches: dict[int, int] = {}

        p_index = {int(pid): j for j, pid in enumerate(p.ids)}
        for i, gid in enumerate(g.ids):
            j = p_index.get(previous.get(int(gid), -1))
            if j is not None and allowed[i, j]:
                matches[i] = j
        rows = [i for i in range(g.ids.size) if i not in matches]
        cols = [j for j in range(p.ids.size) if j not in matches.values()]
        if rows and cols:
            sub = np.ix_(rows, cols)
            for r, c in gated_assignment(1.0 - ious[sub], allowed[sub]):
                matches[rows[r]] = cols[c]

        current: dict[int, int] = {}
        for i, j in matches.items():
            gid, pid = int(g.ids[i]), int(p.ids[j])
            if gid in last_match and last_match[gid] != pid:
                idsw += 1
            last_match[gid] = pid
            current[gid] = pid
        previous = current
        tp += len(matches)
        fn += g.ids.size - len(matches)
        fp += p.ids.size - len(matches)

    mota = 1.0 - (fn + fp + idsw) / num_gt
    return ClearResult(mota=mota, tp=tp, fp=fp, fn=fn, idsw=idsw, num_gt=num_gt)


# ---------------------------------------------------------------- IDF1


@dataclass
class IdResult:
    idf1: float
    idtp: int
    idfp: int
    idfn: int


def idf1(gt: Sequence[TrackRecord], pred: Sequence[TrackRecord], iou_threshold: float = 0.5) -> IdResult:
    """
    轨迹级全局二分匹配，最大化 IDTP；IDF1 = 2·IDTP / (2·IDTP + IDFP + IDFN)
    """
    gt_ids = sorted({r.id for r in gt})
    pred_ids = sorted({r.id for r in pred})
    gi = {v: i for i, v in enumerate(gt_ids)}
    pi = {v: i for i, v in enumerate(pred_ids)}
    overlap = np.zeros((len(gt_ids), len(pred_ids)))
    for _, g, p in _frames(gt, pred):
        if g.ids.size and p.ids.size:
            hit = iou_matrix(g.boxes, p.boxes) >= iou_threshold
            rows, cols = np.nonzero(hit)
            for r, c in zip(rows, cols):
                overlap[gi[int(g.ids[r])], pi[int(p.ids[c])]] += 1

    idtp = 0
    if overlap.size:
        assignment = hungarian(-overlap)
        idtp = int(sum(overlap[r, c] for r, c in assignment.pairs))
    idfn = len(gt) - idtp
    idfp = len(pred) - idtp
    return IdResult(idf1=2.0 * idtp / (len(gt) + len(pred)), idtp=idtp, idfp=idfp, idfn=idfn)


# ---------------------------------------------------------------- HOTA


@dataclass
class HotaResult:
    """各 α 下的计数；ass_sum = Σ_TP A(c)，跨序列按计数求和"""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    ass_sum: np.ndarray
    alphas: np.ndarray = field(default_factory=lambda: HOTA_ALPHAS.copy())

    @property
    def deta_alpha(self) -> np.ndarray:
        return self.tp / np.maximum(1.0, self.tp + self.fp + self.fn)

    @property
    def assa_alpha(self) -> np.ndarray:
        return self.ass_sum / np.maximum(1.0, self.tp)

    @property
    def hota_alpha(self) -> np.ndarray:
        return np.sqrt(self.deta_alpha * self.assa_alpha)

    @property
    def hota(self) -> float:
        return float(self.hota_alpha.mean())

    @property
    def deta(self) -> float:
        return float(self.deta_alpha.mean())

    @property
    def assa(self) -> float:
        return float(self.assa_alpha.mean())

    def __add__(self, other: HotaResult) -> HotaResult:
        return HotaResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.ass_sum + other.ass_sum, self.alphas)


def _similarity_iou(sim: np.ndarray) -> np.ndarray:
    denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
    out = np.zeros_like(sim)
    ok = denom > _EPS
    out[ok] = sim[ok] / denom[ok]
    return out


def hota(gt: Sequence[TrackRecord], pred: Sequence[TrackRecord]) -> HotaResult:
    """
    HOTA，α ∈ {0.05, …, 0.95}

    先用全序列的对齐分数给每对 (gt, pred) 身份打分，每帧在 对齐分数×IoU 上做匈牙利，
    IoU ≥ α 的匹配计为 TP；A(c) = TPA / (TPA + FPA + FNA)。
    """
    frames = list(_frames(gt, pred))
    gt_ids = sorted({r.id for r in gt})
    pred_ids = sorted({r.id for r in pred})
    gi = {v: i for i, v in enumerate(gt_ids)}
    pi = {v: i for i, v in enumerate(pred_ids)}
    n_a = HOTA_ALPHAS.size

    potential = np.zeros((len(gt_ids), len(pred_ids)))
    gt_count = np.zeros((len(gt_ids), 1))
    pred_count = np.zeros((1, len(pred_ids)))
    for _, g, p in frames:
        g_idx = np.array([gi[int(v)] for v in g.ids], dtype=np.int64)
        p_idx = np.array([pi[int(v)] for v in p.ids], dtype=np.int64)
        if g_idx.size and p_idx.size:
            potential[np.ix_(g_idx, p_idx)] += _similarity_iou(iou_matrix(g.boxes, p.boxes))
        np.add.at(gt_count, (g_idx, 0), 1)
        np.add.at(pred_count, (0, p_idx), 1)
    alignment = potential / np.maximum(_EPS, gt_count + pred_count - potential)

    tp = np.zeros(n_a)
    fp = np.zeros(n_a)
    fn = np.zeros(n_a)
    matches = np.zeros((n_a, len(gt_ids), len(pred_ids)))
    for _, g, p in frames:
        if g.ids.size == 0 or p.ids.size == 0:
            fn += g.ids.size
            fp += p.ids.size
            continue
        g_idx = np.array([gi[int(v)] for v in g.ids], dtype=np.int64)
        p_idx = np.array([pi[int(v)] for v in p.ids], dtype=np.int64)
        sim = iou_matrix(g.boxes, p.boxes)
        score = alignment[np.ix_(g_idx, p_idx)] * sim
        pairs = hungarian(-score).pairs
        rows = np.array([r for r, _ in pairs], dtype=np.int64)
        cols = np.array([c for _, c in pairs], dtype=np.int64)
        for a, alpha in enumerate(HOTA_ALPHAS):
            ok = sim[rows, cols] >= alpha - _EPS
            n_ok = int(ok.sum())
            tp[a] += n_ok
            fn[a] += g.ids.size - n_ok
            fp[a] += p.ids.size - n_ok
            if n_ok:
                matches[a, g_idx[rows[ok]], p_idx[cols[ok]]] += 1

    ass_sum = np.zeros(n_a)
    for a in range(n_a):
        m = matches[a]
        ass = m / np.maximum(1.0, gt_count + pred_count - m)
        ass_sum[a] = float((m * ass).sum())
    return HotaResult(tp=tp, fp=fp, fn=fn, ass_sum=ass_sum)


# ---------------------------------------------------------------- 汇总


@dataclass
class EvalResult:
    """百分比指标与计数"""
    HOTA: float
    DetA: float
    AssA: float
    IDF1: float
    MOTA: float
    TP: int
    FP: int
    FN: int
    IDSW: int
    IDTP: int
    IDFP: int
    IDFN: int

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


def _combine(clear: ClearResult, ident: IdResult, h: HotaResult, num_pred: int) -> EvalResult:
    return EvalResult(
        HOTA=100.0 * h.hota,
        DetA=100.0 * h.deta,
        AssA=100.0 * h.assa,
        IDF1=100.0 * 2.0 * ident.idtp / (clear.num_gt + num_pred),
        MOTA=100.0 * (1.0 - (clear.fn + clear.fp + clear.idsw) / clear.num_gt),
        TP=clear.tp, FP=clear.fp, FN=clear.fn, IDSW=clear.idsw,
        IDTP=ident.idtp, IDFP=ident.idfp, IDFN=ident.idfn,
    )


def evaluate(gt: Sequence[TrackRecord], pred: Sequence[TrackRecord]) -> EvalResult:
    return evaluate_sequences([(gt, pred)])


def evaluate_sequences(sequences: Sequence[tuple[Sequence[TrackRecord], Sequence[TrackRecord]]]) -> EvalResult:
    """多序列按计数求和汇总，而不是对指标取平均"""
    if not sequences:
        raise MetricError("没有可评测的序列")
    clear = ClearResult(0.0, 0, 0, 0, 0, 0)
    ident = IdResult(0.0, 0, 0, 0)
    total_hota = None
    num_pred = 0
    for gt, pred in sequences:
        c = clear_mota(gt, pred)
        i = idf1(gt, pred)
        h = hota(gt, pred)
        clear = ClearResult(0.0, clear.tp + c.tp, clear.fp + c.fp, clear.fn + c.fn,
                            clear.idsw + c.idsw, clear.num_gt + c.num_gt)
        ident = IdResult(0.0, ident.idtp + i.idtp, ident.idfp + i.idfp, ident.idfn + i.idfn)
        total_hota = h if total_hota is None else total_hota + h
        num_pred += len(pred)
    result = _combine(clear, ident, total_hota, num_pred)
    logger.info(f"评测 {len(sequences)} 个序列: HOTA={result.HOTA:.2f}, IDF1={result.IDF1:.2f}, "
                f"MOTA={result.MOTA:.2f}")
    return result


# ---------------------------------------------------------------- 相似度分析


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    values: np.ndarray


def similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    """
    余弦相似度矩阵，对称且对角线为 1

    Raises:
        MetricError: 空集合或零范数嵌入
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise MetricError("至少需要一个嵌入")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0.0):
        raise MetricError("存在零范数嵌入")
    unit = e / norms[:, None]
    sim = unit @ unit.T
    sim = np.clip((sim + sim.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def top_k_similarity_distribution(frames: Sequence[np.ndarray], k: int = 3,
                                  bin_width: float = 0.05) -> Histogram:
    """
    每帧取两两余弦相似度中最大的 min(k, 对数) 个，跨帧汇总后按固定宽度分箱到 [-1, 1]

    少于 2 个目标的帧跳过。
    """
    values = []
    for emb in frames:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 2:
            continue
        sim = similarity_matrix(emb)
        upper = sim[np.triu_indices(emb.shape[0], k=1)]
        values.extend(np.sort(upper)[::-1][:k].tolist())
    n_bins = int(round(2.0 / bin_width))
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    values = np.array(values)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges=edges, counts=counts, values=values)


def high_similarity_fraction(values: np.ndarray, threshold: float = 0.9) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float((values > threshold).mean())
