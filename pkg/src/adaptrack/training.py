"""训练：损失组合、ID 分类损失、AdamW 与玩具训练循环"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from adaptrack.config import Config, LossWeights
from adaptrack.diffcore import Module, Tensor, as_tensor, concat, l2_normalize, log_softmax, stack
from adaptrack.geometry import focal_loss, giou_loss_tensor, l1_box_loss_tensor
from adaptrack.identity import LabeledEmbedding, ia_loss, sample_pairs
from adaptrack.model import TrackingModel, embed_scenario
from adaptrack.metrics import EvalResult, evaluate_sequences
from adaptrack.simkit import (
    ClipFrame,
    Scenario,
    TrainingClip,
    augment_batch,
    build_clip,
    make_rng,
    render_pyramid,
    sample_clip_frames,
)
from adaptrack.spatial import discretize_depth_map, rasterize_foreground, weighted_depth_loss
from adaptrack.temporal import temporal_encode
from adaptrack.tracker import TrackRecord, track_sequence

logger = logging.getLogger(__name__)

STREAM_TRAIN = 5


class TrainingError(Exception):
    """训练无法继续"""
    pass


@dataclass
class LossBreakdown:
    det: float = 0.0
    id: float = 0.0
    depth: float = 0.0
    ia: float = 0.0
    total: float = 0.0

    def __add__(self, other: LossBreakdown) -> LossBreakdown:
        return LossBreakdown(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def scaled(self, factor: float) -> LossBreakdown:
        return LossBreakdown(*(getattr(self, f.name) * factor for f in fields(self)))

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __str__(self) -> str:
        return ", ".join(f"{k}={v:.4f}" for k, v in self.as_dict().items())


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def detection_loss(cls, l1, giou, w: LossWeights):
    """λ_cls·cls + λ_bbox·L1 + λ_giou·GIoU"""
    return cls * w.cls + l1 * w.bbox + giou * w.giou


def total_loss(det, id_, depth, ia, w: LossWeights):
    """
    L = L_det + λ_ID·L_ID + λ_depth·L_depth + λ_IA·L_IA，系数为 0 的项不进入计算图

    Raises:
        TrainingError: 分量为负
    """
    for name, value in (("det", det), ("id", id_), ("depth", depth), ("ia", ia)):
        if np.any(_value(value) < 0):
            raise TrainingError(f"损失分量 {name} 为负: {float(np.min(_value(value)))}")
    total = det
    for weight, term in ((w.id, id_), (w.depth, depth), (w.ia, ia)):
        if weight > 0:
            total = total + term * weight
    return total


def id_loss(logits, target: int, new_logit=None) -> Tensor:
    """
    候选身份 logits（可附加新目标类）上的 softmax 交叉熵

    Raises:
        TrainingError: 没有候选或目标越界
    """
    logits = as_tensor(logits).reshape(-1)
    if new_logit is not None:
        logits = concat([logits, as_tensor(new_logit).reshape(1)])
    n = logits.shape[0]
    if n == 0:
        raise TrainingError("没有候选身份，也没有新目标类")
    if not 0 <= target < n:
        raise TrainingError(f"目标下标 {target} 超出候选数 {n}")
    return -log_softmax(logits)[target]


def id_loss_batch(queries: Tensor, candidates: Optional[Tensor], targets: np.ndarray,
                  new_logit: Tensor, temperature: float) -> Tensor:
    """一组查询的 id_loss 之和；logit 为余弦相似度/温度，最后一列是新目标类"""
    n = queries.shape[0]
    new_col = Tensor(np.ones((n, 1))) @ new_logit.reshape(1, 1)
    if candidates is None:
        logits = new_col
    else:
        sims = l2_normalize(queries) @ l2_normalize(candidates).T / temperature
        logits = concat([sims, new_col], axis=1)
    return -log_softmax(logits, axis=-1)[np.arange(n), np.asarray(targets, dtype=np.int64)].sum()


class AdamW:
    """解耦权重衰减的 Adam，只更新本步收到梯度的参数"""

    def __init__(self, model: Module, lr: float = 1e-4, weight_decay: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(model.named_parameters())
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self) -> int:
        b1, b2 = self.betas
        updated = 0
        for name, p in self.params:
            if p.grad is None:
                continue
            st = self.state.setdefault(name, {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * p.grad
            st["v"] = b2 * st["v"] + (1 - b2) * p.grad * p.grad
            m_hat = st["m"] / (1 - b1 ** st["t"])
            v_hat = st["v"] / (1 - b2 ** st["t"])
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            updated += 1
        return updated


# ---------------------------------------------------------------- 片段损失


def _detection_term(model: TrackingModel, emb: Tensor, cf: ClipFrame, keep: np.ndarray,
                    config: Config) -> Tensor:
    w = config.loss
    boxes = cf.boxes[keep]
    matched = cf.matched_gt[keep]
    ious = cf.ious[keep]
    offsets, probs = model.heads(emb)
    n = boxes.shape[0]
    targets = ((matched >= 0) & (ious >= config.run.iou_threshold)).astype(int)
    cls = stack([focal_loss(probs[i], int(targets[i])) for i in range(n)]).sum() / float(n)

    pos = np.flatnonzero(targets)
    if pos.size == 0:
        return detection_loss(cls, 0.0, 0.0, w)
    arena = np.array([model.arena[0], model.arena[1], model.arena[0], model.arena[1]])
    pred = model.refine_boxes(boxes[pos], offsets[pos]) / arena
    gt = cf.gt_boxes[matched[pos]] / arena
    l1 = l1_box_loss_tensor(pred, gt) / float(pos.size)
    giou = giou_loss_tensor(pred, gt).sum() / float(pos.size)
    return detection_loss(cls, l1, giou, w)


def clip_losses(model: TrackingModel, clip: TrainingClip, scenario: Scenario, config: Config,
                use_ia: bool = True) -> tuple[Tensor, LossBreakdown]:
    """
    一个片段上的全部损失

    ID 损失：每个查询帧的检测与此前出现过的身份比较，历史取该身份最近一次出现位置
    的（时间适配器精炼后的）嵌入；未出现过的身份归入新目标类。
    """
    a, w = config.ablation, config.loss
    grid = (config.scenario.depth_grid, config.scenario.depth_grid)
    det_terms, depth_terms = [], []
    rows: list[Optional[tuple[Tensor, np.ndarray, np.ndarray]]] = []

    for cf in clip.frames:
        keep = cf.present
        fg = targets = None
        if a.sa:
            fg = rasterize_foreground(cf.gt_boxes, grid, scenario.arena)
            targets = discretize_depth_map(scenario.depth_grids[cf.index], model.bins)
        if not keep.any() and not a.sa:
            rows.append(None)
            continue
        out = model.embed_frame(cf.boxes[keep], cf.observations[keep], render_pyramid(scenario, cf.index),
                                fg, targets)
        if a.sa and w.depth > 0:
            fg_weight = config.run.fg_weight if a.fg_weighting else 1.0
            depth_terms.append(weighted_depth_loss(out.depth.field, model.bins, fg_weight=fg_weight))
        if keep.any():
            det_terms.append(_detection_term(model, out.embeddings, cf, keep, config))
            rows.append((out.embeddings, cf.labels[keep], cf.ious[keep]))
        else:
            rows.append(None)

    det = stack(det_terms).mean() if det_terms else Tensor(0.0)
    depth = stack(depth_terms).mean() if depth_terms else Tensor(0.0)
    id_term = _id_term(model, clip, rows, config) if w.id > 0 else Tensor(0.0)

    ia = Tensor(0.0)
    if use_ia and a.ia and a.contrastive and w.ia > 0:
        pool = []
        for cf, row in zip(clip.frames, rows):
            if row is None:
                continue
            emb, labels, ious = row
            for j in np.flatnonzero(labels >= 0):
                pool.append(LabeledEmbedding(emb[int(j)], cf.frame, int(labels[j]), float(ious[j]), int(j)))
        pairs = sample_pairs(pool, config.run.iou_threshold, use_filter=a.iou_filter)
        ia = ia_loss(pairs, model.phi if a.cfe else None, config.run.tau)

    total = total_loss(det, id_term, depth, ia, w)
    parts = LossBreakdown(det=_value(det).item(), id=_value(id_term).item(), depth=_value(depth).item(),
                          ia=_value(ia).item(), total=_value(total).item())
    return as_tensor(total), parts


def _id_term(model: TrackingModel, clip: TrainingClip, rows, config: Config) -> Tensor:
    T = clip.T
    slots: dict[int, list] = {}
    for t, row in enumerate(rows):
        if row is None:
            continue
        emb, labels, _ = row
        for j in np.flatnonzero(labels >= 0):
            slots.setdefault(int(labels[j]), [None] * T)[t] = emb[int(j)]
    if not slots:
        return Tensor(0.0)

    history: dict[int, list] = {}
    for identity, seq in slots.items():
        if config.ablation.ta:
            window = model.temporal.window(identity, seq)
            refined = temporal_encode(window, model.temporal)
            history[identity] = [refined[t] if seq[t] is not None else None for t in range(T)]
        else:
            history[identity] = seq

    total, count = None, 0
    for t in range(1, T):
        row = rows[t]
        if row is None:
            continue
        emb, labels, _ = row
        query_idx = np.flatnonzero(labels >= 0)
        if query_idx.size == 0:
            continue
        candidates, cand_ids = [], []
        for identity in sorted(history):
            past = [h for h in history[identity][:t] if h is not None]
            if past:
                candidates.append(past[-1])
                cand_ids.append(identity)
        position = {identity: k for k, identity in enumerate(cand_ids)}
        targets = np.array([position.get(int(labels[j]), len(cand_ids)) for j in query_idx])
        queries = stack([emb[int(j)] for j in query_idx])
        term = id_loss_batch(queries, stack(candidates) if candidates else None, targets,
                             model.new_logit, config.model.id_temperature)
        total = term if total is None else total + term
        count += query_idx.size
    if total is None:
        return Tensor(0.0)
    return total / float(count)


# ---------------------------------------------------------------- 训练循环


@dataclass
class TrainResult:
    model: TrackingModel
    history: list[LossBreakdown] = field(default_factory=list)


def train_toy(config: Config, scenarios: Sequence[Scenario], model: Optional[TrackingModel] = None) -> TrainResult:
    """
    玩具训练循环：每个场景每轮采样 clips_per_scenario 个片段（帧间隔 1..max_interval），
    经遮挡/交换增强后计算损失并更新；前 ia_warmup_epochs 轮不计身份适配器损失

    Raises:
        TrainingError: 没有场景或损失非有限
    """
    if not scenarios:
        raise TrainingError("至少需要一个场景")
    run = config.run
    model = model or TrackingModel(config)
    optimizer = AdamW(model, lr=run.learning_rate, weight_decay=run.weight_decay)
    rng = make_rng(run.seed, STREAM_TRAIN)
    history = []

    for epoch in range(run.epochs):
        use_ia = epoch >= run.ia_warmup_epochs
        sums, n = LossBreakdown(), 0
        for s_idx, scenario in enumerate(scenarios):
            for c_idx in range(run.clips_per_scenario):
                indices = sample_clip_frames(scenario.n_frames, run.T, rng, run.max_interval)
                clip = augment_batch(build_clip(scenario, indices), run.occlusion_prob, run.switch_prob,
                                     seed=int(rng.integers(0, 2 ** 31 - 1)))
                model.zero_grad()
                total, parts = clip_losses(model, clip, scenario, config, use_ia=use_ia)
                if not all(np.isfinite(v) for v in parts.as_dict().values()):
                    raise TrainingError(
                        f"第 {epoch + 1} 轮，场景 {s_idx}，片段 {c_idx} 损失非有限: {parts}"
                    )
                total.backward()
                optimizer.step()
                logger.debug(f"epoch {epoch + 1} 场景 {s_idx} 片段 {c_idx}: {parts}")
                sums, n = sums + parts, n + 1
        mean = sums.scaled(1.0 / n)
        history.append(mean)
        logger.info(f"epoch {epoch + 1}/{run.epochs}: {mean}")
    return TrainResult(model=model, history=history)


def evaluate_model(model: TrackingModel, scenarios: Sequence[Scenario]) -> tuple[EvalResult, list[list[TrackRecord]]]:
    """跟踪每个场景并按计数汇总评测"""
    cfg = model.config
    temporal = model.temporal if cfg.ablation.ta else None
    sequences, predictions = [], []
    for scenario in scenarios:
        frames = embed_scenario(model, scenario)
        pred = track_sequence(frames, T=cfg.run.T, similarity_threshold=cfg.tracker.similarity_threshold,
                              max_misses=cfg.tracker.max_misses, score_threshold=cfg.tracker.score_threshold,
                              temporal=temporal)
        sequences.append((scenario.gt_records(), pred))
        predictions.append(pred)
    return evaluate_sequences(sequences), predictions
