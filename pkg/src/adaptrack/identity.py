"""身份适配器：GT 身份分配、跨帧对比样本对、IoU 过滤、调和平均质量权重与质量感知 InfoNCE"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from adaptrack.diffcore import (
    MASK_VALUE,
    Mlp,
    MlpParams,
    Tensor,
    as_tensor,
    l2_normalize,
    log_softmax,
    mlp_forward,
    stack,
)
from adaptrack.geometry import iou_matrix, hungarian

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_TAU = 0.1


class IdentityError(Exception):
    """身份监督输入无效"""
    pass


@dataclass
class LabeledEmbedding:
    """带身份标签与 IoU 质量分数的目标嵌入"""
    embedding: Union[Tensor, np.ndarray]
    frame: int
    identity: Optional[int]
    iou: float
    detection: int = -1

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise IdentityError(f"IoU 超出 [0,1]: {self.iou}")
        if (self.identity is None) != (self.iou == 0.0):
            raise IdentityError("身份存在当且仅当匹配成功")

    @property
    def matched(self) -> bool:
        return self.identity is not None


@dataclass
class PairSet:
    """
    正样本对 (anchor, positive, weight) 与每个 anchor 的负样本下标

    下标指向 samples（已通过 IoU 过滤的样本池）。
    """
    samples: list[LabeledEmbedding]
    positives: list[tuple[int, int, float]] = field(default_factory=list)
    negatives: dict[int, list[int]] = field(default_factory=dict)

    @property
    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    @property
    def num_negative_pairs(self) -> int:
        """无序负样本对数量"""
        return sum(len(v) for v in self.negatives.values()) // 2


def assign_identities(
    det_boxes: np.ndarray,
    det_embeddings: Sequence,
    gt_boxes: np.ndarray,
    gt_ids: Sequence[int],
    frame: int = 0,
) -> list[LabeledEmbedding]:
    """
    以 1-IoU 为代价做匈牙利匹配，IoU 为 0 的匹配视为未匹配

    Returns:
        list[LabeledEmbedding]: 每个检测一项，顺序与输入一致
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(det_embeddings) != det_boxes.shape[0]:
        raise IdentityError(f"检测框数 {det_boxes.shape[0]} 与嵌入数 {len(det_embeddings)} 不一致")
    ious = iou_matrix(det_boxes, gt_boxes)
    matched: dict[int, tuple[int, float]] = {}
    if ious.size:
        for d, g in hungarian(1.0 - ious).pairs:
            if ious[d, g] > 0.0:
                matched[d] = (int(gt_ids[g]), float(ious[d, g]))
    out = []
    for d, emb in enumerate(det_embeddings):
        identity, score = matched.get(d, (None, 0.0))
        out.append(LabeledEmbedding(embedding=emb, frame=frame, identity=identity,
                                    iou=min(score, 1.0), detection=d))
    return out


def pair_weight(iou_a: float, iou_b: float) -> float:
    """
    两个 IoU 的调和平均 2ab/(a+b)

    Raises:
        IdentityError: a + b = 0
    """
    if iou_a + iou_b <= 0.0:
        raise IdentityError("调和平均的两个 IoU 之和为 0")
    return 2.0 * iou_a * iou_b / (iou_a + iou_b)


def sample_pairs(
    pool: Sequence[LabeledEmbedding],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    use_filter: bool = True,
) -> PairSet:
    """
    构建正负样本对

    正样本：同身份、不同帧；负样本：不同身份（允许同帧）。
    关闭过滤时保留所有已匹配样本且权重为 1。
    """
    if use_filter:
        samples = [s for s in pool if s.matched and s.iou >= iou_threshold]
    else:
        samples = [s for s in pool if s.matched]

    by_identity: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        by_identity[s.identity].append(i)

    positives = []
    for members in by_identity.values():
        for a_pos, a in enumerate(members):
            for b in members[a_pos + 1:]:
                if samples[a].frame == samples[b].frame:
                    continue
                w = pair_weight(samples[a].iou, samples[b].iou) if use_filter else 1.0
                positives.append((a, b, w))

    negatives = {}
    everyone = np.arange(len(samples))
    ids = np.array([s.identity for s in samples], dtype=np.int64)
    for i in range(len(samples)):
        negatives[i] = everyone[ids != ids[i]].tolist()

    logger.debug(f"样本池 {len(pool)} → 过滤后 {len(samples)}，正样本对 {len(positives)}")
    return PairSet(samples=samples, positives=positives, negatives=negatives)


def project(e, phi: Optional[Union[MlpParams, Mlp]]) -> Tensor:
    """
    经过 φ 后 L2 归一化；phi 为 None 时只做归一化

    Raises:
        IdentityError: 归一化前为零向量
    """
    e = as_tensor(e)
    if phi is not None:
        e = phi(e) if isinstance(phi, Mlp) else mlp_forward(e, phi)
    norms = np.linalg.norm(e.data, axis=-1)
    if np.any(norms == 0.0):
        raise IdentityError("投影结果为零向量，无法归一化")
    return l2_normalize(e, axis=-1)


def info_nce(anchor: Tensor, positive: Tensor, negatives: Sequence[Tensor], tau: float = DEFAULT_TAU) -> Tensor:
    """
    -log( e^{z·z⁺/τ} / (e^{z·z⁺/τ} + Σ e^{z·z⁻/τ}) )

    Raises:
        IdentityError: τ ≤ 0
    """
    if tau <= 0.0:
        raise IdentityError(f"温度必须为正: {tau}")
    anchor = as_tensor(anchor)
    candidates = stack([as_tensor(positive)] + [as_tensor(n) for n in negatives])
    logits = (candidates @ anchor) / tau
    return -log_softmax(logits)[0]


def ia_loss(
    pairs: PairSet,
    phi: Optional[Union[MlpParams, Mlp]],
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """
    (1/|P|) Σ w · InfoNCE，每个正样本对按两个方向各算一次取平均

    分母集合为 anchor 的全部负样本加上该正样本。空 P 返回 0 并记录警告。
    """
    if tau <= 0.0:
        raise IdentityError(f"温度必须为正: {tau}")
    if not pairs.positives:
        logger.warning("没有正样本对，身份适配器损失记为 0")
        return Tensor(0.0)

    z = project(stack([as_tensor(s.embedding) for s in pairs.samples]), phi)
    sims = (z @ z.T) / tau

    pos = np.array([(a, b) for a, b, _ in pairs.positives], dtype=np.int64)
    weights = np.array([w for _, _, w in pairs.positives])
    anchors = np.concatenate([pos[:, 0], pos[:, 1]])
    targets = np.concatenate([pos[:, 1], pos[:, 0]])

    ids = pairs.identities
    # 同身份的非目标列全部屏蔽，只留下负样本和这一个正样本
    blocked = ids[anchors][:, None] == ids[None, :]
    blocked[np.arange(anchors.size), targets] = False
    logits = sims[anchors] + Tensor(np.where(blocked, MASK_VALUE, 0.0))
    nll = -log_softmax(logits, axis=-1)[np.arange(anchors.size), targets]

    m = pos.shape[0]
    per_pair = (nll[:m] + nll[m:]) * 0.5
    return (per_pair * weights).sum() / float(m)
