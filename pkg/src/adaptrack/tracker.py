"""在线关联：按身份维护轨迹窗口、时间适配器精炼、相似度+匈牙利的 ID 预测与轨迹生命周期"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from adaptrack.diffcore import cosine_matrix
from adaptrack.geometry import Box2D, hungarian
from adaptrack.temporal import TemporalAdapter, temporal_encode

logger = logging.getLogger(__name__)


class TrackerError(Exception):
    """跟踪输入无效"""
    pass


@dataclass(frozen=True)
class TrackRecord:
    """一行输出：帧号、身份、框、置信度（帧号和身份从 1 开始）"""
    frame: int
    id: int
    box: Box2D
    confidence: float = 1.0

    def __post_init__(self):
        if self.frame < 1 or self.id < 1:
            raise TrackerError(f"帧号和身份必须从 1 开始: frame={self.frame}, id={self.id}")


@dataclass
class FrameDetections:
    """单帧检测：框、分数、观测向量，以及（可选）已计算的嵌入"""
    frame: int
    boxes: np.ndarray
    scores: np.ndarray
    observations: Optional[np.ndarray] = None
    embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.shape[0] != self.boxes.shape[0]:
            raise TrackerError(f"第 {self.frame} 帧框数与分数数不一致")

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class TrackStore:
    """身份 → 最近 T 帧 (frame, embedding-or-None)，以及连续漏检计数"""
    T: int
    max_misses: int
    windows: dict[int, deque] = field(default_factory=dict)
    misses: dict[int, int] = field(default_factory=dict)
    next_id: int = 1

    def live_ids(self) -> list[int]:
        return sorted(self.windows)

    def copy(self) -> TrackStore:
        return TrackStore(
            T=self.T,
            max_misses=self.max_misses,
            windows={k: deque(v, maxlen=self.T) for k, v in self.windows.items()},
            misses=dict(self.misses),
            next_id=self.next_id,
        )


@dataclass
class IdPrediction:
    ids: list[int]
    new: list[bool]


def refine_store(store: TrackStore, temporal: Optional[TemporalAdapter] = None) -> dict[int, np.ndarray]:
    """
    每个身份最近一次检测位置的嵌入；给定时间适配器时取其精炼输出

    窗口内已没有检测的身份不参与匹配，直到漏检达到上限退出。
    """
    refined = {}
    for identity in store.live_ids():
        slots = list(store.windows[identity])
        embeddings = [emb for _, emb in slots]
        if all(e is None for e in embeddings):
            continue
        if temporal is None:
            latest = next(e for e in reversed(embeddings) if e is not None)
            refined[identity] = np.asarray(latest, dtype=np.float64)
            continue
        window = temporal.window(identity, embeddings, [f for f, _ in slots])
        out = temporal_encode(window, temporal)
        refined[identity] = out.data[window.last_present()].copy()
    return refined


def associate(similarity: np.ndarray, track_ids: Sequence[int], next_id: int,
              threshold: float) -> IdPrediction:
    """
    在 (1 - 相似度) 上做匈牙利匹配，低于阈值的匹配作废，剩余检测按顺序分配新身份
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    n = similarity.shape[0]
    ids: list[Optional[int]] = [None] * n
    if n and len(track_ids):
        for d, j in hungarian(1.0 - similarity).pairs:
            if similarity[d, j] >= threshold:
                ids[d] = int(track_ids[j])
    new = [i is None for i in ids]
    for d in range(n):
        if ids[d] is None:
            ids[d] = next_id
            next_id += 1
    return IdPrediction(ids=[int(i) for i in ids], new=new)


def predict_ids(embeddings: np.ndarray, store: TrackStore, refined: dict[int, np.ndarray],
                threshold: float = 0.3) -> IdPrediction:
    """
    当前帧嵌入与每个身份最近精炼嵌入的余弦相似度 + 匈牙利匹配
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    track_ids = sorted(refined)
    if embeddings.shape[0] == 0 or not track_ids:
        similarity = np.zeros((embeddings.shape[0], len(track_ids)))
    else:
        similarity = cosine_matrix(embeddings, np.stack([refined[i] for i in track_ids]))
    return associate(similarity, track_ids, store.next_id, threshold)


def update_store(store: TrackStore, prediction: IdPrediction, embeddings: np.ndarray,
                 frame: int) -> TrackStore:
    """
    匹配上的身份追加嵌入并清零漏检；未匹配的存活身份追加空槽并累计漏检，
    达到 max_misses 的身份退出；窗口只保留最近 T 帧
    """
    updated = store.copy()
    seen = set()
    for identity, is_new, emb in zip(prediction.ids, prediction.new, embeddings):
        if is_new:
            updated.windows[identity] = deque(maxlen=updated.T)
            updated.next_id = max(updated.next_id, identity + 1)
        updated.windows[identity].append((frame, np.asarray(emb, dtype=np.float64)))
        updated.misses[identity] = 0
        seen.add(identity)

    for identity in store.live_ids():
        if identity in seen:
            continue
        updated.windows[identity].append((frame, None))
        updated.misses[identity] = updated.misses.get(identity, 0) + 1
        if updated.misses[identity] >= updated.max_misses:
            logger.debug(f"身份 {identity} 连续漏检 {updated.misses[identity]} 帧，退出")
            del updated.windows[identity]
            del updated.misses[identity]
    return updated


def track_sequence(
    frames: Sequence[FrameDetections],
    T: int = 30,
    similarity_threshold: float = 0.3,
    max_misses: int = 30,
    score_threshold: float = 0.5,
    temporal: Optional[TemporalAdapter] = None,
) -> list[TrackRecord]:
    """
    逐帧在线跟踪

    Raises:
        TrackerError: 帧号不严格递增或缺少嵌入
    """
    records: list[TrackRecord] = []
    store = TrackStore(T=T, max_misses=max_misses)
    last_frame = 0
    for det in frames:
        if det.frame <= last_frame:
            raise TrackerError(f"帧号未严格递增: {det.frame} 在 {last_frame} 之后")
        last_frame = det.frame
        if det.embeddings is None:
            raise TrackerError(f"第 {det.frame} 帧缺少嵌入")
        keep = det.scores >= score_threshold
        embeddings = np.asarray(det.embeddings, dtype=np.float64)[keep]
        boxes = det.boxes[keep]
        scores = det.scores[keep]

        refined = refine_store(store, temporal)
        prediction = predict_ids(embeddings, store, refined, similarity_threshold)
        store = update_store(store, prediction, embeddings, det.frame)
        for identity, box, score in zip(prediction.ids, boxes, scores):
            records.append(TrackRecord(det.frame, identity, Box2D.from_array(box), float(score)))

    logger.info(f"跟踪完成: {len(frames)} 帧, {len(records)} 条记录, "
                f"{len({r.id for r in records})} 个身份")
    return records
