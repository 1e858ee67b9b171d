"""
合成场景：多目标二维运动、深度真值、外观码、遮挡与检测噪声、训练增强和玩具编码器

随机数统一使用 numpy 的 PCG64，种子经 SeedSequence([seed, stream]) 分流，
同一种子在任何平台上生成逐位相同的场景。
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from adaptrack.config import ScenarioConfig
from adaptrack.diffcore import Mlp, MlpParams, Module, Tensor, as_tensor, mlp_forward
from adaptrack.formats import (
    FormatError,
    read_appr,
    read_dgrid,
    read_mot,
    read_object_depths,
    write_appr,
    write_dgrid,
    write_mot,
    write_object_depths,
)
from adaptrack.geometry import Box2D
from adaptrack.identity import assign_identities
from adaptrack.spatial import box_cells
from adaptrack.tracker import FrameDetections, TrackRecord

logger = logging.getLogger(__name__)

PRESETS = ("linear", "crossing", "circular", "random-walk")
MAX_SPEED = 6.0

# 随机数分流
STREAM_TRUTH = 0
STREAM_DETECTIONS = 1
STREAM_AUGMENT = 2
STREAM_PYRAMID = 3


class SimulationError(Exception):
    """场景参数无效"""
    pass


def make_rng(seed: int, stream: int = STREAM_TRUTH) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream])))


@dataclass
class FrameTruth:
    """单帧真值，ids 为 0 起的身份下标"""
    frame: int
    ids: np.ndarray
    boxes: np.ndarray
    depths: np.ndarray
    visible: np.ndarray

    @property
    def visible_ids(self) -> np.ndarray:
        return self.ids[self.visible]

    @property
    def visible_boxes(self) -> np.ndarray:
        return self.boxes[self.visible]

    @property
    def visible_depths(self) -> np.ndarray:
        return self.depths[self.visible]


@dataclass
class Scenario:
    config: ScenarioConfig
    appearance: np.ndarray
    truth: list[FrameTruth]
    depth_grids: np.ndarray
    detections: list[FrameDetections] = field(default_factory=list)

    @property
    def arena(self) -> tuple[float, float]:
        return self.config.arena_width, self.config.arena_height

    @property
    def n_frames(self) -> int:
        return len(self.truth)

    @property
    def observation_dim(self) -> int:
        return self.config.appearance_dim + self.config.noise_dim

    def gt_records(self) -> list[TrackRecord]:
        """可见目标的 MOTChallenge 记录，身份从 1 开始"""
        records = []
        for ft in self.truth:
            for identity, box in zip(ft.visible_ids, ft.visible_boxes):
                records.append(TrackRecord(ft.frame, int(identity) + 1, Box2D.from_array(box), 1.0))
        return records


def orthonormal_columns(a: np.ndarray) -> np.ndarray:
    """
    两遍修正 Gram-Schmidt，只用逐元素乘和 numpy 自身的求和，不经过 LAPACK/BLAS

    每列符号固定为首个非零分量为正，结果只取决于输入和 IEEE 运算，与线性代数库无关。

    Raises:
        SimulationError: 列线性相关
    """
    q = np.array(a, dtype=np.float64, copy=True)
    for j in range(q.shape[1]):
        v = q[:, j]
        for _ in range(2):
            for i in range(j):
                v = v - np.sum(q[:, i] * v) * q[:, i]
        norm = np.sqrt(np.sum(v * v))
        if norm < 1e-12:
            raise SimulationError(f"第 {j} 列与前面的列线性相关")
        v = v / norm
        lead = np.flatnonzero(np.abs(v) > 1e-12)[0]
        q[:, j] = -v if v[lead] < 0 else v
    return q


def appearance_codes(n: int, dim: int, base_similarity: float, rng: np.random.Generator) -> np.ndarray:
    """
    n 个单位向量，两两余弦恰为 base_similarity

    c_i = √s·q_0 + √(1-s)·q_{i+1}，q 为正交基
    """
    if dim < n + 1:
        raise SimulationError(f"外观维度 {dim} 不足以生成 {n} 个码")
    q = orthonormal_columns(rng.normal(size=(dim, n + 1)))
    s = base_similarity
    return np.sqrt(s) * q[:, 0][None, :] + np.sqrt(1.0 - s) * q[:, 1:].T


def _object_sizes(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    W, H = cfg.arena_width, cfg.arena_height
    w = W * cfg.box_scale * rng.uniform(0.8, 1.2, size=cfg.n_objects)
    h = np.minimum(2.0 * w, H / 3.0)
    if cfg.preset == "crossing":
        # 配对目标同尺寸，交汇帧完全重合
        for a in range(0, cfg.n_objects - 1, 2):
            w[a + 1], h[a + 1] = w[a], h[a]
    sizes = np.stack([w, h], axis=1)
    if (sizes[:, 0] * sizes[:, 1]).sum() > 0.5 * W * H or (w >= W / 2).any() or (h >= H / 2).any():
        raise SimulationError(f"场地 {W}x{H} 放不下 {cfg.n_objects} 个目标")
    return sizes


def _linear(F, size, W, H, rng) -> np.ndarray:
    """匀速直线，速度按场地截断，保证全程不出界"""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(2.0, MAX_SPEED)
    v = speed * np.array([np.cos(angle), np.sin(angle)])
    span = max(F - 1, 1)
    room = np.array([W - size[0], H - size[1]])
    v = np.clip(v, -room / span, room / span)
    lo = size / 2 + np.maximum(0.0, -v * (F - 1))
    hi = np.array([W, H]) - size / 2 - np.maximum(0.0, v * (F - 1))
    start = rng.uniform(lo, np.maximum(lo, hi))
    return start[None, :] + np.arange(F)[:, None] * v[None, :]


def _crossing_pair(F, size, lane_y, W, H, rng) -> tuple[np.ndarray, np.ndarray]:
    t_c = F // 2
    x_c = rng.uniform(W / 2 - W / 8, W / 2 + W / 8)
    reach = min(x_c - size[0] / 2, W - size[0] / 2 - x_c)
    speed = min(rng.uniform(2.0, MAX_SPEED), reach / max(t_c, F - 1 - t_c, 1))
    t = np.arange(F) - t_c
    wiggle = 0.1 * size[1] * np.sin(2.0 * np.pi * t / 40.0)
    y_lo, y_hi = size[1] / 2, H - size[1] / 2
    a = np.stack([x_c + speed * t, np.clip(lane_y + wiggle, y_lo, y_hi)], axis=1)
    b = np.stack([x_c - speed * t, np.clip(lane_y - wiggle, y_lo, y_hi)], axis=1)
    return a, b


def _circular(F, size, W, H, rng) -> np.ndarray:
    r_max = min(W / 2 - size[0] / 2, H / 2 - size[1] / 2)
    radius = rng.uniform(0.4, 0.95) * r_max
    omega = rng.uniform(0.01, 0.05) * rng.choice([-1.0, 1.0])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    theta = phase + omega * np.arange(F)
    return np.stack([W / 2 + radius * np.cos(theta), H / 2 + radius * np.sin(theta)], axis=1)


def _random_walk(F, size, W, H, rng) -> np.ndarray:
    lo = size / 2
    hi = np.array([W, H]) - size / 2
    pos = rng.uniform(lo, hi)
    vel = rng.normal(0.0, 2.0, size=2)
    out = np.empty((F, 2))
    for t in range(F):
        out[t] = pos
        vel = vel + rng.normal(0.0, 0.5, size=2)
        speed = np.hypot(vel[0], vel[1])
        if speed > MAX_SPEED:
            vel *= MAX_SPEED / speed
        pos = pos + vel
        for k in range(2):
            if pos[k] < lo[k]:
                pos[k], vel[k] = 2 * lo[k] - pos[k], -vel[k]
            elif pos[k] > hi[k]:
                pos[k], vel[k] = 2 * hi[k] - pos[k], -vel[k]
        pos = np.clip(pos, lo, hi)
    return out


def _trajectories(cfg: ScenarioConfig, sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """目标中心 (F, n, 2)"""
    F, n = cfg.n_frames, cfg.n_objects
    W, H = cfg.arena_width, cfg.arena_height
    centers = np.empty((F, n, 2))
    if cfg.preset == "crossing":
        pairs = n // 2
        for k in range(pairs):
            lane = H * (k + 1) / (pairs + 1)
            centers[:, 2 * k], centers[:, 2 * k + 1] = _crossing_pair(F, sizes[2 * k], lane, W, H, rng)
        if n % 2:
            centers[:, n - 1] = _linear(F, sizes[n - 1], W, H, rng)
        return centers
    motion = {"linear": _linear, "circular": _circular, "random-walk": _random_walk}[cfg.preset]
    for i in range(n):
        centers[:, i] = motion(F, sizes[i], W, H, rng)
    return centers


def _paint(boxes: np.ndarray, depths: np.ndarray, grid: int, arena: tuple[float, float],
           background: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """由远到近绘制，近处覆盖远处；返回深度网格和每个像素的目标下标（背景为 -1）"""
    depth = np.repeat(background[:, None], grid, axis=1).astype(np.float64)
    owner = np.full((grid, grid), -1, dtype=np.int64)
    order = np.argsort(-depths, kind="stable")
    for k in order:
        for c0, c1, r0, r1 in box_cells(boxes[k:k + 1], (grid, grid), arena):
            depth[r0:r1, c0:c1] = depths[k]
            owner[r0:r1, c0:c1] = k
    return depth, owner


def _background(cfg: ScenarioConfig, offset_max: float) -> np.ndarray:
    g = cfg.depth_grid
    rows = (np.arange(g) + 0.5) / g
    return cfg.depth_far + offset_max + 0.5 * cfg.depth_far * (1.0 - rows)


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """
    生成场景

    Raises:
        SimulationError: 场地放不下所有目标
    """
    rng = make_rng(cfg.seed, STREAM_TRUTH)
    F, n = cfg.n_frames, cfg.n_objects
    W, H = cfg.arena_width, cfg.arena_height

    appearance = appearance_codes(n, cfg.appearance_dim, cfg.base_similarity, rng)
    sizes = _object_sizes(cfg, rng)
    centers = _trajectories(cfg, sizes, rng)

    span = cfg.depth_far - cfg.depth_near
    offsets = rng.permutation(n) * 0.02 * span
    background = _background(cfg, offsets.max())
    visible = rng.random((F, n)) >= cfg.occlusion_rate

    truth, grids = [], np.empty((F, cfg.depth_grid, cfg.depth_grid))
    ids = np.arange(n)
    for t in range(F):
        boxes = np.concatenate([centers[t] - sizes / 2, sizes], axis=1)
        bottom = np.clip((centers[t, :, 1] + sizes[:, 1] / 2) / H, 0.0, 1.0)
        depths = cfg.depth_near + span * (1.0 - bottom) + offsets
        truth.append(FrameTruth(frame=t + 1, ids=ids.copy(), boxes=boxes, depths=depths,
                                visible=visible[t].copy()))
        grids[t], _ = _paint(boxes[visible[t]], depths[visible[t]], cfg.depth_grid, (W, H), background)

    scenario = Scenario(config=cfg, appearance=appearance, truth=truth, depth_grids=grids)
    scenario.detections = corrupt_detections(scenario, cfg.detection_noise, cfg.drop_prob, cfg.seed)
    logger.info(f"生成场景: preset={cfg.preset}, {n} 个目标, {F} 帧, seed={cfg.seed}")
    return scenario


def corrupt_detections(scenario: Scenario, sigma_box: float, drop_prob: float, seed: int) -> list[FrameDetections]:
    """
    可见目标的 (x,y,w,h) 加高斯抖动、独立丢弃，并生成观测向量（外观码 + 噪声通道）

    噪声通道是帧上下文：每帧抽一次，同帧所有检测共享。分数随抖动幅度下降：σ=0 时为 1。
    """
    if sigma_box < 0:
        raise SimulationError(f"σ_box 不能为负: {sigma_box}")
    if not 0.0 <= drop_prob < 1.0:
        raise SimulationError(f"drop_prob 必须在 [0,1): {drop_prob}")
    cfg = scenario.config
    rng = make_rng(seed, STREAM_DETECTIONS)
    frames = []
    for ft in scenario.truth:
        boxes, scores, observations = [], [], []
        context = rng.normal(0.0, 1.0, cfg.noise_dim)
        for identity, box in zip(ft.visible_ids, ft.visible_boxes):
            keep = rng.random() >= drop_prob
            jitter = rng.normal(0.0, sigma_box, size=4) if sigma_box > 0 else np.zeros(4)
            appearance = scenario.appearance[identity] + rng.normal(0.0, cfg.appearance_noise, cfg.appearance_dim)
            if not keep:
                continue
            noisy = box + jitter
            noisy[2:] = np.maximum(noisy[2:], 1.0)
            scores.append(float(np.clip(1.0 - np.sqrt(np.sum(jitter * jitter)) / (box[2] + box[3]), 0.05, 1.0)))
            boxes.append(noisy)
            observations.append(np.concatenate([appearance, context]))
        frames.append(FrameDetections(
            frame=ft.frame,
            boxes=np.array(boxes).reshape(-1, 4),
            scores=np.array(scores),
            observations=np.array(observations).reshape(-1, scenario.observation_dim),
        ))
    return frames


def render_pyramid(scenario: Scenario, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    替代骨干网络的三层特征 (H, W, C)，分辨率 1 : 1/2 : 1/4

    通道：带噪外观码（最近目标覆盖）、占用、行坐标、列坐标。
    """
    cfg = scenario.config
    g = cfg.depth_grid
    ft = scenario.truth[index]
    vis = ft.visible
    background = np.full(g, np.inf)
    _, owner = _paint(ft.boxes[vis], ft.depths[vis], g, scenario.arena, background)
    codes = scenario.appearance[ft.ids[vis]]

    rng = make_rng(cfg.seed * 100003 + index, STREAM_PYRAMID)
    f8 = np.zeros((g, g, cfg.appearance_dim + 3))
    covered = owner >= 0
    f8[covered, :cfg.appearance_dim] = codes[owner[covered]]
    f8[..., :cfg.appearance_dim] += rng.normal(0.0, cfg.appearance_noise, size=(g, g, cfg.appearance_dim))
    f8[..., cfg.appearance_dim] = covered
    f8[..., cfg.appearance_dim + 1] = ((np.arange(g) + 0.5) / g)[:, None]
    f8[..., cfg.appearance_dim + 2] = ((np.arange(g) + 0.5) / g)[None, :]
    f16 = f8.reshape(g // 2, 2, g // 2, 2, -1).mean(axis=(1, 3))
    f32 = f8.reshape(g // 4, 4, g // 4, 4, -1).mean(axis=(1, 3))
    return f8, f16, f32


def pyramid_channels(cfg: ScenarioConfig) -> int:
    return cfg.appearance_dim + 3


# ---------------------------------------------------------------- 训练片段与增强


@dataclass
class ClipFrame:
    frame: int
    index: int
    boxes: np.ndarray
    observations: np.ndarray
    labels: np.ndarray
    ious: np.ndarray
    present: np.ndarray
    gt_boxes: np.ndarray
    gt_ids: np.ndarray
    matched_gt: np.ndarray


@dataclass
class TrainingClip:
    """一段训练用帧序列，labels 为增强后的身份标签（-1 表示未匹配）"""
    frames: list[ClipFrame]
    switched: Optional[tuple[int, int]] = None

    @property
    def T(self) -> int:
        return len(self.frames)

    def identities(self) -> list[int]:
        ids = set()
        for f in self.frames:
            ids.update(int(i) for i in f.labels[f.present & (f.labels >= 0)])
        return sorted(ids)

    def copy(self) -> TrainingClip:
        return copy.deepcopy(self)


def sample_clip_frames(n_frames: int, T: int, rng: np.random.Generator, max_interval: int = 4) -> list[int]:
    """随机间隔 1..max_interval 采样 T 帧下标；场景不足 T 帧时取全部帧数"""
    T = min(T, n_frames)
    if T <= 1:
        return [int(rng.integers(0, n_frames))]
    intervals = rng.integers(1, max_interval + 1, size=T - 1)
    while intervals.sum() > n_frames - 1:
        intervals[int(np.argmax(intervals))] -= 1
    start = int(rng.integers(0, n_frames - int(intervals.sum())))
    return [start] + (start + np.cumsum(intervals)).astype(int).tolist()


def build_clip(scenario: Scenario, indices: Sequence[int]) -> TrainingClip:
    """检测按 IoU 匈牙利匹配到可见真值，得到身份标签和 IoU 质量"""
    frames = []
    for idx in indices:
        ft = scenario.truth[idx]
        det = scenario.detections[idx]
        labeled = assign_identities(det.boxes, list(det.observations), ft.visible_boxes,
                                    ft.visible_ids.tolist(), frame=ft.frame)
        labels = np.array([-1 if s.identity is None else s.identity for s in labeled], dtype=np.int64)
        gt_index = {int(g): i for i, g in enumerate(ft.visible_ids)}
        frames.append(ClipFrame(
            frame=ft.frame,
            index=int(idx),
            boxes=det.boxes.copy(),
            observations=det.observations.copy(),
            labels=labels,
            ious=np.array([s.iou for s in labeled]),
            present=np.ones(len(det), dtype=bool),
            gt_boxes=ft.visible_boxes.copy(),
            gt_ids=ft.visible_ids.copy(),
            matched_gt=np.array([gt_index.get(int(l), -1) for l in labels], dtype=np.int64),
        ))
    return TrainingClip(frames=frames)


def augment_batch(clip: TrainingClip, occlusion_prob: float, switch_prob: float, seed: int) -> TrainingClip:
    """
    轨迹遮挡与身份交换，只改训练输入，不改 gt_boxes/gt_ids

    遮挡：每个身份保留最后一次出现（锚点），其余出现以 occlusion_prob 标记为缺失。
    交换：以 switch_prob 选一对同时出现过的身份，在一段连续帧内交换标签。
    """
    for name, p in (("occlusion_prob", occlusion_prob), ("switch_prob", switch_prob)):
        if not 0.0 <= p <= 1.0:
            raise SimulationError(f"{name} 必须在 [0,1]: {p}")
    rng = make_rng(seed, STREAM_AUGMENT)
    out = clip.copy()

    if occlusion_prob > 0:
        for identity in out.identities():
            occurrences = [(t, d) for t, f in enumerate(out.frames)
                           for d in np.flatnonzero((f.labels == identity) & f.present)]
            for t, d in occurrences[:-1]:
                if rng.random() < occlusion_prob:
                    out.frames[t].present[d] = False

    if switch_prob > 0 and rng.random() < switch_prob:
        co_present: dict[tuple[int, int], list[int]] = {}
        for t, f in enumerate(out.frames):
            ids = sorted({int(i) for i in f.labels[f.present & (f.labels >= 0)]})
            for i, a in enumerate(ids):
                for b in ids[i + 1:]:
                    co_present.setdefault((a, b), []).append(t)
        if co_present:
            pairs = sorted(co_present)
            a, b = pairs[int(rng.integers(len(pairs)))]
            frames = co_present[(a, b)]
            s, e = sorted(int(v) for v in rng.integers(len(frames), size=2))
            for t in range(frames[s], frames[e] + 1):
                f = out.frames[t]
                is_a, is_b = f.labels == a, f.labels == b
                f.labels[is_a], f.labels[is_b] = b, a
            out.switched = (a, b)
            logger.debug(f"身份交换: {a} <-> {b}，片段帧 {frames[s]}..{frames[e]}")
    return out


# ---------------------------------------------------------------- 玩具编码器


def encoder_inputs(boxes: np.ndarray, observations: np.ndarray, arena: tuple[float, float]) -> np.ndarray:
    """拼接归一化框和观测向量"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    observations = np.asarray(observations, dtype=np.float64)
    if observations.ndim == 1:
        observations = observations[None, :]
    if observations.shape[0] != boxes.shape[0]:
        raise SimulationError(f"框数 {boxes.shape[0]} 与观测数 {observations.shape[0]} 不一致")
    scale = np.array([arena[0], arena[1], arena[0], arena[1]])
    return np.concatenate([boxes / scale, observations], axis=1)


class ToyEncoder(Module):
    """替代检测器共享模块的两层 MLP"""

    def __init__(self, in_dim: int, hidden: int, dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.mlp = Mlp([in_dim, hidden, dim], rng)

    def __call__(self, x) -> Tensor:
        return toy_encoder(x, self.mlp.params)


def toy_encoder(observation, params: Union[MlpParams, ToyEncoder]) -> Tensor:
    """
    观测 → 目标嵌入

    Raises:
        SimulationError: 观测维度与第一层不匹配
    """
    if isinstance(params, ToyEncoder):
        params = params.mlp.params
    x = as_tensor(observation)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise SimulationError(f"观测维度 {x.shape[-1]} 与编码器输入 {params.weights[0].shape[0]} 不符")
    return mlp_forward(x, params)


# ---------------------------------------------------------------- 保存与加载


def save_scenario(scenario: Scenario, out_dir: Path) -> None:
    """gt.txt、object_depth.csv、det.txt、det_obs.appr、appearance.appr、depth/NNNNNN.dgrid、scenario.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_mot(out_dir / "gt.txt", scenario.gt_records())
    write_object_depths(out_dir / "object_depth.csv", [
        (ft.frame, int(identity) + 1, float(depth))
        for ft in scenario.truth
        for identity, depth in zip(ft.visible_ids, ft.visible_depths)
    ])

    det_rows, observations = [], []
    for det in scenario.detections:
        for box, score, obs in zip(det.boxes, det.scores, det.observations):
            b = box
            det_rows.append(f"{det.frame},-1,{b[0]:.3f},{b[1]:.3f},{b[2]:.3f},{b[3]:.3f},{score:.4f},-1,-1,-1\n")
            observations.append(obs)
    (out_dir / "det.txt").write_text("".join(det_rows), encoding="utf-8")
    write_appr(out_dir / "det_obs.appr", np.array(observations).reshape(-1, scenario.observation_dim))
    write_appr(out_dir / "appearance.appr", scenario.appearance)
    for t, grid in enumerate(scenario.depth_grids):
        write_dgrid(out_dir / "depth" / f"{t + 1:06d}.dgrid", grid)
    (out_dir / "scenario.json").write_text(
        json.dumps(scenario.config.model_dump(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    logger.info(f"场景已写入 {out_dir}")


def _parse_detections(path: Path, observations: np.ndarray, n_frames: int) -> list[FrameDetections]:
    per_frame: dict[int, list[tuple[np.ndarray, float, np.ndarray]]] = {}
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    if len(lines) != observations.shape[0]:
        raise FormatError(path, f"检测行数 {len(lines)} 与观测数 {observations.shape[0]} 不一致")
    for line, obs in zip(lines, observations):
        parts = line.split(",")
        frame = int(parts[0])
        box = np.array([float(v) for v in parts[2:6]])
        per_frame.setdefault(frame, []).append((box, float(parts[6]), obs))
    frames = []
    for frame in range(1, n_frames + 1):
        rows = per_frame.get(frame, [])
        frames.append(FrameDetections(
            frame=frame,
            boxes=np.array([r[0] for r in rows]).reshape(-1, 4),
            scores=np.array([r[1] for r in rows]),
            observations=np.array([r[2] for r in rows]).reshape(-1, observations.shape[1]),
        ))
    return frames


def _center_depths(grid: np.ndarray, boxes: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    g = cfg.depth_grid
    cx = np.clip(((boxes[:, 0] + boxes[:, 2] / 2) / cfg.arena_width * g).astype(int), 0, g - 1)
    cy = np.clip(((boxes[:, 1] + boxes[:, 3] / 2) / cfg.arena_height * g).astype(int), 0, g - 1)
    return grid[cy, cx]


def load_scenario(scenario_dir: Path, with_depth: bool = True) -> Scenario:
    """
    读回 save_scenario 的输出；with_depth=False 时不读取深度文件（目标深度为 0）

    目标深度取自 object_depth.csv；没有该文件的旧目录退回到深度网格在框中心处的值，
    此时被遮挡目标会拿到遮挡者的深度。

    Raises:
        FormatError: object_depth.csv 缺少某个真值行
    """
    scenario_dir = Path(scenario_dir)
    cfg = ScenarioConfig.model_validate(json.loads((scenario_dir / "scenario.json").read_text(encoding="utf-8")))
    appearance = read_appr(scenario_dir / "appearance.appr")
    g = cfg.depth_grid
    object_depths: Optional[dict[tuple[int, int], float]] = None
    if with_depth:
        grids = np.stack([read_dgrid(scenario_dir / "depth" / f"{t + 1:06d}.dgrid") for t in range(cfg.n_frames)])
        depth_file = scenario_dir / "object_depth.csv"
        if depth_file.exists():
            object_depths = read_object_depths(depth_file)
        else:
            logger.debug(f"{scenario_dir} 没有 object_depth.csv，目标深度取网格框中心值")
    else:
        grids = np.zeros((cfg.n_frames, g, g))

    by_frame: dict[int, list[TrackRecord]] = {}
    for r in read_mot(scenario_dir / "gt.txt"):
        by_frame.setdefault(r.frame, []).append(r)
    truth = []
    for t in range(cfg.n_frames):
        rows = sorted(by_frame.get(t + 1, []), key=lambda r: r.id)
        boxes = np.array([r.box.as_array() for r in rows]).reshape(-1, 4)
        if object_depths is not None:
            missing = [r.id for r in rows if (t + 1, r.id) not in object_depths]
            if missing:
                raise FormatError(scenario_dir / "object_depth.csv", f"第 {t + 1} 帧缺少身份 {missing} 的深度")
            depths = np.array([object_depths[(t + 1, r.id)] for r in rows])
        else:
            depths = _center_depths(grids[t], boxes, cfg)
        truth.append(FrameTruth(
            frame=t + 1,
            ids=np.array([r.id - 1 for r in rows], dtype=np.int64),
            boxes=boxes,
            depths=depths,
            visible=np.ones(len(rows), dtype=bool),
        ))

    observations = read_appr(scenario_dir / "det_obs.appr")
    detections = _parse_detections(scenario_dir / "det.txt", observations, cfg.n_frames)
    logger.debug(f"读取场景 {scenario_dir}: {cfg.n_frames} 帧")
    return Scenario(config=cfg, appearance=appearance, truth=truth, depth_grids=grids, detections=detections)
