"""命令行与工具服务共用的流程：模拟、训练、跟踪、评测、分析和梯度检查"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from adaptrack.config import Config, LossWeights, ModelConfig, RunConfig, ScenarioConfig, apply_ablation
from adaptrack.diffcore import (
    LayerNorm,
    Mlp,
    Tensor,
    TransformerEncoderLayer,
    attention,
    GradCheckError,
    grad_check,
    l2_normalize,
    log_softmax,
    softmax,
)
from adaptrack.formats import (
    FormatError,
    read_mot,
    write_histogram_csv,
    write_matrix_csv,
)
from adaptrack.geometry import focal_loss, giou_loss_tensor, iou_matrix, l1_box_loss_tensor
from adaptrack.identity import LabeledEmbedding, ia_loss, info_nce, sample_pairs
from adaptrack.metrics import (
    EvalResult,
    evaluate_sequences,
    high_similarity_fraction,
    similarity_matrix,
    top_k_similarity_distribution,
)
from adaptrack.model import TrackingModel, embed_scenario, save_checkpoint
from adaptrack.simkit import (
    Scenario,
    ToyEncoder,
    encoder_inputs,
    generate_scenario,
    load_scenario,
    make_rng,
    render_pyramid,
    save_scenario,
)
from adaptrack.spatial import DepthField, DepthPeTable, depth_pe, lid_bins, weighted_depth_loss
from adaptrack.temporal import TemporalAdapter, attention_maps, temporal_encode
from adaptrack.tracker import FrameDetections, TrackRecord, track_sequence
from adaptrack.training import LossBreakdown, TrainResult, evaluate_model, id_loss, total_loss, train_toy

logger = logging.getLogger(__name__)

STREAM_GRADCHECK = 6

GRADCHECK_NAMES = (
    "ops", "softmax", "layer_norm", "attention", "encoder_layer", "focal", "giou", "l1", "depth_loss",
    "depth_pe", "info_nce", "ia_loss", "id_loss", "total_loss", "temporal", "toy_encoder",
)


# ---------------------------------------------------------------- 模拟


def scenario_seeds(base: int, count: int) -> list[int]:
    return [base + i for i in range(count)]


def simulate_to_dir(scenario_cfg: ScenarioConfig, out_dir: Path, sequences: int = 1) -> list[Path]:
    """单序列直接写入 out_dir，多序列写入 out_dir/seqNN，种子依次加一"""
    out_dir = Path(out_dir)
    written = []
    for i, seed in enumerate(scenario_seeds(scenario_cfg.seed, sequences)):
        target = out_dir if sequences == 1 else out_dir / f"seq{i + 1:02d}"
        save_scenario(generate_scenario(scenario_cfg.model_copy(update={"seed": seed})), target)
        written.append(target)
    return written


def scenario_dirs(paths: Sequence[Path]) -> list[Path]:
    """展开目录：自身含 scenario.json 的直接使用，否则取其下含 scenario.json 的子目录"""
    found = []
    for path in map(Path, paths):
        if (path / "scenario.json").exists():
            found.append(path)
            continue
        subdirs = sorted(p for p in path.iterdir() if (p / "scenario.json").exists()) if path.is_dir() else []
        if not subdirs:
            raise FormatError(path, "找不到场景（缺少 scenario.json）")
        found.extend(subdirs)
    return found


def load_scenarios(paths: Sequence[Path], with_depth: bool = True) -> list[Scenario]:
    return [load_scenario(p, with_depth=with_depth) for p in scenario_dirs(paths)]


# ---------------------------------------------------------------- 训练与跟踪


def write_loss_curves(path: Path, history: Sequence[LossBreakdown]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,det,id,depth,ia,total\n"]
    for epoch, h in enumerate(history, 1):
        lines.append(f"{epoch},{h.det:.6f},{h.id:.6f},{h.depth:.6f},{h.ia:.6f},{h.total:.6f}\n")
    path.write_text("".join(lines), encoding="utf-8")


def train_from_dirs(config: Config, paths: Sequence[Path], checkpoint: Path,
                    curves: Optional[Path] = None) -> TrainResult:
    """关闭空间适配器时不读取深度文件"""
    scenarios = load_scenarios(paths, with_depth=config.ablation.sa)
    result = train_toy(config, scenarios)
    save_checkpoint(checkpoint, result.model)
    if curves is not None:
        write_loss_curves(curves, result.history)
    return result


def oracle_frames(scenario: Scenario) -> list[FrameDetections]:
    """真值框 + 身份独热嵌入"""
    n = scenario.config.n_objects
    frames = []
    for ft in scenario.truth:
        ids = ft.visible_ids
        frames.append(FrameDetections(
            frame=ft.frame,
            boxes=ft.visible_boxes,
            scores=np.ones(ids.size),
            embeddings=np.eye(n)[ids].reshape(-1, n),
        ))
    return frames


def track_scenario(scenario: Scenario, model: Optional[TrackingModel], config: Config) -> list[TrackRecord]:
    """model 为 None 时用真值嵌入跟踪"""
    if model is None:
        frames, temporal = oracle_frames(scenario), None
    else:
        frames = embed_scenario(model, scenario)
        temporal = model.temporal if model.config.ablation.ta else None
    return track_sequence(frames, T=config.run.T, similarity_threshold=config.tracker.similarity_threshold,
                          max_misses=config.tracker.max_misses, score_threshold=config.tracker.score_threshold,
                          temporal=temporal)


def evaluate_files(pairs: Sequence[tuple[Path, Path]]) -> EvalResult:
    return evaluate_sequences([(read_mot(gt), read_mot(pred)) for gt, pred in pairs])


# ---------------------------------------------------------------- 分析


@dataclass
class AnalysisResult:
    high_fraction: float
    topk_values: np.ndarray
    similarity: np.ndarray
    attention: Optional[np.ndarray]
    depth_attention: Optional[np.ndarray] = None


def _attention_table(weights: Optional[np.ndarray], query: str, key: str) -> tuple[list[str], np.ndarray]:
    """(L, heads, Q, K) 展开为 层,头,查询,各键权重 的行"""
    header = ["layer", "head", query]
    if weights is None:
        return header, np.zeros((0, len(header)))
    header += [f"{key}{k}" for k in range(weights.shape[-1])]
    L, H, Q, _ = weights.shape
    rows = [[l, h, q, *weights[l, h, q]] for l in range(L) for h in range(H) for q in range(Q)]
    return header, np.array(rows, dtype=np.float64).reshape(-1, len(header))


def _identity_slots(frames: Sequence[FrameDetections], scenario: Scenario, identity: int,
                    start: int, end: int, iou_threshold: float = 0.5) -> list[Optional[np.ndarray]]:
    """某个真值身份在 [start, end) 帧内的检测嵌入，未匹配的帧为 None"""
    slots: list[Optional[np.ndarray]] = []
    for idx in range(start, end):
        ft, det = scenario.truth[idx], frames[idx]
        rows = np.flatnonzero((ft.ids == identity) & ft.visible)
        if rows.size == 0 or len(det) == 0:
            slots.append(None)
            continue
        overlap = iou_matrix(ft.boxes[rows[0]].reshape(1, 4), det.boxes)[0]
        best = int(np.argmax(overlap))
        slots.append(det.embeddings[best] if overlap[best] >= iou_threshold else None)
    return slots


def analyze_scenario(model: TrackingModel, scenario: Scenario, out_dir: Optional[Path] = None,
                     frame_index: Optional[int] = None, identity: int = 0) -> AnalysisResult:
    """
    top-3 相似度分布、单帧相似度矩阵、某个身份轨迹窗口的时间注意力、该帧目标对深度 token 的注意力

    写出 topk_hist.csv、similarity_matrix.csv、ta_attention.csv（层,头,查询,各键权重）、
    depth_attention.csv（层,头,目标,各深度 token 权重）。
    """
    frames = embed_scenario(model, scenario)
    hist = top_k_similarity_distribution([f.embeddings for f in frames], k=3)
    fraction = high_similarity_fraction(hist.values, 0.9)

    if frame_index is None:
        frame_index = int(np.argmax([len(f) for f in frames]))
    current = frames[frame_index]
    sim = similarity_matrix(current.embeddings) if len(current) else np.zeros((0, 0))

    weights = None
    if model.config.ablation.ta and identity < scenario.config.n_objects:
        end = frame_index + 1
        start = max(0, end - model.config.run.T)
        slots = _identity_slots(frames, scenario, identity, start, end)
        if any(s is not None for s in slots):
            weights = attention_maps(model.temporal.window(identity, slots), model.temporal)

    det = scenario.detections[frame_index]
    depth_weights = None
    if len(det):
        depth_weights = model.depth_attention(det.boxes, det.observations, render_pyramid(scenario, frame_index))

    if out_dir is not None:
        out_dir = Path(out_dir)
        write_histogram_csv(out_dir / "topk_hist.csv", hist.edges, hist.counts)
        write_matrix_csv(out_dir / "similarity_matrix.csv", sim)
        header, table = _attention_table(weights, "query", "k")
        write_matrix_csv(out_dir / "ta_attention.csv", table, header=header)
        header, table = _attention_table(depth_weights, "object", "t")
        write_matrix_csv(out_dir / "depth_attention.csv", table, header=header)
    logger.info(f"top-3 相似度 > 0.9 的比例: {fraction:.3f}")
    return AnalysisResult(high_fraction=fraction, topk_values=hist.values, similarity=sim, attention=weights,
                          depth_attention=depth_weights)


# ---------------------------------------------------------------- 梯度检查


def _gradcheck_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    """名称 → 随机实例构造器；构造器返回 (f, params)"""

    def leaf(*shape, scale=1.0, offset=0.0):
        return Tensor(offset + scale * rng.normal(size=shape), requires_grad=True)

    def ops():
        a, b = leaf(3, 4), leaf(4, 2)
        c = Tensor(rng.uniform(0.5, 2.0, size=(3, 2)), requires_grad=True)
        return (lambda: ((a @ b) * c / (c + 1.0) + (a.exp().sum() + c.log().sum())).sum()), [a, b, c]

    def softmaxes():
        x = leaf(4, 5)
        w = Tensor(rng.normal(size=(4, 5)))
        return (lambda: (softmax(x) * w).sum() + (log_softmax(x) * w).sum()), [x]

    def layer_norm():
        ln = LayerNorm(6)
        ln.gain.data = rng.normal(1.0, 0.1, size=6)
        x = leaf(3, 6)
        w = Tensor(rng.normal(size=(3, 6)))
        return (lambda: (ln(x) * w).sum()), [x, ln.gain, ln.shift]

    def masked_attention():
        q, k, v = leaf(4, 3), leaf(4, 3), leaf(4, 2)
        mask = np.triu(np.ones((4, 4), dtype=np.uint8), 1)
        return (lambda: (attention(q, k, v, mask) ** 2).sum()), [q, k, v]

    def encoder_layer():
        layer = TransformerEncoderLayer(4, 2, rng)
        x = leaf(3, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda: (layer(x) * w).sum()), [x, layer.attn.q_proj.weight]

    def focal():
        logits = leaf(3)
        target = int(rng.integers(3))
        return (lambda: focal_loss(softmax(logits), target)), [logits]

    def giou():
        gt = np.concatenate([rng.uniform(0, 10, 2), rng.uniform(2, 6, 2)])
        pred = Tensor(gt + rng.normal(0, 1.0, 4) * np.array([1, 1, 0.3, 0.3]), requires_grad=True)
        return (lambda: giou_loss_tensor(pred, gt)), [pred]

    def l1():
        gt = rng.uniform(0, 10, 4)
        pred = Tensor(gt + rng.uniform(0.1, 1.0, 4) * rng.choice([-1, 1], 4), requires_grad=True)
        return (lambda: l1_box_loss_tensor(pred, gt)), [pred]

    def depth_loss():
        bins = lid_bins(4, 1.0, 20.0)
        logits = leaf(3, 3, bins.K + 1)
        targets = rng.integers(0, bins.K + 1, size=(3, 3))
        fg = rng.random((3, 3)) < 0.5

        def f():
            probs = softmax(logits)
            field = DepthField(probs=probs, expected=probs @ bins.as_array(), fg_mask=fg, targets=targets)
            return weighted_depth_loss(field, bins, fg_weight=7.0)
        return f, [logits]

    def depth_position():
        table = DepthPeTable(8, 3, 1.0, 20.0, rng)
        depth = Tensor(rng.uniform(1.5, 19.5, size=5), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)))
        return (lambda: (depth_pe(depth, table) * w).sum()), [table.table, depth]

    def infonce():
        z = [leaf(4) for _ in range(4)]
        return (lambda: info_nce(l2_normalize(z[0]), l2_normalize(z[1]),
                                 [l2_normalize(n) for n in z[2:]], tau=0.5)), z

    def ia():
        embeddings = [leaf(4) for _ in range(6)]
        ids = [0, 0, 1, 1, 2, 2]
        pool = [LabeledEmbedding(e, frame=k % 2, identity=i, iou=float(rng.uniform(0.5, 1.0)))
                for k, (e, i) in enumerate(zip(embeddings, ids))]
        pairs = sample_pairs(pool)
        phi = Mlp([4, 5, 4], rng)
        return (lambda: ia_loss(pairs, phi, tau=0.5)), embeddings + [phi.weights[0]]

    def identity_ce():
        logits = leaf(4)
        new = leaf(1)
        target = int(rng.integers(5))
        return (lambda: id_loss(logits, target, new)), [logits, new]

    def total():
        parts = [Tensor(rng.uniform(0.1, 2.0), requires_grad=True) for _ in range(4)]
        w = LossWeights(id=0.5, depth=2.0, ia=1.5)
        return (lambda: total_loss(*parts, w)), parts

    def temporal():
        ta = TemporalAdapter(4, 2, 2, rng)
        slots = [leaf(4) if rng.random() < 0.7 else None for _ in range(5)]
        slots[0] = slots[0] if slots[0] is not None else leaf(4)
        params = [s for s in slots if s is not None] + [ta.empty_token]
        w = Tensor(rng.normal(size=(5, 4)))
        return (lambda: (temporal_encode(ta.window(0, slots), ta) * w).sum()), params

    def encoder():
        enc = ToyEncoder(4 + 3, 6, 4, rng)
        x = encoder_inputs(rng.uniform(0, 100, (2, 4)), rng.normal(size=(2, 3)), (100.0, 100.0))
        w = Tensor(rng.normal(size=(2, 4)))
        return (lambda: (enc(x) * w).sum()), enc.parameters()

    return {
        "ops": ops, "softmax": softmaxes, "layer_norm": layer_norm, "attention": masked_attention,
        "encoder_layer": encoder_layer, "focal": focal, "giou": giou, "l1": l1, "depth_loss": depth_loss,
        "depth_pe": depth_position, "info_nce": infonce, "ia_loss": ia, "id_loss": identity_ce,
        "total_loss": total, "temporal": temporal, "toy_encoder": encoder,
    }


def gradcheck_suite(names: Optional[Sequence[str]] = None, instances: int = 20, seed: int = 0,
                    epsilon: float = 1e-5) -> dict[str, float]:
    """
    每个可微运算和损失在随机实例上做中心差分检查

    Returns:
        dict[str, float]: 名称 → 最大相对误差

    Raises:
        GradCheckError: 名称未知
    """
    cases = _gradcheck_cases(make_rng(seed, STREAM_GRADCHECK))
    if names:
        unknown = sorted(set(names) - set(cases))
        if unknown:
            raise GradCheckError(f"未知的梯度检查项: {', '.join(unknown)}，可用: {', '.join(GRADCHECK_NAMES)}")
        cases = {k: v for k, v in cases.items() if k in names}
    results = {}
    for name, build in cases.items():
        worst = 0.0
        for _ in range(instances):
            f, params = build()
            worst = max(worst, grad_check(f, params, epsilon).max_rel_error)
        results[name] = worst
        logger.debug(f"梯度检查 {name}: {worst:.3e}")
    return results


# ---------------------------------------------------------------- 基准与消融


BENCHMARK_SCENARIO = dict(preset="crossing", n_objects=8, base_similarity=0.9, appearance_noise=0.15,
                          noise_dim=4, depth_grid=16, occlusion_rate=0.1, detection_noise=0.0)


def benchmark_config(seed: int = 0) -> Config:
    """基准用的小模型与训练设置，场景参数与 benchmark_scenarios 一致"""
    return Config(
        model=ModelConfig(dim=32, heads=2, ta_layers=2, depth_encoder_layers=1, depth_bins=8, n_pe=32,
                          token_pool=4, encoder_hidden=64, phi_hidden=32),
        run=RunConfig(T=10, epochs=10, learning_rate=2e-3, clips_per_scenario=2, ia_warmup_epochs=1,
                      occlusion_prob=0.2, switch_prob=0.1, seed=seed),
        scenario=ScenarioConfig(n_frames=200, seed=seed, **BENCHMARK_SCENARIO),
    )


def benchmark_scenarios(seed: int, sequences: int = 8, n_frames: int = 200, **overrides) -> list[Scenario]:
    """8 个交叉目标、高基础相似度外观码的固定合成基准"""
    base = ScenarioConfig(**{**BENCHMARK_SCENARIO, "n_frames": n_frames, "seed": seed, **overrides})
    return [generate_scenario(base.model_copy(update={"seed": s})) for s in scenario_seeds(seed * 1000, sequences)]


@dataclass
class VariantResult:
    name: str
    eval: EvalResult
    high_fraction: float
    history: list[LossBreakdown]


def run_variant(config: Config, ablation: str, train: Sequence[Scenario], test: Sequence[Scenario]) -> VariantResult:
    """按消融预设训练并在测试场景上评测"""
    config = apply_ablation(config, ablation)
    result = train_toy(config, train)
    evaluation, _ = evaluate_model(result.model, test)
    values = np.concatenate([
        top_k_similarity_distribution([f.embeddings for f in embed_scenario(result.model, s)]).values
        for s in test
    ])
    return VariantResult(name=ablation, eval=evaluation, high_fraction=high_similarity_fraction(values),
                         history=result.history)

