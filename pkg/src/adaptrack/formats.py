"""文件格式：MOTChallenge 文本、DGRID1/APPR1 二进制、CSV 结果"""

from __future__ import annotations

import csv
import logging
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from adaptrack.geometry import Box2D, GeometryError
from adaptrack.tracker import TrackRecord, TrackerError

logger = logging.getLogger(__name__)

DGRID_MAGIC = b"DGRID1"
APPR_MAGIC = b"APPR1"


class FormatError(Exception):
    """文件格式错误"""
    def __init__(self, path, message: str):
        self.path = str(path)
        self.message = message
        super().__init__(f"{self.path}: {message}")


def format_mot_row(record: TrackRecord) -> str:
    b = record.box
    return (f"{record.frame},{record.id},{b.x:.3f},{b.y:.3f},{b.w:.3f},{b.h:.3f},"
            f"{record.confidence:.4f},-1,-1,-1")


def write_mot(path: Path, records: Iterable[TrackRecord]) -> None:
    """按 (frame, id) 排序写出 frame,id,x,y,w,h,conf,-1,-1,-1"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(records, key=lambda r: (r.frame, r.id))
    text = "".join(format_mot_row(r) + "\n" for r in rows)
    path.write_text(text, encoding="utf-8")


def parse_mot_line(line: str, path="<text>", lineno: int = 0) -> TrackRecord:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 6:
        raise FormatError(path, f"第 {lineno} 行字段不足: {line!r}")
    try:
        frame = int(float(parts[0]))
        identity = int(float(parts[1]))
        x, y, w, h = (float(v) for v in parts[2:6])
        conf = float(parts[6]) if len(parts) > 6 else 1.0
        return TrackRecord(frame, identity, Box2D(x, y, w, h), conf)
    except (ValueError, GeometryError, TrackerError) as e:
        raise FormatError(path, f"第 {lineno} 行无法解析: {e}")


def read_mot(path: Path) -> list[TrackRecord]:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, "文件不存在")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            records.append(parse_mot_line(line, path, lineno))
    logger.debug(f"读取 {path}: {len(records)} 行")
    return records


def write_dgrid(path: Path, grid: np.ndarray) -> None:
    """DGRID1 + 两个 u32 (rows, cols) + 行优先 f32，全部小端"""
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise FormatError(path, f"深度网格必须是二维: {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(DGRID_MAGIC + struct.pack("<II", *grid.shape) + grid.tobytes(order="C"))


def read_dgrid(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = len(DGRID_MAGIC) + 8
    if data[:len(DGRID_MAGIC)] != DGRID_MAGIC:
        raise FormatError(path, "不是 DGRID1 文件")
    if len(data) < header:
        raise FormatError(path, "头部不完整")
    rows, cols = struct.unpack("<II", data[len(DGRID_MAGIC):header])
    if len(data) != header + 4 * rows * cols:
        raise FormatError(path, f"长度与 {rows}x{cols} 不符")
    return np.frombuffer(data, dtype="<f4", offset=header).reshape(rows, cols).astype(np.float64)


def write_appr(path: Path, codes: np.ndarray) -> None:
    """APPR1 + u32 count + u32 dim + 小端 f32"""
    codes = np.asarray(codes, dtype="<f4")
    if codes.ndim != 2:
        raise FormatError(path, f"外观码必须是二维: {codes.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(APPR_MAGIC + struct.pack("<II", *codes.shape) + codes.tobytes(order="C"))


def read_appr(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = len(APPR_MAGIC) + 8
    if data[:len(APPR_MAGIC)] != APPR_MAGIC:
        raise FormatError(path, "不是 APPR1 文件")
    if len(data) < header:
        raise FormatError(path, "头部不完整")
    count, dim = struct.unpack("<II", data[len(APPR_MAGIC):header])
    if len(data) != header + 4 * count * dim:
        raise FormatError(path, f"长度与 {count}x{dim} 不符")
    return np.frombuffer(data, dtype="<f4", offset=header).reshape(count, dim).astype(np.float64)


def write_metrics_csv(path: Path, metrics: Mapping[str, float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in metrics.items():
            writer.writerow([name, f"{value:.6f}" if isinstance(value, float) else value])


def write_histogram_csv(path: Path, edges: Sequence[float], counts: Sequence[int]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])


def write_matrix_csv(path: Path, matrix: np.ndarray, header: Sequence[str] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(list(header))
        for row in np.atleast_2d(matrix):
            writer.writerow([f"{v:.6f}" for v in row])


def write_object_depths(path: Path, rows: Iterable[tuple[int, int, float]]) -> None:
    """每个可见目标一行 frame,id,depth（帧号、身份从 1 开始）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "id", "depth"])
        for frame, identity, depth in rows:
            writer.writerow([int(frame), int(identity), f"{depth:.6f}"])


def read_object_depths(path: Path) -> dict[tuple[int, int], float]:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, "文件不存在")
    depths = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["frame", "id", "depth"]:
            raise FormatError(path, "表头应为 frame,id,depth")
        for lineno, row in enumerate(reader, 2):
            try:
                frame, identity, depth = int(row[0]), int(row[1]), float(row[2])
            except (IndexError, ValueError):
                raise FormatError(path, f"第 {lineno} 行无法解析: {row!r}")
            depths[(frame, identity)] = depth
    return depths
