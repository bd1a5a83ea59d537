#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
フレームストリームモジュール
FOI（注目フレーム）と背景フレームが交互に現れる分割型ストリームの生成と、
検出器スコアのトレースファイル読み書きを担当

乱数生成器は numpy の PCG64 を使用（シードごとに再現可能）
"""

import collections.abc
import csv
import io
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union, overload

import numpy as np

from sensing.errors import ConfigError, MetricsError, TraceFormatError

logger = logging.getLogger(__name__)

TRACE_HEADER = ["index", "label", "score"]
_SCORE_PATTERN = re.compile(r"^\d+(\.\d{1,6})?$")
_MAX_SEED = 2 ** 64


class Truth(Enum):
    FOI = "foi"
    BACKGROUND = "bg"

    @property
    def is_foi(self) -> bool:
        return self is Truth.FOI

    @classmethod
    def from_label(cls, label: str) -> "Truth":
        for member in cls:
            if member.value == label:
                return member
        raise ValueError(f"不明なラベル: {label!r}")


@dataclass(frozen=True)
class Frame:
    """ストリームの1タイムステップ（フレーム周期 = 1/f_r 秒）"""
    index: int
    truth: Truth
    score: Optional[float] = None

    def __post_init__(self):
        if self.index < 0:
            raise ConfigError("index", f"負のインデックスは使えません（値: {self.index}）")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ConfigError("score", f"スコアは [0,1] の範囲である必要があります（値: {self.score}）")


@dataclass(frozen=True)
class StreamSpec:
    """
    ストリーム生成パラメータ

    n_frames: 総フレーム数
    ratio_m: 背景フレーム数 / FOI数 (M)
    mean_segment_len: 短い方のクラスの平均連続長
    seed: 64bit 符号なし整数
    """
    n_frames: int
    ratio_m: float
    mean_segment_len: int = 20
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.n_frames, int) or self.n_frames < 1:
            raise ConfigError("n_frames", f"1以上の整数が必要です（値: {self.n_frames!r}）")
        if not _finite_positive(self.ratio_m):
            raise ConfigError("ratio_m", f"正の実数が必要です（値: {self.ratio_m!r}）")
        if not isinstance(self.mean_segment_len, int) or self.mean_segment_len < 1:
            raise ConfigError("mean_segment_len", f"1以上の整数が必要です（値: {self.mean_segment_len!r}）")
        if not isinstance(self.seed, int) or not 0 <= self.seed < _MAX_SEED:
            raise ConfigError("seed", f"64bit 符号なし整数が必要です（値: {self.seed!r}）")

    def segment_means(self) -> Tuple[float, float]:
        """(FOI平均連続長, 背景平均連続長) を返す。短い方が mean_segment_len"""
        short = float(self.mean_segment_len)
        long = short * max(self.ratio_m, 1.0 / self.ratio_m)
        if self.ratio_m >= 1.0:
            return short, long
        return long, short


def _finite_positive(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) \
        and math.isfinite(value) and value > 0


class FrameStream(collections.abc.Sequence):
    """
    列指向のフレーム列（numpy 配列で保持）

    truth は FOI なら True、score は未設定なら NaN。
    インデックスは常に 0 からの連番。
    """

    def __init__(self, truth: np.ndarray, scores: Optional[np.ndarray] = None):
        self._truth = np.asarray(truth, dtype=bool)
        if scores is None:
            scores = np.full(self._truth.shape[0], np.nan)
        self._scores = np.asarray(scores, dtype=float)
        if self._truth.ndim != 1 or self._scores.shape != self._truth.shape:
            raise ValueError("truth と scores は同じ長さの1次元配列である必要があります")

    @classmethod
    def from_frames(cls, frames: Sequence[Frame]) -> "FrameStream":
        if isinstance(frames, FrameStream):
            return frames
        truth = np.fromiter((f.truth is Truth.FOI for f in frames), dtype=bool, count=len(frames))
        scores = np.fromiter(
            (np.nan if f.score is None else f.score for f in frames), dtype=float, count=len(frames)
        )
        return cls(truth, scores)

    @property
    def truth_array(self) -> np.ndarray:
        return self._truth

    @property
    def score_array(self) -> np.ndarray:
        return self._scores

    @property
    def has_scores(self) -> bool:
        return not np.isnan(self._scores).any()

    def with_scores(self, scores: np.ndarray) -> "FrameStream":
        return FrameStream(self._truth, scores)

    def __len__(self) -> int:
        return int(self._truth.shape[0])

    @overload
    def __getitem__(self, item: int) -> Frame: ...

    @overload
    def __getitem__(self, item: slice) -> List[Frame]: ...

    def __getitem__(self, item: Union[int, slice]):
        if isinstance(item, slice):
            return [self[i] for i in range(*item.indices(len(self)))]
        if item < 0:
            item += len(self)
        if not 0 <= item < len(self):
            raise IndexError(item)
        score = self._scores[item]
        return Frame(
            index=item,
            truth=Truth.FOI if self._truth[item] else Truth.BACKGROUND,
            score=None if np.isnan(score) else float(score),
        )

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if isinstance(other, FrameStream):
            return bool(
                np.array_equal(self._truth, other._truth)
                and np.array_equal(self._scores, other._scores, equal_nan=True)
            )
        if isinstance(other, Sequence):
            return list(self) == list(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"FrameStream(n_frames={len(self)}, n_foi={int(self._truth.sum())})"


def as_stream(frames: Sequence[Frame]) -> FrameStream:
    return FrameStream.from_frames(frames)


def generate(spec: StreamSpec) -> FrameStream:
    """
    FOI/背景が交互に連続するストリームを生成

    連続長は幾何分布（FOI平均と背景平均の比が M）。
    先頭クラスは確率 1/(1+M) で FOI。
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    foi_mean, bg_mean = spec.segment_means()
    foi_first = bool(rng.random() < 1.0 / (1.0 + spec.ratio_m))

    first_mean, second_mean = (foi_mean, bg_mean) if foi_first else (bg_mean, foi_mean)
    chunks = []
    filled = 0
    while filled < spec.n_frames:
        pairs = max(16, int(math.ceil((spec.n_frames - filled) / (foi_mean + bg_mean))) + 1)
        lengths = np.empty(2 * pairs, dtype=np.int64)
        lengths[0::2] = rng.geometric(1.0 / first_mean, size=pairs)
        lengths[1::2] = rng.geometric(1.0 / second_mean, size=pairs)
        classes = np.empty(2 * pairs, dtype=bool)
        classes[0::2] = foi_first
        classes[1::2] = not foi_first
        chunk = np.repeat(classes, lengths)
        chunks.append(chunk)
        filled += chunk.shape[0]

    truth = np.concatenate(chunks)[: spec.n_frames]
    logger.debug(
        "ストリーム生成: n_frames=%d M=%s seed=%d foi=%d",
        spec.n_frames, spec.ratio_m, spec.seed, int(truth.sum()),
    )
    return FrameStream(truth)


def segments(frames: Sequence[Frame]) -> List[Tuple[Truth, int, int]]:
    """最大連続区間 (クラス, 開始インデックス, 長さ) の一覧"""
    truth = as_stream(frames).truth_array
    if truth.shape[0] == 0:
        return []
    starts = np.concatenate(([0], np.flatnonzero(np.diff(truth.astype(np.int8))) + 1))
    ends = np.concatenate((starts[1:], [truth.shape[0]]))
    return [
        (Truth.FOI if truth[s] else Truth.BACKGROUND, int(s), int(e - s))
        for s, e in zip(starts, ends)
    ]


def foi_fraction(frames: Sequence[Frame]) -> float:
    """FOIフレームの割合（P_miss の分母 n_FOI / n_frames）"""
    if len(frames) == 0:
        raise MetricsError("空のストリームには FOI 割合を定義できません")
    truth = as_stream(frames).truth_array
    return float(truth.sum()) / truth.shape[0]


def load_trace(path: Union[str, Path]) -> FrameStream:
    """
    トレースCSV（index,label,score）を読み込み

    インデックスは 0 から振り直す。スコア欄が空なら未設定扱い。
    """
    path = Path(path)
    truth: List[bool] = []
    scores: List[float] = []

    data = path.read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise TraceFormatError(data.count(b"\n", 0, e.start) + 1, "UTF-8 として読み込めません", str(path))

    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != TRACE_HEADER:
        raise TraceFormatError(1, f"ヘッダーは {','.join(TRACE_HEADER)} である必要があります", str(path))

    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise TraceFormatError(line, f"列数が不正です（{len(row)}列）", str(path))

        index_text, label, score_text = (cell.strip() for cell in row)
        try:
            int(index_text)
        except ValueError:
            raise TraceFormatError(line, f"index が整数ではありません: {index_text!r}", str(path))

        try:
            truth.append(Truth.from_label(label) is Truth.FOI)
        except ValueError:
            raise TraceFormatError(line, f"不明なラベル: {label!r}（foi または bg）", str(path))

        if score_text == "":
            scores.append(np.nan)
            continue
        if not _SCORE_PATTERN.match(score_text):
            raise TraceFormatError(line, f"スコアの形式が不正です: {score_text!r}", str(path))
        score = float(score_text)
        if not 0.0 <= score <= 1.0:
            raise TraceFormatError(line, f"スコアが [0,1] の範囲外です: {score_text}", str(path))
        scores.append(score)

    logger.info("トレース読み込み: %s (%d フレーム)", path, len(truth))
    return FrameStream(np.array(truth, dtype=bool), np.array(scores, dtype=float))


def write_trace(frames: Sequence[Frame], path: Union[str, Path]) -> Path:
    """トレースCSVを書き出し（UTF-8, LF改行, スコアは小数6桁）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stream = as_stream(frames)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for i, (is_foi, score) in enumerate(zip(stream.truth_array, stream.score_array)):
            label = Truth.FOI.value if is_foi else Truth.BACKGROUND.value
            writer.writerow([i, label, "" if np.isnan(score) else f"{score:.6f}"])
    return path
