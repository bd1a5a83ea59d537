#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
近センサー検出器モジュール
フレームごとの物体信頼度（NMS を省いた最大 objectness）を生成し、
しきい値でFOI判定する。ROC/AUC による検出器評価も提供
"""

import csv
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from sensing.errors import ConfigError, DetectorError, MetricsError
from sensing.stream import Frame, FrameStream, Truth, as_stream

logger = logging.getLogger(__name__)


class ScoreModel(ABC):
    """信頼度スコアの生成源"""

    kind: str = ""

    @abstractmethod
    def score(self, frame: Frame, rng: np.random.Generator) -> float:
        ...

    @abstractmethod
    def score_array(self, truth: np.ndarray, scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """ストリーム全体を一括でスコア付け（rng の状態に対して決定的）"""

    def to_dict(self) -> Dict:
        data = asdict(self) if hasattr(self, "__dataclass_fields__") else {}
        data["kind"] = self.kind
        return data


@dataclass(frozen=True)
class IdealModel(ScoreModel):
    kind = "ideal"

    def score(self, frame: Frame, rng: np.random.Generator) -> float:
        return 1.0 if frame.truth is Truth.FOI else 0.0

    def score_array(self, truth, scores, rng):
        return np.asarray(truth, dtype=float)


@dataclass(frozen=True)
class CalibratedModel(ScoreModel):
    """
    潜在空間の正規分布からサンプルし、ロジスティック関数で [0,1] に写像

    AUC は二正規モデルの閉形式 Φ((mu_foi-mu_bg)/sqrt(σ_bg²+σ_foi²)) に一致する
    """
    mu_bg: float = -1.0
    sigma_bg: float = 1.0
    mu_foi: float = 1.0
    sigma_foi: float = 1.0
    kind = "calibrated"

    def __post_init__(self):
        for name in ("sigma_bg", "sigma_foi"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(name, f"正の値が必要です（値: {value}）")
        if not (math.isfinite(self.mu_bg) and math.isfinite(self.mu_foi)):
            raise ConfigError("mu_foi", "平均は有限値である必要があります")
        if self.mu_foi <= self.mu_bg:
            raise ConfigError("mu_foi", f"mu_foi ({self.mu_foi}) は mu_bg ({self.mu_bg}) より大きい必要があります")

    @classmethod
    def from_auc(cls, auc: float, sigma: float = 1.0) -> "CalibratedModel":
        """目標AUCを満たす対称な潜在平均でモデルを作成"""
        if not 0.5 < auc < 1.0:
            raise ConfigError("auc", f"AUC は (0.5, 1) の範囲で指定してください（値: {auc}）")
        separation = float(norm.ppf(auc)) * math.sqrt(2.0) * sigma
        return cls(mu_bg=-separation / 2, sigma_bg=sigma, mu_foi=separation / 2, sigma_foi=sigma)

    def expected_auc(self) -> float:
        return float(norm.cdf((self.mu_foi - self.mu_bg) / math.hypot(self.sigma_bg, self.sigma_foi)))

    def score(self, frame: Frame, rng: np.random.Generator) -> float:
        if frame.truth is Truth.FOI:
            latent = rng.normal(self.mu_foi, self.sigma_foi)
        else:
            latent = rng.normal(self.mu_bg, self.sigma_bg)
        return float(expit(latent))

    def score_array(self, truth, scores, rng):
        noise = rng.standard_normal(len(truth))
        latent = np.where(
            truth,
            self.mu_foi + self.sigma_foi * noise,
            self.mu_bg + self.sigma_bg * noise,
        )
        return expit(latent)


@dataclass(frozen=True)
class ConfusionModel(ScoreModel):
    """FOI は確率 tpr、背景は確率 fpr でスコア 1.0（それ以外は 0.0）"""
    tpr: float = 0.95
    fpr: float = 0.05
    kind = "confusion"

    def __post_init__(self):
        for name in ("tpr", "fpr"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(name, f"[0,1] の範囲で指定してください（値: {value}）")

    def score(self, frame: Frame, rng: np.random.Generator) -> float:
        p = self.tpr if frame.truth is Truth.FOI else self.fpr
        return 1.0 if rng.random() < p else 0.0

    def score_array(self, truth, scores, rng):
        draws = rng.random(len(truth))
        return (draws < np.where(truth, self.tpr, self.fpr)).astype(float)


@dataclass(frozen=True)
class ReplayModel(ScoreModel):
    """フレームに記録済みのスコアをそのまま使う（実モデルのトレース再生）"""
    kind = "replay"

    def score(self, frame: Frame, rng: np.random.Generator) -> float:
        if frame.score is None:
            raise DetectorError(f"フレーム {frame.index} にスコアがありません（replay にはトレースが必要）")
        return frame.score

    def score_array(self, truth, scores, rng):
        scores = np.asarray(scores, dtype=float)
        missing = np.flatnonzero(np.isnan(scores))
        if missing.size:
            raise DetectorError(f"フレーム {int(missing[0])} にスコアがありません（replay にはトレースが必要）")
        return scores


MODEL_KINDS = {
    "ideal": IdealModel,
    "calibrated": CalibratedModel,
    "confusion": ConfusionModel,
    "replay": ReplayModel,
}


def model_from_dict(data: Dict) -> ScoreModel:
    """辞書（設定ファイル・グリッドファイル）から ScoreModel を作成"""
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in MODEL_KINDS:
        raise ConfigError("detector.kind", f"不明な検出器: {kind!r}（{', '.join(MODEL_KINDS)}）")
    if kind == "calibrated" and "auc" in data:
        return CalibratedModel.from_auc(float(data["auc"]), float(data.get("sigma", 1.0)))
    cls = MODEL_KINDS[kind]
    fields = getattr(cls, "__dataclass_fields__", {})
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError("detector", f"{kind} に不明なパラメータ: {', '.join(sorted(unknown))}")
    return cls(**{k: float(v) for k, v in data.items()})


def score(frame: Frame, model: ScoreModel, rng: np.random.Generator) -> float:
    return model.score(frame, rng)


def score_stream(frames: Sequence[Frame], model: ScoreModel, rng: np.random.Generator) -> FrameStream:
    stream = as_stream(frames)
    scores = model.score_array(stream.truth_array, stream.score_array, rng)
    return stream.with_scores(scores)


@dataclass(frozen=True)
class Threshold:
    """YOLO の信頼度しきい値 T"""
    t: float

    def __post_init__(self):
        if not isinstance(self.t, (int, float)) or not 0.0 <= self.t <= 1.0:
            raise ConfigError("threshold", f"[0,1] の範囲で指定してください（値: {self.t!r}）")


def _threshold_value(threshold: Union[Threshold, float]) -> float:
    if isinstance(threshold, Threshold):
        return threshold.t
    return Threshold(threshold).t


def classify(score_value: float, threshold: Union[Threshold, float]) -> int:
    """しきい値を「超える」スコアのみ FOI (1)。境界値は 0"""
    return 1 if score_value > _threshold_value(threshold) else 0


def classify_array(scores: np.ndarray, threshold: Union[Threshold, float]) -> np.ndarray:
    return (np.asarray(scores, dtype=float) > _threshold_value(threshold)).astype(np.int8)


class RocPoint(NamedTuple):
    fpr: float
    tpr: float
    threshold: float


class RocResult(NamedTuple):
    points: List[RocPoint]
    auc: float


def roc_arrays(truth: np.ndarray, scores: np.ndarray) -> RocResult:
    truth = np.asarray(truth, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(truth.sum())
    n_neg = int(truth.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC には FOI と背景の両方が必要です")

    # 降順ソートし、同じスコアはまとめて1ステップ
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_truth = truth[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_scores.shape[0] - 1]
    tps = np.cumsum(sorted_truth)[last_of_group]
    fps = (last_of_group + 1) - tps

    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, sorted_scores[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    points = [RocPoint(float(x), float(y), float(t)) for x, y, t in zip(fpr, tpr, thresholds)]
    return RocResult(points, auc)


def roc(labeled_scores: Sequence[Tuple[Union[Truth, bool], float]]) -> RocResult:
    """(正解, スコア) の列から ROC 曲線と台形則 AUC を計算"""
    truth = np.fromiter(
        ((t is Truth.FOI) if isinstance(t, Truth) else bool(t) for t, _ in labeled_scores),
        dtype=bool,
    )
    scores = np.fromiter((s for _, s in labeled_scores), dtype=float)
    return roc_arrays(truth, scores)


def sample_labeled_scores(
    model: ScoreModel, n_samples: int, rng: np.random.Generator, foi_fraction: float = 0.5
) -> Tuple[np.ndarray, np.ndarray]:
    """ROC 評価用のサンプル（先頭 foi_fraction が FOI）"""
    n_foi = int(round(n_samples * foi_fraction))
    truth = np.zeros(n_samples, dtype=bool)
    truth[:n_foi] = True
    scores = model.score_array(truth, np.full(n_samples, np.nan), rng)
    return truth, scores


def write_roc(result: RocResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for point in result.points:
            writer.writerow([repr(point.threshold), repr(point.fpr), repr(point.tpr)])
        f.write(f"# auc={result.auc!r}\n")
    return path
