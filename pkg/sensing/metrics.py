#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
評価指標モジュール
見逃し率 P_miss（送信されなかった FOI の割合）、送信率 P_trans、
パラメータ分析用のスピアマン順位相関
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from sensing.errors import MetricsError
from sensing.gate import Decision, GateOutput
from sensing.stream import Frame, FrameStream, Truth


@dataclass(frozen=True)
class RunMetrics:
    p_miss: Optional[float]
    p_trans: float
    n_foi: int
    n_miss: int
    n_trans: int
    n_frames: int

    def to_dict(self) -> Dict:
        return asdict(self)


def _as_bool_array(values: Sequence, positive) -> np.ndarray:
    if isinstance(values, np.ndarray):
        return values.astype(bool)
    if isinstance(values, FrameStream):
        return values.truth_array
    return np.fromiter(
        (v is positive if isinstance(v, type(positive)) else _flag(v) for v in values),
        dtype=bool,
        count=len(values),
    )


def _flag(value) -> bool:
    if isinstance(value, GateOutput):
        return value.transmitted
    if isinstance(value, Frame):
        return value.truth is Truth.FOI
    return bool(value)


def run_metrics(truth: Sequence, decisions: Sequence) -> RunMetrics:
    """
    P_miss = n_miss / n_FOI, P_trans = n_trans / n_frames

    truth は Truth か bool（FOI=True）、decisions は Decision / GateOutput / bool（送信=True）。
    FOI が1つもない場合 p_miss は None
    """
    if len(truth) != len(decisions):
        raise MetricsError(f"長さが一致しません（truth={len(truth)}, decisions={len(decisions)}）")
    if len(truth) == 0:
        raise MetricsError("フレームが1つもありません")

    is_foi = _as_bool_array(truth, Truth.FOI)
    sent = _as_bool_array(decisions, Decision.TRANSMIT)

    n_frames = int(is_foi.shape[0])
    n_foi = int(is_foi.sum())
    n_miss = int((is_foi & ~sent).sum())
    n_trans = int(sent.sum())
    return RunMetrics(
        p_miss=n_miss / n_foi if n_foi > 0 else None,
        p_trans=n_trans / n_frames,
        n_foi=n_foi,
        n_miss=n_miss,
        n_trans=n_trans,
        n_frames=n_frames,
    )


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """平均順位で同順位を扱うスピアマン相関（順位ベクトルのピアソン相関）"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricsError(f"長さが一致しません（x={x.shape}, y={y.shape}）")
    if x.shape[0] < 2:
        raise MetricsError("2点以上必要です")
    if np.unique(x).shape[0] < 2 or np.unique(y).shape[0] < 2:
        raise MetricsError("定数列の相関は定義できません")

    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    rho = float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    return max(-1.0, min(1.0, rho))
