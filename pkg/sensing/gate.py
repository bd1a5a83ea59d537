#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
送信ゲートモジュール
遅延型センサー停止（lazy deactivation）としきい値減衰、
最小送信周波数による周期送信を組み合わせた送信判定ステートマシン

カウンタ:
    c1 ... 連続背景判定数
    c2 ... 連続した低周波期間の数（しきい値 max(1, N/2^c2) に使う）
    c3 ... 低周波期間内の位置（0 なら高周波＝遅延判定の状態）
"""

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from sensing.errors import ConfigError

logger = logging.getLogger(__name__)

# c3 の飽和上限（周期送信が無効な場合に無制限に増えないように）
C3_CAP = 2 ** 31 - 1


class Decision(Enum):
    TRANSMIT = 1
    DROP = 0


class CameraMode(Enum):
    HIGH_RES = "high"
    LOW_RES = "low"


class PeriodMode(Enum):
    FAITHFUL = "faithful"
    STRICT_PERIOD = "strict"

    @classmethod
    def parse(cls, value: Union[str, "PeriodMode"]) -> "PeriodMode":
        if isinstance(value, PeriodMode):
            return value
        text = str(value).strip().lower()
        aliases = {"faithful": cls.FAITHFUL, "strict": cls.STRICT_PERIOD, "strict_period": cls.STRICT_PERIOD,
                   "strictperiod": cls.STRICT_PERIOD}
        if text not in aliases:
            raise ConfigError("period_mode", f"faithful または strict を指定してください（値: {value!r}）")
        return aliases[text]


@dataclass(frozen=True)
class GateOutput:
    decision: Decision
    camera_mode: CameraMode

    @property
    def transmitted(self) -> bool:
        return self.decision is Decision.TRANSMIT

    @property
    def high_res(self) -> bool:
        return self.camera_mode is CameraMode.HIGH_RES


# 出力は4通りしかないので共有インスタンスを使う
_OUTPUTS = {
    (True, True): GateOutput(Decision.TRANSMIT, CameraMode.HIGH_RES),
    (True, False): GateOutput(Decision.TRANSMIT, CameraMode.LOW_RES),
    (False, True): GateOutput(Decision.DROP, CameraMode.HIGH_RES),
    (False, False): GateOutput(Decision.DROP, CameraMode.LOW_RES),
}


def make_output(transmit: bool, high_res: bool) -> GateOutput:
    return _OUTPUTS[(bool(transmit), bool(high_res))]


@dataclass(frozen=True)
class GateState:
    c1: int = 0
    c2: int = 0
    c3: int = 0

    @property
    def high_regime(self) -> bool:
        return self.c3 == 0


INITIAL_STATE = GateState()


@dataclass(frozen=True)
class GateConfig:
    """
    ゲート設定

    n: 遅延停止カウント N
    f_r: カメラのリフレッシュレート [Hz]
    f_min: 最小送信周波数 [Hz]（0 で周期送信なし）
    period_mode: FAITHFUL（カウンタ遷移をそのまま適用）または STRICT_PERIOD（純粋な k 周期）
    bypass: True なら全フレームを高解像度で送信（従来システム相当）
    periodic_camera: 周期送信フレームのカメラモード（既定は低解像度）
    """
    n: int
    f_r: int = 30
    f_min: int = 0
    period_mode: PeriodMode = PeriodMode.FAITHFUL
    bypass: bool = False
    periodic_camera: CameraMode = CameraMode.LOW_RES

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError("n", f"1以上の整数が必要です（値: {self.n!r}）")
        if not isinstance(self.f_r, int) or self.f_r < 1:
            raise ConfigError("f_r", f"1以上の整数が必要です（値: {self.f_r!r}）")
        if not isinstance(self.f_min, int) or self.f_min < 0:
            raise ConfigError("f_min", f"0以上の整数が必要です（値: {self.f_min!r}）")
        if self.f_min > self.f_r:
            raise ConfigError("f_min", f"f_min ({self.f_min}) は f_r ({self.f_r}) 以下である必要があります")
        if self.f_min > 0 and self.f_r % self.f_min != 0:
            raise ConfigError("f_min", f"f_r ({self.f_r}) は f_min ({self.f_min}) で割り切れる必要があります")
        object.__setattr__(self, "period_mode", PeriodMode.parse(self.period_mode))
        object.__setattr__(self, "periodic_camera", CameraMode(self.periodic_camera))
        object.__setattr__(self, "_period", None if self.f_min == 0 else self.f_r // self.f_min)
        if not self.bypass and self.period_mode is PeriodMode.FAITHFUL and self.k == 1:
            raise ConfigError(
                "f_min",
                "faithful モードでは f_min = f_r（k=1）だと周期送信が一度も起きません。"
                "strict モードか bypass を使ってください",
            )

    @property
    def k(self) -> Optional[int]:
        """周期 f_r/f_min（周期送信なしなら None）"""
        return self._period


def decay_threshold(n: int, c2: int) -> float:
    """しきい値減衰 N_new = max(1, N / 2^c2)（実数のまま比較する）"""
    if c2 >= n.bit_length():
        # 2^c2 > n なので必ず 1
        return 1.0
    return max(1.0, n / (1 << c2))


def step(state: GateState, config: GateConfig, y: int) -> Tuple[GateState, GateOutput]:
    """1フレーム分の送信判定"""
    c1, c2, c3, transmit, high = _advance(state.c1, state.c2, state.c3, config, y)
    return GateState(c1, c2, c3), make_output(transmit, high)


def _advance(c1: int, c2: int, c3: int, config: GateConfig, y: int):
    if config.bypass:
        if y == 1:
            return 0, 0, 0, True, True
        return c1, c2, c3, True, True

    if y == 1:
        return 0, 0, 0, True, True

    if c3 == 0:
        # 遅延停止: しきい値までは送信を続ける
        c1 += 1
        if c1 <= decay_threshold(config.n, c2):
            return c1, c2, c3, True, True
        return 0, c2 + 1, 1, False, True

    periodic_high = config.periodic_camera is CameraMode.HIGH_RES
    k = config.k
    if k is None:
        return c1, c2, min(c3 + 1, C3_CAP), False, False

    if config.period_mode is PeriodMode.STRICT_PERIOD:
        c3 += 1
        if c3 >= C3_CAP:
            c3 = (c3 - 1) % k + 1
        if c3 % k == 0:
            return c1, c2, c3, True, periodic_high
        return c1, c2, c3, False, False

    c3 += 1
    if c3 == k:
        return c1 + 1, c2, 0, True, periodic_high
    return c1, c2, min(c3, C3_CAP), False, False


class TransmissionGate:
    """1ストリーム専用のゲート（状態を保持する）"""

    def __init__(self, config: GateConfig, state: GateState = INITIAL_STATE):
        self.config = config
        self.state = state

    def feed(self, y: int) -> GateOutput:
        self.state, output = step(self.state, self.config, y)
        return output

    def reset(self):
        self.state = INITIAL_STATE


def run_columns(ys: Iterable[int], config: GateConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    予測列を一括処理し (送信フラグ, 高解像度フラグ) の配列を返す

    step の反復と同じ結果になる高速版
    """
    ys = np.asarray(list(ys) if not isinstance(ys, np.ndarray) else ys, dtype=np.int8)
    if config.bypass:
        return np.ones(ys.shape[0], dtype=bool), np.ones(ys.shape[0], dtype=bool)

    transmit: List[bool] = []
    high: List[bool] = []
    c1 = c2 = c3 = 0
    advance = _advance
    for y in ys.tolist():
        c1, c2, c3, t, h = advance(c1, c2, c3, config, y)
        transmit.append(t)
        high.append(h)
    return np.array(transmit, dtype=bool), np.array(high, dtype=bool)


def run(ys: Iterable[int], config: GateConfig) -> List[GateOutput]:
    """初期状態 (0,0,0) から step を畳み込んだ出力列"""
    transmit, high = run_columns(ys, config)
    return [_OUTPUTS[(t, h)] for t, h in zip(transmit.tolist(), high.tolist())]


@dataclass(frozen=True)
class DecisionLogRow:
    index: int
    y: int
    decision: Decision
    camera_mode: CameraMode
    c1: int
    c2: int
    c3: int


DECISION_LOG_HEADER = ["index", "y", "decision", "camera_mode", "c1", "c2", "c3"]


def run_with_log(ys: Iterable[int], config: GateConfig) -> List[DecisionLogRow]:
    """判定ログ（ステップ後のカウンタ付き）"""
    rows = []
    gate = TransmissionGate(config)
    for i, y in enumerate(ys):
        y = int(y)
        output = gate.feed(y)
        s = gate.state
        rows.append(DecisionLogRow(i, y, output.decision, output.camera_mode, s.c1, s.c2, s.c3))
    return rows


def write_decision_log(rows: Iterable[DecisionLogRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(DECISION_LOG_HEADER)
        for row in rows:
            writer.writerow([
                row.index, row.y, row.decision.value, row.camera_mode.value, row.c1, row.c2, row.c3,
            ])
    logger.info("判定ログを書き出しました: %s", path)
    return path
