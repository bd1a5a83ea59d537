#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
エネルギー・ストレージ計算モジュール
ゲート付きシステムと従来システム（全フレーム送信）の
4項目内訳（センサー・近センサーモデル・送信・サーバー推論）を集計する
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from sensing.errors import ConfigError, MetricsError
from sensing.gate import GateOutput

logger = logging.getLogger(__name__)

ENERGY_FIELDS = ("e_cam_low", "e_cam_high", "e_near", "e_tx", "e_server")
REPORT_CSV_HEADER = [
    "e_sensor", "e_near_total", "e_tx_total", "e_server_total", "e_total", "storage_bytes", "n_transmitted",
]


@dataclass(frozen=True)
class EnergyParams:
    """
    フレームあたりのエネルギー定数 [J/frame]

    カメラの待機電力はフレーム周期 1/f_r が一定なので撮影コストに含める
    """
    e_cam_low: float
    e_cam_high: float
    e_near: float
    e_tx: float
    e_server: float
    bytes_per_frame: int

    def __post_init__(self):
        for name in ENERGY_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                raise ConfigError(name, f"有限の非負値が必要です（値: {value!r}）")
        if self.e_cam_low > self.e_cam_high:
            raise ConfigError("e_cam_low", f"低解像度カメラ ({self.e_cam_low}) が高解像度 ({self.e_cam_high}) を上回っています")
        if not isinstance(self.bytes_per_frame, int) or self.bytes_per_frame < 1:
            raise ConfigError("bytes_per_frame", f"1以上の整数が必要です（値: {self.bytes_per_frame!r}）")

    @classmethod
    def from_dict(cls, data: Dict) -> "EnergyParams":
        names = {f.name for f in fields(cls)}
        missing = names - set(data)
        if missing:
            raise ConfigError(sorted(missing)[0], "エネルギー定数が不足しています")
        values = {name: float(data[name]) for name in ENERGY_FIELDS}
        return cls(bytes_per_frame=int(data["bytes_per_frame"]), **values)

    def to_dict(self) -> Dict:
        return asdict(self)

    def single_camera(self) -> "EnergyParams":
        """低解像度カメラを使わない構成（常に高解像度で撮影）"""
        return EnergyParams(
            e_cam_low=self.e_cam_high, e_cam_high=self.e_cam_high, e_near=self.e_near,
            e_tx=self.e_tx, e_server=self.e_server, bytes_per_frame=self.bytes_per_frame,
        )


@dataclass(frozen=True)
class EnergyReport:
    e_sensor: float
    e_near_total: float
    e_tx_total: float
    e_server_total: float
    e_total: float
    storage_bytes: int
    n_transmitted: int

    def to_dict(self, params: Optional[EnergyParams] = None) -> Dict:
        data = asdict(self)
        if params is not None:
            data["params"] = params.to_dict()
        return data

    def to_csv_row(self) -> str:
        return ",".join(repr(getattr(self, name)) for name in REPORT_CSV_HEADER)

    def shares(self) -> Dict[str, float]:
        """内訳の割合（合計に対する比）"""
        if self.e_total <= 0:
            return {"sensor": 0.0, "near": 0.0, "tx": 0.0, "server": 0.0}
        return {
            "sensor": self.e_sensor / self.e_total,
            "near": self.e_near_total / self.e_total,
            "tx": self.e_tx_total / self.e_total,
            "server": self.e_server_total / self.e_total,
        }


def _report(n_frames: int, n_high: int, n_trans: int, params: EnergyParams, with_near: bool = True) -> EnergyReport:
    # 定数×回数で計算するので加算順による誤差は出ない
    e_sensor = n_high * params.e_cam_high + (n_frames - n_high) * params.e_cam_low
    e_near_total = n_frames * params.e_near if with_near else 0.0
    e_tx_total = n_trans * params.e_tx
    e_server_total = n_trans * params.e_server
    return EnergyReport(
        e_sensor=float(e_sensor),
        e_near_total=float(e_near_total),
        e_tx_total=float(e_tx_total),
        e_server_total=float(e_server_total),
        e_total=float(e_sensor + e_near_total + e_tx_total + e_server_total),
        storage_bytes=int(n_trans) * params.bytes_per_frame,
        n_transmitted=int(n_trans),
    )


def account(outputs: Sequence[GateOutput], params: EnergyParams) -> EnergyReport:
    """ゲート出力列からエネルギー内訳を集計"""
    n_trans = sum(1 for o in outputs if o.transmitted)
    n_high = sum(1 for o in outputs if o.high_res)
    return _report(len(outputs), n_high, n_trans, params)


def account_columns(transmit: np.ndarray, high_res: np.ndarray, params: EnergyParams) -> EnergyReport:
    transmit = np.asarray(transmit, dtype=bool)
    high_res = np.asarray(high_res, dtype=bool)
    return _report(int(transmit.shape[0]), int(high_res.sum()), int(transmit.sum()), params)


def conventional_baseline(n_frames: int, params: EnergyParams) -> EnergyReport:
    """
    全フレームを高解像度で撮影・送信・推論する従来システム

    params はゲート側と別のサーバーモデルのプリセットでもよい
    """
    if not isinstance(n_frames, int) or n_frames < 1:
        raise ConfigError("n_frames", f"1以上の整数が必要です（値: {n_frames!r}）")
    return _report(n_frames, n_frames, n_frames, params, with_near=False)


def savings(ours: EnergyReport, baseline: EnergyReport) -> float:
    """1 - ours/baseline（オーバーヘッドが大きければ負になる）"""
    if baseline.e_total <= 0:
        raise MetricsError("従来システムのエネルギーが 0 のため削減率を計算できません")
    return 1.0 - ours.e_total / baseline.e_total


def write_energy_report(report: EnergyReport, params: EnergyParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(params), f, ensure_ascii=False, indent=2)
    return path


@dataclass(frozen=True)
class OffloadParams:
    """
    エッジでサーバーと同じモデルを動かす構成

    e_edge: エッジ側の1フレーム推論コスト [J/frame]
    offload_fraction: サーバーへオフロードするフレームの割合
    """
    e_edge: float
    offload_fraction: float = 0.0

    def __post_init__(self):
        if not isinstance(self.e_edge, (int, float)) or not math.isfinite(self.e_edge) or self.e_edge < 0:
            raise ConfigError("e_edge", f"有限の非負値が必要です（値: {self.e_edge!r}）")
        if not isinstance(self.offload_fraction, (int, float)) or not 0.0 <= self.offload_fraction <= 1.0:
            raise ConfigError("offload_fraction", f"[0, 1] の範囲で指定してください（値: {self.offload_fraction!r}）")


def offload_baseline(n_frames: int, params: EnergyParams, offload: OffloadParams) -> EnergyReport:
    """
    全フレームを高解像度で撮影し、エッジ推論またはサーバーへのオフロードで処理する比較対象

    エッジ推論のコストは近センサー項に計上する
    """
    if not isinstance(n_frames, int) or n_frames < 1:
        raise ConfigError("n_frames", f"1以上の整数が必要です（値: {n_frames!r}）")
    n_off = int(round(n_frames * offload.offload_fraction))
    n_local = n_frames - n_off
    e_sensor = n_frames * params.e_cam_high
    e_near_total = n_local * offload.e_edge
    e_tx_total = n_off * params.e_tx
    e_server_total = n_off * params.e_server
    return EnergyReport(
        e_sensor=float(e_sensor),
        e_near_total=float(e_near_total),
        e_tx_total=float(e_tx_total),
        e_server_total=float(e_server_total),
        e_total=float(e_sensor + e_near_total + e_tx_total + e_server_total),
        storage_bytes=n_off * params.bytes_per_frame,
        n_transmitted=n_off,
    )


def write_energy_csv(reports: Dict[str, EnergyReport], path: Union[str, Path]) -> Path:
    """システム名ごとに1行の内訳CSV"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(["system"] + REPORT_CSV_HEADER)]
    lines.extend(f"{name},{report.to_csv_row()}" for name, report in reports.items())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
