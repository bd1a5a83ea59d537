#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
実験制御モジュール
単発シミュレーション・4パラメータ（T, M, f_min, N）スイープ・
スピアマン相関行列・サーバーモデル別エネルギー比較・
誤検出注入チェックを担当
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from sensing.detector import (
    CalibratedModel, ScoreModel, Threshold, classify_array, model_from_dict, score_stream,
)
from sensing.energy import (
    EnergyParams, EnergyReport, OffloadParams, account_columns, conventional_baseline, offload_baseline, savings,
)
from sensing.errors import ConfigError, MetricsError
from sensing.gate import DecisionLogRow, GateConfig, PeriodMode, run_columns, run_with_log
from sensing.metrics import RunMetrics, run_metrics, spearman
from sensing.preset_registry import PresetRegistry
from sensing.stream import FrameStream, StreamSpec, generate

logger = logging.getLogger(__name__)

SWEEP_CSV_HEADER = [
    "t", "m", "fmin", "n", "p_miss_mean", "p_miss_std", "p_trans_mean", "p_trans_std", "savings_mean", "replicates",
]
SWEEP_PARAMETERS = ("t", "m", "f_min", "n")
SWEEP_METRICS = ("p_miss", "p_trans")
HEATMAP_METRICS = SWEEP_METRICS + ("savings",)
COUNT_MODES = ("fixed_foi", "fixed_total")


def derive_seed(base_seed: int, *parts) -> int:
    """
    実行ごとのシードを導出

    blake2b(8バイト) を "base|part1|part2|..."（各要素は repr）に適用し、
    リトルエンディアンの64bit整数として返す。実行順序に依存しない
    """
    text = "|".join([repr(int(base_seed))] + [repr(p) for p in parts])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ------ 単発シミュレーション ------

@dataclass
class SimulationResult:
    metrics: RunMetrics
    energy: EnergyReport
    baseline: EnergyReport
    savings: float
    decision_log: Optional[List[DecisionLogRow]] = None

    def to_dict(self, params: Optional[EnergyParams] = None) -> Dict:
        return {
            "metrics": self.metrics.to_dict(),
            "energy": self.energy.to_dict(params),
            "baseline": self.baseline.to_dict(),
            "savings": self.savings,
        }


def _gate_columns(
    stream: FrameStream, detector: ScoreModel, threshold: Union[Threshold, float], gate_config: GateConfig, seed: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    ys = classify_array(score_stream(stream, detector, rng).score_array, threshold)
    transmit, high = run_columns(ys, gate_config)
    return ys, transmit, high


def simulate(
    spec: StreamSpec,
    detector: ScoreModel,
    threshold: Union[Threshold, float],
    gate_config: GateConfig,
    energy_params: EnergyParams,
    seed: int,
    emit_log: bool = False,
    frames: Optional[FrameStream] = None,
    baseline_params: Optional[EnergyParams] = None,
) -> SimulationResult:
    """
    ストリーム生成 → スコア付け → しきい値判定 → ゲート → 指標/エネルギー

    frames を渡すと生成の代わりにそれを使う（トレース再生用）
    baseline_params を渡すと従来システムはそのサーバーモデルで計算する
    """
    stream = frames if frames is not None else generate(spec)
    ys, transmit, high = _gate_columns(stream, detector, threshold, gate_config, seed)
    metrics = run_metrics(stream.truth_array, transmit)
    energy = account_columns(transmit, high, energy_params)
    baseline = conventional_baseline(len(stream), baseline_params or energy_params)
    log = run_with_log(ys.tolist(), gate_config) if emit_log else None

    logger.debug(
        "simulate: frames=%d p_miss=%s p_trans=%.4f", metrics.n_frames, metrics.p_miss, metrics.p_trans,
    )
    return SimulationResult(metrics, energy, baseline, savings(energy, baseline), log)


# ------ スイープ ------

@dataclass(frozen=True)
class StreamTemplate:
    """M とシード以外のストリーム設定"""
    n_frames: int = 10000
    n_foi: int = 500
    mean_segment_len: int = 20
    count_mode: str = "fixed_foi"

    def __post_init__(self):
        if self.count_mode not in COUNT_MODES:
            raise ConfigError("stream.count_mode", f"{' / '.join(COUNT_MODES)} のいずれかを指定してください")
        if self.count_mode == "fixed_foi" and (not isinstance(self.n_foi, int) or self.n_foi < 1):
            raise ConfigError("stream.n_foi", f"1以上の整数が必要です（値: {self.n_foi!r}）")

    def spec_for(self, ratio_m: float, seed: int) -> StreamSpec:
        if self.count_mode == "fixed_foi":
            n_frames = int(round(self.n_foi * (1.0 + ratio_m)))
        else:
            n_frames = self.n_frames
        return StreamSpec(n_frames=n_frames, ratio_m=ratio_m, mean_segment_len=self.mean_segment_len, seed=seed)


class GridPoint(NamedTuple):
    t: float
    m: float
    f_min: int
    n: int


@dataclass(frozen=True)
class SweepGrid:
    """
    スイープ条件（T × M × f_min × N の直積）

    fmin_values は f_r に対する割合（0 を含めてよい）
    """
    t_values: Tuple[float, ...]
    m_values: Tuple[float, ...]
    fmin_values: Tuple[float, ...]
    n_values: Tuple[int, ...]
    detector: ScoreModel
    energy: EnergyParams
    replicates: int = 1
    base_seed: int = 0
    f_r: int = 60
    period_mode: PeriodMode = PeriodMode.FAITHFUL
    template: StreamTemplate = field(default_factory=StreamTemplate)

    def fmin_hz(self, fraction: float) -> int:
        value = fraction * self.f_r
        if fraction < 0 or abs(value - round(value)) > 1e-9:
            raise ConfigError("fmin_values", f"f_r={self.f_r} に対して整数にならない割合です: {fraction}")
        return int(round(value))

    def points(self) -> List[GridPoint]:
        return [
            GridPoint(float(t), float(m), self.fmin_hz(f), int(n))
            for t in self.t_values
            for m in self.m_values
            for f in self.fmin_values
            for n in self.n_values
        ]

    def gate_config(self, point: GridPoint) -> GateConfig:
        return GateConfig(n=point.n, f_r=self.f_r, f_min=point.f_min, period_mode=self.period_mode)

    def validate(self) -> List[GridPoint]:
        """全グリッド点を実行前に検証（1つでも不正なら ConfigError）"""
        if not isinstance(self.replicates, int) or self.replicates < 1:
            raise ConfigError("replicates", f"1以上の整数が必要です（値: {self.replicates!r}）")
        for name in ("t_values", "m_values", "fmin_values", "n_values"):
            if not getattr(self, name):
                raise ConfigError(name, "値が1つもありません")
        points = self.points()
        for point in points:
            Threshold(point.t)
            self.gate_config(point)
            self.template.spec_for(point.m, 0)
        return points

    @classmethod
    def from_dict(cls, data: Dict, registry: Optional[PresetRegistry] = None) -> "SweepGrid":
        """グリッドファイル（JSON）の内容から作成"""
        try:
            stream = data.get("stream", {})
            template = StreamTemplate(
                n_frames=int(stream.get("n_frames", 10000)),
                n_foi=int(stream.get("n_foi", 500)),
                mean_segment_len=int(stream.get("mean_segment_len", 20)),
                count_mode=stream.get("count_mode", "fixed_foi"),
            )
            return cls(
                t_values=tuple(float(v) for v in data["t_values"]),
                m_values=tuple(float(v) for v in data["m_values"]),
                fmin_values=tuple(float(v) for v in data["fmin_values"]),
                n_values=tuple(int(v) for v in data["n_values"]),
                detector=model_from_dict(data.get("detector", {"kind": "calibrated", "auc": 0.95})),
                energy=_energy_from_dict(data.get("energy", {"preset": "server_dominated"}), registry),
                replicates=int(data.get("replicates", 1)),
                base_seed=int(data.get("base_seed", 0)),
                f_r=int(data.get("f_r", 60)),
                period_mode=PeriodMode.parse(data.get("period_mode", "faithful")),
                template=template,
            )
        except KeyError as e:
            raise ConfigError(str(e.args[0]), "グリッドファイルに必須項目がありません")
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError("grid", f"グリッドファイルの値が不正です: {e}")


def _energy_from_dict(data: Dict, registry: Optional[PresetRegistry]) -> EnergyParams:
    if "preset" in data:
        if registry is None:
            raise ConfigError("energy.preset", "プリセットを使うにはプリセットレジストリが必要です")
        return registry.get_params(data["preset"])
    return EnergyParams.from_dict(data)


def default_grid(energy: EnergyParams, detector: Optional[ScoreModel] = None, replicates: int = 3) -> SweepGrid:
    """既定のスイープグリッド（data/default_grid.json と同じ値）"""
    return SweepGrid(
        t_values=tuple(round(0.1 * i, 1) for i in range(1, 10)),
        m_values=(1.0, 5.0, 10.0, 20.0, 50.0),
        fmin_values=(0.0, 0.25, 0.5),
        n_values=(1, 2, 4, 8),
        detector=detector or CalibratedModel.from_auc(0.95),
        energy=energy,
        replicates=replicates,
        f_r=60,
    )


@dataclass(frozen=True)
class SweepRow:
    t: float
    m: float
    f_min: int
    n: int
    p_miss_mean: Optional[float]
    p_miss_std: Optional[float]
    p_trans_mean: float
    p_trans_std: float
    savings_mean: float
    replicates: int

    def csv_values(self) -> List[str]:
        return [
            repr(self.t), repr(self.m), str(self.f_min), str(self.n),
            _fmt(self.p_miss_mean), _fmt(self.p_miss_std),
            _fmt(self.p_trans_mean), _fmt(self.p_trans_std), _fmt(self.savings_mean),
            str(self.replicates),
        ]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


class _RunOutcome(NamedTuple):
    point_index: int
    replicate: int
    p_miss: Optional[float]
    p_trans: float
    savings: float


def _run_job(job: Tuple[SweepGrid, int, GridPoint, int]) -> _RunOutcome:
    grid, point_index, point, replicate = job
    run_seed = derive_seed(grid.base_seed, point.t, point.m, point.f_min, point.n, replicate)
    spec = grid.template.spec_for(point.m, derive_seed(run_seed, "stream"))
    result = simulate(
        spec, grid.detector, point.t, grid.gate_config(point), grid.energy, derive_seed(run_seed, "detector"),
    )
    return _RunOutcome(point_index, replicate, result.metrics.p_miss, result.metrics.p_trans, result.savings)


def _mean_std(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if arr.shape[0] >= 2 else 0.0
    return float(arr.mean()), std


def aggregate(point: GridPoint, outcomes: Sequence[_RunOutcome]) -> SweepRow:
    """反復結果を集計（反復番号順に並べてから計算するので実行順序に依存しない）"""
    outcomes = sorted(outcomes, key=lambda o: o.replicate)
    p_miss_mean, p_miss_std = _mean_std([o.p_miss for o in outcomes if o.p_miss is not None])
    p_trans_mean, p_trans_std = _mean_std([o.p_trans for o in outcomes])
    savings_mean, _ = _mean_std([o.savings for o in outcomes])
    return SweepRow(
        t=point.t, m=point.m, f_min=point.f_min, n=point.n,
        p_miss_mean=p_miss_mean, p_miss_std=p_miss_std,
        p_trans_mean=p_trans_mean, p_trans_std=p_trans_std,
        savings_mean=savings_mean, replicates=len(outcomes),
    )


def run_sweep(grid: SweepGrid, workers: int = 1) -> List[SweepRow]:
    """
    グリッド全点 × 反復回数のシミュレーションを実行して集計

    行の順序はグリッドの辞書式順序（実行順序・並列度に依存しない）
    """
    points = grid.validate()
    jobs = [(grid, i, point, rep) for i, point in enumerate(points) for rep in range(grid.replicates)]
    logger.info("スイープ開始: %d 点 × %d 反復 (workers=%d)", len(points), grid.replicates, workers)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(_run_job, jobs, chunksize=max(1, len(jobs) // (workers * 8))))
    else:
        outcomes = [_run_job(job) for job in jobs]

    grouped: Dict[int, List[_RunOutcome]] = {i: [] for i in range(len(points))}
    for outcome in outcomes:
        grouped[outcome.point_index].append(outcome)
    rows = [aggregate(point, grouped[i]) for i, point in enumerate(points)]
    logger.info("スイープ完了: %d 行", len(rows))
    return rows


def spearman_matrix(rows: Sequence[SweepRow]) -> Dict[str, Dict[str, Optional[float]]]:
    """パラメータ × 指標のスピアマン係数（計算できないセルは None）"""
    matrix: Dict[str, Dict[str, Optional[float]]] = {}
    for param in SWEEP_PARAMETERS:
        matrix[param] = {}
        for metric in SWEEP_METRICS:
            usable = [r for r in rows if getattr(r, f"{metric}_mean") is not None]
            xs = [getattr(r, param) for r in usable]
            ys = [getattr(r, f"{metric}_mean") for r in usable]
            try:
                matrix[param][metric] = spearman(xs, ys)
            except MetricsError:
                matrix[param][metric] = None
    return matrix


def heatmap_table(rows: Sequence[SweepRow], metric: str, x: str = "t", y: str = "m") -> List[Tuple[float, float, float]]:
    """2パラメータごとの指標平均（他のパラメータは平均化した縦持ち表）"""
    if metric not in HEATMAP_METRICS:
        raise ConfigError("metric", f"{' / '.join(HEATMAP_METRICS)} のいずれかを指定してください（値: {metric!r}）")
    if x not in SWEEP_PARAMETERS or y not in SWEEP_PARAMETERS or x == y:
        raise ConfigError("heatmap_axes", f"{' / '.join(SWEEP_PARAMETERS)} から異なる2つを指定してください（値: {x},{y}）")
    cells: Dict[Tuple[float, float], List[float]] = {}
    for row in rows:
        value = getattr(row, f"{metric}_mean")
        if value is None:
            continue
        cells.setdefault((getattr(row, x), getattr(row, y)), []).append(value)
    return [(kx, ky, float(np.mean(vals))) for (kx, ky), vals in sorted(cells.items())]


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def sweep_csv_text(rows: Sequence[SweepRow]) -> str:
    lines = [",".join(SWEEP_CSV_HEADER)]
    lines.extend(",".join(row.csv_values()) for row in rows)
    return "\n".join(lines) + "\n"


def write_sweep(rows: Sequence[SweepRow], path: Union[str, Path], fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "csv":
        text = sweep_csv_text(rows)
    elif fmt == "json":
        text = json.dumps([asdict(r) for r in rows], ensure_ascii=False, indent=2) + "\n"
    else:
        raise ConfigError("format", f"csv または json を指定してください（値: {fmt!r}）")
    _atomic_write(path, text)
    return path


def write_spearman(matrix: Dict[str, Dict[str, Optional[float]]], path: Union[str, Path]) -> Path:
    lines = ["parameter,metric,rho"]
    for param, cells in matrix.items():
        for metric, rho in cells.items():
            lines.append(f"{param},{metric},{_fmt(rho)}")
    path = Path(path)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def write_heatmap(rows: Sequence[SweepRow], metric: str, path: Union[str, Path], x: str = "t", y: str = "m") -> Path:
    """heatmap_table の縦持ちCSV（x, y, 指標平均）"""
    table = heatmap_table(rows, metric, x, y)
    lines = [f"{x},{y},{metric}_mean"]
    lines.extend(f"{kx!r},{ky!r},{_fmt(value)}" for kx, ky, value in table)
    path = Path(path)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def write_heatmaps(rows: Sequence[SweepRow], out_dir: Union[str, Path], x: str = "t", y: str = "m") -> List[Path]:
    """指標ごとに heatmap_<metric>_<x>_<y>.csv を書き出す"""
    out_dir = Path(out_dir)
    return [write_heatmap(rows, metric, out_dir / f"heatmap_{metric}_{x}_{y}.csv", x, y) for metric in HEATMAP_METRICS]


# ------ エネルギー比較（サーバーモデル × M） ------

ENERGY_CSV_HEADER = [
    "preset", "m", "n_frames", "p_miss", "p_trans", "e_total", "e_conventional", "e_offload",
    "ratio_conventional", "ratio_offload",
]


@dataclass(frozen=True)
class EnergyComparisonRow:
    preset: str
    m: float
    n_frames: int
    p_miss: Optional[float]
    p_trans: float
    e_total: float
    e_conventional: float
    e_offload: Optional[float] = None

    @property
    def ratio_conventional(self) -> float:
        return self.e_total / self.e_conventional

    @property
    def ratio_offload(self) -> Optional[float]:
        if not self.e_offload:
            return None
        return self.e_total / self.e_offload

    def csv_values(self) -> List[str]:
        return [
            self.preset, repr(self.m), str(self.n_frames), _fmt(self.p_miss), _fmt(self.p_trans),
            _fmt(self.e_total), _fmt(self.e_conventional), _fmt(self.e_offload),
            _fmt(self.ratio_conventional), _fmt(self.ratio_offload),
        ]


def energy_comparison(
    m_values: Sequence[float],
    server_params: Dict[str, EnergyParams],
    baseline_params: EnergyParams,
    detector: ScoreModel,
    threshold: Union[Threshold, float],
    gate_config: GateConfig,
    template: StreamTemplate,
    base_seed: int = 0,
    offload: Optional[OffloadParams] = None,
) -> List[EnergyComparisonRow]:
    """
    M ごとに1本のストリームでゲートを動かし、サーバーモデル別のエネルギーを比較

    従来システムは常に baseline_params（軽量モデル）で計算する。
    fixed_foi テンプレートなら FOI 数を固定したまま背景フレームだけが増える。
    """
    if not m_values:
        raise ConfigError("m_values", "値が1つもありません")
    if not server_params:
        raise ConfigError("server_presets", "サーバーモデルのプリセットが1つもありません")

    rows: List[EnergyComparisonRow] = []
    for m in m_values:
        run_seed = derive_seed(base_seed, "energy", float(m))
        stream = generate(template.spec_for(float(m), derive_seed(run_seed, "stream")))
        _, transmit, high = _gate_columns(stream, detector, threshold, gate_config, derive_seed(run_seed, "detector"))
        metrics = run_metrics(stream.truth_array, transmit)
        conventional = conventional_baseline(len(stream), baseline_params)
        offloaded = offload_baseline(len(stream), baseline_params, offload) if offload is not None else None
        for name, params in server_params.items():
            energy = account_columns(transmit, high, params)
            rows.append(EnergyComparisonRow(
                preset=name, m=float(m), n_frames=len(stream),
                p_miss=metrics.p_miss, p_trans=metrics.p_trans,
                e_total=energy.e_total, e_conventional=conventional.e_total,
                e_offload=None if offloaded is None else offloaded.e_total,
            ))
        logger.info("エネルギー比較: M=%s frames=%d p_trans=%.4f", m, len(stream), metrics.p_trans)
    return rows


def write_energy_comparison(rows: Sequence[EnergyComparisonRow], path: Union[str, Path]) -> Path:
    lines = [",".join(ENERGY_CSV_HEADER)]
    lines.extend(",".join(row.csv_values()) for row in rows)
    path = Path(path)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


# ------ 誤検出注入チェック ------

@dataclass(frozen=True)
class FpCheckEntry:
    n: int
    k: Optional[int]
    worst_position: int
    max_extra: int

    @property
    def bound(self) -> int:
        return 2 * self.n + 1

    @property
    def ok(self) -> bool:
        return self.max_extra <= self.bound


@dataclass
class FpCheckReport:
    entries: List[FpCheckEntry]

    @property
    def max_extra(self) -> int:
        return max((e.max_extra for e in self.entries), default=0)

    @property
    def violations(self) -> List[FpCheckEntry]:
        return [e for e in self.entries if not e.ok]

    @property
    def ok(self) -> bool:
        return not self.violations


def _fp_gate_config(n: int, k: Optional[int], period_mode: PeriodMode) -> GateConfig:
    if not k:
        return GateConfig(n=n, f_r=30, f_min=0, period_mode=period_mode)
    return GateConfig(n=n, f_r=k, f_min=1, period_mode=period_mode)


def extra_transmissions(config: GateConfig, stream_len: int, positions: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    背景のみのストリームの位置 p に y=1 を1つ注入したときの追加送信数

    y=1 で状態は (0,0,0) に戻り、その後は注入なしの系列と同じ軌跡をたどるので
    extra(p) = S[p] + 1 + S[L-p-1] - S[L]（S は注入なし系列の累積送信数）
    """
    transmit, _ = run_columns(np.zeros(stream_len, dtype=np.int8), config)
    cumulative = np.concatenate(([0], np.cumsum(transmit, dtype=np.int64)))
    if positions is None:
        positions = np.arange(stream_len)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size and (positions.min() < 0 or positions.max() >= stream_len):
        raise ConfigError("positions", f"位置は 0 以上 {stream_len} 未満で指定してください")
    return cumulative[positions] + 1 + cumulative[stream_len - positions - 1] - cumulative[stream_len]


def inject_fp_check(
    n_max: int,
    k_set: Sequence[Optional[int]],
    stream_len: int,
    positions: Optional[Sequence[int]] = None,
    period_mode: PeriodMode = PeriodMode.FAITHFUL,
) -> FpCheckReport:
    """N ≤ n_max と周期 k の全組み合わせで追加送信数の最大値を調べる（上限 2N+1）"""
    if stream_len < 1:
        raise ConfigError("stream_len", "1以上が必要です")
    entries = []
    for n in range(1, n_max + 1):
        for k in k_set:
            config = _fp_gate_config(n, k, period_mode)
            extras = extra_transmissions(config, stream_len, positions)
            worst = int(np.argmax(extras)) if extras.size else 0
            position = int(positions[worst]) if positions is not None and extras.size else worst
            entry = FpCheckEntry(n=n, k=k or None, worst_position=position,
                                 max_extra=int(extras.max()) if extras.size else 0)
            if not entry.ok:
                logger.warning("⚠️ 追加送信が上限を超えました: N=%d k=%s extra=%d", n, k, entry.max_extra)
            entries.append(entry)
    return FpCheckReport(entries)
