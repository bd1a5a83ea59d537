#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Near-Sensor Transmission Simulator - メインファイル
近センサー判定による選択的送信のシミュレーションCLI
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from config_manager import ConfigManager, setup_logging
from experiment_controller import (
    StreamTemplate, SweepGrid, default_grid, energy_comparison, inject_fp_check, run_sweep, simulate, spearman_matrix,
    write_energy_comparison, write_heatmaps, write_spearman, write_sweep,
)
from sensing import __version__
from sensing.detector import (
    CalibratedModel, ConfusionModel, IdealModel, ReplayModel, ScoreModel, Threshold, roc_arrays,
    sample_labeled_scores, write_roc,
)
from sensing.energy import EnergyParams, OffloadParams, write_energy_csv, write_energy_report
from sensing.errors import ConfigError, DetectorError, MetricsError, TraceFormatError
from sensing.gate import GateConfig, PeriodMode, write_decision_log
from sensing.preset_registry import SERVER_MODEL_SCALES, PresetRegistry
from sensing.stream import StreamSpec, load_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_BOUND_VIOLATED = 1
EXIT_CONFIG_ERROR = 2
EXIT_IO_ERROR = 3


def _parse_k_set(text: str) -> List[Optional[int]]:
    """カンマ区切りの周期（0 は周期送信なし → None）"""
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("k_set", f"カンマ区切りの整数で指定してください（値: {text!r}）")
    if any(v < 0 for v in values):
        raise ConfigError("k_set", "負の周期は指定できません")
    return [v or None for v in values]


def _parse_axes(text: str) -> Tuple[str, str]:
    """ヒートマップの2軸（例: "t,m"）"""
    axes = [v.strip() for v in text.split(",") if v.strip()]
    if len(axes) != 2:
        raise ConfigError("heatmap_axes", f"2つの軸をカンマ区切りで指定してください（値: {text!r}）")
    return axes[0], axes[1]


def _parse_floats(field: str, text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(field, f"カンマ区切りの数値で指定してください（値: {text!r}）")


class SensingSimulator:
    def __init__(self, config_dir: Path = Path("data")):
        # 設定管理システムの初期化
        self.config_manager = ConfigManager(config_dir)
        self.config = self.config_manager.load_config()
        self.output_dir = Path(self.config['output_dir'])

    @property
    def registry(self) -> PresetRegistry:
        return PresetRegistry(Path(self.config['energy']['presets_file']))

    def build_parser(self) -> argparse.ArgumentParser:
        sim = self.config['simulation']
        det = self.config['detector']

        parser = argparse.ArgumentParser(prog="main.py", description="近センサー選択送信シミュレーター")
        sub = parser.add_subparsers(dest="command", required=True)

        detector_args = argparse.ArgumentParser(add_help=False)
        detector_args.add_argument("--detector", choices=["ideal", "calibrated", "confusion", "replay"],
                                   default=det['kind'])
        detector_args.add_argument("--mu-bg", type=float, default=det['mu_bg'])
        detector_args.add_argument("--sigma-bg", type=float, default=det['sigma_bg'])
        detector_args.add_argument("--mu-foi", type=float, default=det['mu_foi'])
        detector_args.add_argument("--sigma-foi", type=float, default=det['sigma_foi'])
        detector_args.add_argument("--auc", type=float, default=None, help="calibrated を目標AUCから作成")
        detector_args.add_argument("--tpr", type=float, default=det['tpr'])
        detector_args.add_argument("--fpr", type=float, default=det['fpr'])
        detector_args.add_argument("--seed", type=int, default=sim['seed'])

        p = sub.add_parser("simulate", parents=[detector_args], help="単発シミュレーション")
        p.add_argument("--frames", type=int, default=sim['frames'])
        p.add_argument("--ratio-m", type=float, default=sim['ratio_m'])
        p.add_argument("--segment-len", type=int, default=sim['segment_len'])
        p.add_argument("--trace", type=Path, default=None, help="トレースCSV（replay では必須）")
        p.add_argument("--threshold", type=float, default=sim['threshold'])
        p.add_argument("--n", type=int, default=sim['n'])
        p.add_argument("--fr", type=int, default=sim['fr'])
        p.add_argument("--fmin", type=int, default=sim['fmin'])
        p.add_argument("--period-mode", choices=["faithful", "strict"], default=sim['period_mode'])
        p.add_argument("--bypass", action="store_true", help="全フレームを送信（従来システム）")
        energy = p.add_mutually_exclusive_group()
        energy.add_argument("--energy-preset", default=self.config['energy']['preset'])
        energy.add_argument("--energy-file", type=Path, default=None, help="EnergyParams のJSONファイル")
        p.add_argument("--baseline-preset", default=None, help="従来システムのサーバーモデル（既定はゲート側と同じ）")
        p.add_argument("--emit-log", type=Path, default=None, help="判定ログCSVの出力先")
        p.add_argument("--report", type=Path, default=None, help="エネルギー内訳の出力先（.csv ならCSV、それ以外はJSON）")

        p = sub.add_parser("sweep", help="4パラメータスイープ")
        p.add_argument("--grid-file", type=Path, default=Path(self.config['sweep']['default_grid']))
        p.add_argument("--out", type=Path, default=self.output_dir / "sweep.csv")
        p.add_argument("--format", choices=["csv", "json"], default="csv")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--spearman-out", type=Path, default=None)
        p.add_argument("--heatmap-out", type=Path, default=None, help="ヒートマップ表（縦持ちCSV）の出力ディレクトリ")
        p.add_argument("--heatmap-axes", default="t,m", help="ヒートマップの2軸（t, m, f_min, n から2つ）")

        p = sub.add_parser("roc", parents=[detector_args], help="検出器のROC曲線")
        p.add_argument("--samples", type=int, default=100000)
        p.add_argument("--out", type=Path, default=self.output_dir / "roc.csv")

        p = sub.add_parser("energy", parents=[detector_args], help="サーバーモデル × M のエネルギー比較（FOI数固定）")
        p.add_argument("--m-values", default="1,5,10,20,50")
        p.add_argument("--n-foi", type=int, default=1016)
        p.add_argument("--segment-len", type=int, default=sim['segment_len'])
        p.add_argument("--threshold", type=float, default=sim['threshold'])
        p.add_argument("--n", type=int, default=sim['n'])
        p.add_argument("--fr", type=int, default=sim['fr'])
        p.add_argument("--fmin", type=int, default=sim['fmin'])
        p.add_argument("--period-mode", choices=["faithful", "strict"], default=sim['period_mode'])
        p.add_argument("--server-presets", default=",".join(SERVER_MODEL_SCALES))
        p.add_argument("--baseline-preset", default=next(iter(SERVER_MODEL_SCALES)))
        p.add_argument("--edge-energy", type=float, default=None, help="エッジ推論コスト（既定は従来側のサーバー推論と同じ）")
        p.add_argument("--offload-fraction", type=float, default=0.0)
        p.add_argument("--out", type=Path, default=self.output_dir / "energy_vs_m.csv")

        p = sub.add_parser("fpcheck", help="誤検出1回あたりの追加送信数の上限チェック")
        p.add_argument("--n-max", type=int, default=16)
        p.add_argument("--k-set", default="0,2,3,4,5,6,7,8,10,15,30", help="0 は周期送信なし")
        p.add_argument("--len", dest="stream_len", type=int, default=10000)
        p.add_argument("--period-mode", choices=["faithful", "strict"], default="faithful")

        sub.add_parser("version", help="バージョン表示")
        config = sub.add_parser("config", help="解決済みの設定と環境変数の状態を表示")
        config.add_argument("--init", action="store_true", help="テンプレートから data/sim_config.json を作成")
        return parser

    def _detector(self, args) -> ScoreModel:
        if args.detector == "ideal":
            return IdealModel()
        if args.detector == "calibrated":
            if args.auc is not None:
                return CalibratedModel.from_auc(args.auc)
            return CalibratedModel(args.mu_bg, args.sigma_bg, args.mu_foi, args.sigma_foi)
        if args.detector == "confusion":
            return ConfusionModel(args.tpr, args.fpr)
        return ReplayModel()

    def _energy_params(self, args) -> EnergyParams:
        if args.energy_file is None:
            return self.registry.get_params(args.energy_preset)
        try:
            data = json.loads(args.energy_file.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError("energy_file", f"JSON として読み込めません: {e}")
        if not isinstance(data, dict):
            raise ConfigError("energy_file", "EnergyParams のオブジェクトが必要です")
        try:
            return EnergyParams.from_dict(data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError("energy_file", f"数値として解釈できません: {e}")

    def cmd_simulate(self, args) -> int:
        detector = self._detector(args)
        frames = None
        if args.trace is not None:
            frames = load_trace(args.trace)
        elif isinstance(detector, ReplayModel):
            raise ConfigError("trace", "replay 検出器には --trace が必要です")

        if frames is not None:
            spec = StreamSpec(n_frames=len(frames), ratio_m=1.0, mean_segment_len=1, seed=args.seed)
        else:
            spec = StreamSpec(args.frames, args.ratio_m, args.segment_len, args.seed)
        gate_config = GateConfig(
            n=args.n, f_r=args.fr, f_min=args.fmin,
            period_mode=PeriodMode.parse(args.period_mode), bypass=args.bypass,
        )
        threshold = Threshold(args.threshold)
        params = self._energy_params(args)
        baseline_params = self.registry.get_params(args.baseline_preset) if args.baseline_preset else None

        result = simulate(spec, detector, threshold, gate_config, params, args.seed,
                          emit_log=args.emit_log is not None, frames=frames, baseline_params=baseline_params)
        m = result.metrics
        print("📊 シミュレーション結果")
        print("=" * 50)
        print(f"   フレーム数: {m.n_frames} (FOI: {m.n_foi})")
        print(f"   P_miss: {'-' if m.p_miss is None else f'{m.p_miss:.4f}'}")
        print(f"   P_trans: {m.p_trans:.4f}")
        print(f"   エネルギー: {result.energy.e_total:.3f} J (従来: {result.baseline.e_total:.3f} J)")
        print(f"   削減率: {result.savings * 100:.1f}%")
        print(f"   ストレージ: {result.energy.storage_bytes / 1e9:.3f} GB (従来: {result.baseline.storage_bytes / 1e9:.3f} GB)")

        if args.emit_log is not None:
            write_decision_log(result.decision_log, args.emit_log)
            print(f"✅ 判定ログを保存しました: {args.emit_log}")
        if args.report is not None:
            if args.report.suffix.lower() == ".csv":
                write_energy_csv({"gated": result.energy, "conventional": result.baseline}, args.report)
            else:
                write_energy_report(result.energy, params, args.report)
            print(f"✅ エネルギー内訳を保存しました: {args.report}")
        return EXIT_OK

    def cmd_sweep(self, args) -> int:
        registry = self.registry
        if args.grid_file.exists():
            try:
                with open(args.grid_file, 'r', encoding='utf-8') as f:
                    data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("grid_file", f"JSON として読み込めません: {e}")
            grid = SweepGrid.from_dict(data, registry)
        else:
            print(f"⚠️ グリッドファイルが見つからないため既定のグリッドを使います: {args.grid_file}")
            grid = default_grid(registry.get_params(self.config['energy']['preset']))

        workers = args.workers if args.workers is not None else self.config_manager.worker_count(self.config)
        print(f"🔄 スイープ実行中... ({len(grid.validate())} 点 × {grid.replicates} 反復, workers={workers})")
        rows = run_sweep(grid, workers)
        write_sweep(rows, args.out, args.format)
        print(f"✅ スイープ結果を保存しました: {args.out}")

        matrix = spearman_matrix(rows)
        print("📊 スピアマン相関")
        for param, cells in matrix.items():
            text = ", ".join(f"{metric}={'-' if rho is None else f'{rho:+.3f}'}" for metric, rho in cells.items())
            print(f"   {param}: {text}")
        if args.spearman_out is not None:
            write_spearman(matrix, args.spearman_out)
            print(f"✅ 相関行列を保存しました: {args.spearman_out}")
        if args.heatmap_out is not None:
            x, y = _parse_axes(args.heatmap_axes)
            for path in write_heatmaps(rows, args.heatmap_out, x, y):
                print(f"✅ ヒートマップ表を保存しました: {path}")
        return EXIT_OK

    def cmd_roc(self, args) -> int:
        detector = self._detector(args)
        if isinstance(detector, ReplayModel):
            raise ConfigError("detector", "roc は replay 検出器に対応していません")
        rng = np.random.Generator(np.random.PCG64(args.seed))
        truth, scores = sample_labeled_scores(detector, args.samples, rng)
        result = roc_arrays(truth, scores)
        write_roc(result, args.out)
        print(f"📊 AUC: {result.auc:.4f}")
        print(f"✅ ROC曲線を保存しました: {args.out}")
        return EXIT_OK

    def cmd_energy(self, args) -> int:
        registry = self.registry
        detector = self._detector(args)
        if isinstance(detector, ReplayModel):
            raise ConfigError("detector", "energy は replay 検出器に対応していません")
        m_values = _parse_floats("m_values", args.m_values)
        names = [v.strip() for v in args.server_presets.split(",") if v.strip()]
        server_params = {name: registry.get_params(name) for name in names}
        baseline_params = registry.get_params(args.baseline_preset)
        e_edge = baseline_params.e_server if args.edge_energy is None else args.edge_energy
        offload = OffloadParams(e_edge=e_edge, offload_fraction=args.offload_fraction)
        gate_config = GateConfig(n=args.n, f_r=args.fr, f_min=args.fmin,
                                 period_mode=PeriodMode.parse(args.period_mode))
        template = StreamTemplate(n_foi=args.n_foi, mean_segment_len=args.segment_len, count_mode="fixed_foi")

        rows = energy_comparison(m_values, server_params, baseline_params, detector, Threshold(args.threshold),
                                 gate_config, template, base_seed=args.seed, offload=offload)
        print(f"📊 エネルギー比較（FOI {args.n_foi} フレーム固定, 従来: {args.baseline_preset}）")
        print("=" * 50)
        for row in rows:
            print(f"   M={row.m:g} {row.preset}: {row.e_total:.2f} J / 従来 {row.e_conventional:.2f} J"
                  f" ({row.ratio_conventional * 100:.1f}%)")
        write_energy_comparison(rows, args.out)
        print(f"✅ エネルギー比較を保存しました: {args.out}")
        return EXIT_OK

    def cmd_fpcheck(self, args) -> int:
        report = inject_fp_check(args.n_max, _parse_k_set(args.k_set), args.stream_len,
                                 period_mode=PeriodMode.parse(args.period_mode))
        print(f"📊 追加送信数の最大値: {report.max_extra}")
        if report.ok:
            print("✅ すべての組み合わせで 2N+1 以内です")
            return EXIT_OK
        for entry in report.violations:
            print(f"❌ N={entry.n} k={entry.k or '-'}: {entry.max_extra} > {entry.bound} (位置 {entry.worst_position})")
        return EXIT_BOUND_VIOLATED

    def cmd_config(self, args) -> int:
        if args.init:
            if self.config_manager.create_config_from_template():
                print(f"✅ テンプレートから設定ファイルを作成しました: {self.config_manager.config_file}")
                self.config = self.config_manager.load_config()
            else:
                print(f"⚠️ 設定ファイルを作成しませんでした: {self.config_manager.config_file}")
        print("🔍 設定確認")
        print("=" * 50)
        print(json.dumps(self.config, ensure_ascii=False, indent=2))
        print()
        print("🔒 環境変数の状態:")
        for name, value in self.config_manager.get_env_overrides().items():
            print(f"   {name}: {value}")
        if self.config_manager.validate_config(self.config):
            print("✅ 設定は有効です")
            return EXIT_OK
        print("❌ 設定に不備があります")
        return EXIT_CONFIG_ERROR

    def run(self, argv: Optional[List[str]] = None) -> int:
        args = self.build_parser().parse_args(argv)
        if args.command == "version":
            print(f"Near-Sensor Transmission Simulator {__version__}")
            return EXIT_OK

        setup_logging(self.config)
        handlers = {
            "simulate": self.cmd_simulate,
            "sweep": self.cmd_sweep,
            "roc": self.cmd_roc,
            "energy": self.cmd_energy,
            "fpcheck": self.cmd_fpcheck,
            "config": self.cmd_config,
        }
        try:
            return handlers[args.command](args)
        except TraceFormatError as e:
            logger.error("トレース読み込みエラー: %s", e)
            print(f"❌ トレースファイルが不正です: {e}")
            return EXIT_IO_ERROR
        except (ConfigError, DetectorError, MetricsError) as e:
            logger.error("設定エラー: %s", e)
            print(f"❌ 設定エラー: {e}")
            return EXIT_CONFIG_ERROR
        except OSError as e:
            logger.error("入出力エラー: %s", e)
            print(f"❌ 入出力エラー: {e}")
            return EXIT_IO_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    """メイン関数"""
    try:
        return SensingSimulator().run(argv)
    except KeyboardInterrupt:
        print("\n👋 中断しました")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
