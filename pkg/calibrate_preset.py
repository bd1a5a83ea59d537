#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
エネルギープリセット校正スクリプト
従来システム1フレームあたりのコスト内訳（サーバー推論が支配的）から
server_dominated プリセットの定数を導出して data/energy_presets.json に書き込みます
"""

import argparse
import sys
from pathlib import Path

from sensing.energy import EnergyParams, conventional_baseline
from sensing.preset_registry import (
    DEFAULT_PRESET, SERVER_MODEL_SCALES, PresetRegistry, derive_server_dominated, derive_server_model,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="server_dominated プリセットの校正")
    parser.add_argument("--presets-file", type=Path, default=Path("data/energy_presets.json"))
    parser.add_argument("--server-share", type=float, default=0.95)
    parser.add_argument("--tx-share", type=float, default=0.03)
    parser.add_argument("--near-share", type=float, default=0.01)
    parser.add_argument("--low-res-ratio", type=float, default=0.1)
    args = parser.parse_args(argv)

    print("🔧 server_dominated プリセットを校正中...")
    preset = derive_server_dominated(
        server_share=args.server_share,
        tx_share=args.tx_share,
        near_share=args.near_share,
        low_res_ratio=args.low_res_ratio,
    )
    params = EnergyParams.from_dict(preset)
    per_frame = conventional_baseline(1, params)
    shares = per_frame.shares()
    print(f"   従来システム: {per_frame.e_total:.4f} J/frame")
    print(f"   内訳: サーバー {shares['server']:.1%} / 送信 {shares['tx']:.1%} / センサー {shares['sensor']:.1%}")

    registry = PresetRegistry(args.presets_file)
    registry.update_preset(DEFAULT_PRESET, preset)
    for name, scale in SERVER_MODEL_SCALES.items():
        registry.update_preset(name, derive_server_model(preset, scale))
    print(f"✅ プリセットを保存しました: {args.presets_file}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
