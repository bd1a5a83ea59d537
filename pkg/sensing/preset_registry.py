import json
import logging
from pathlib import Path
from typing import Dict, Optional

from sensing.energy import EnergyParams
from sensing.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "server_dominated"
# サーバーモデルの相対推論コスト（軽量モデル = 1、校正値）
SERVER_MODEL_SCALES = {"server_light": 1.0, "server_medium": 1.5, "server_heavy": 2.4}
# 1080p RGB 非圧縮フレーム
FRAME_BYTES_1080P = 1920 * 1080 * 3


def derive_server_dominated(
    conventional_per_frame: float = 1.0,
    server_share: float = 0.95,
    tx_share: float = 0.03,
    near_share: float = 0.01,
    low_res_ratio: float = 0.1,
    bytes_per_frame: int = FRAME_BYTES_1080P,
) -> Dict:
    """
    従来システムの1フレームあたりコストに対する割合から定数を導出（実測値ではなく校正値）

    server_share, tx_share: 従来システムの内訳（残りが高解像度カメラ）
    near_share: 近センサーモデル1回の推論コスト（従来システム1フレーム比）
    low_res_ratio: 低解像度カメラ / 高解像度カメラ
    """
    cam_share = 1.0 - server_share - tx_share
    if min(server_share, tx_share, near_share, low_res_ratio) < 0 or cam_share < 0:
        raise ConfigError("shares", "割合は非負で、server_share + tx_share は 1 以下である必要があります")
    if low_res_ratio > 1:
        raise ConfigError("low_res_ratio", "低解像度カメラは高解像度カメラ以下のコストである必要があります")

    e_cam_high = cam_share * conventional_per_frame
    return {
        "description": "サーバー推論が支配的な構成（校正値・実測ではない）",
        "calibrated": True,
        "e_cam_low": e_cam_high * low_res_ratio,
        "e_cam_high": e_cam_high,
        "e_near": near_share * conventional_per_frame,
        "e_tx": tx_share * conventional_per_frame,
        "e_server": server_share * conventional_per_frame,
        "bytes_per_frame": bytes_per_frame,
    }


def derive_server_model(base: Dict, scale: float) -> Dict:
    """base のサーバー推論コストだけを scale 倍したプリセット"""
    if scale <= 0:
        raise ConfigError("scale", f"正の値が必要です（値: {scale!r}）")
    entry = dict(base)
    entry["e_server"] = base["e_server"] * scale
    entry["description"] = f"サーバーモデルの推論コスト {scale:g} 倍"
    return entry


class PresetRegistry:
    def __init__(self, presets_file: Path):
        self.presets_file = Path(presets_file)
        self.presets = self._load_presets()

    def _load_presets(self) -> Dict[str, Dict]:
        if self.presets_file.exists():
            try:
                with open(self.presets_file, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except Exception as e:
                logger.warning("⚠️ プリセットファイルの読み込みエラー: %s", e)
        return self._get_default_presets()

    def _get_default_presets(self) -> Dict[str, Dict]:
        server_dominated = derive_server_dominated()
        single = dict(server_dominated)
        single["description"] = "高解像度カメラのみ（デュアルカメラなし）"
        single["e_cam_low"] = single["e_cam_high"]
        defaults = {
            DEFAULT_PRESET: server_dominated,
            "single_camera": single,
        }
        for name, scale in SERVER_MODEL_SCALES.items():
            defaults[name] = derive_server_model(server_dominated, scale)
        self.presets = defaults
        self._save_presets()
        return defaults

    def _save_presets(self):
        try:
            self.presets_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.presets_file, 'w', encoding='utf-8') as f:
                json.dump(self.presets, f, ensure_ascii=False, indent=2)
        except Exception as e:
            logger.warning("⚠️ プリセットファイルの保存エラー: %s", e)

    def get_all_presets(self) -> Dict[str, Dict]:
        return self.presets

    def get_preset(self, name: str) -> Optional[Dict]:
        return self.presets.get(name)

    def get_params(self, name: str) -> EnergyParams:
        preset = self.get_preset(name)
        if preset is None:
            raise ConfigError("energy.preset", f"プリセット {name!r} が見つかりません（{', '.join(self.presets)}）")
        return EnergyParams.from_dict(preset)

    def server_model_presets(self) -> Dict[str, EnergyParams]:
        """登録済みのサーバーモデル別プリセット（軽い順）"""
        return {name: self.get_params(name) for name in SERVER_MODEL_SCALES if name in self.presets}

    def update_preset(self, name: str, entry: Dict):
        """既存のプリセットを上書きして保存"""
        self.presets[name] = entry
        self._save_presets()

    def register_preset(self, name: str, params: EnergyParams, description: str = "") -> bool:
        if name in self.presets:
            return False
        entry = params.to_dict()
        entry["description"] = description
        entry["calibrated"] = False
        self.presets[name] = entry
        self._save_presets()
        return True
