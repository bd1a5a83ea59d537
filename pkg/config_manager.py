#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
設定管理モジュール
設定ファイル → テンプレート → 既定値の順に読み込み、環境変数で上書き
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import psutil

logger = logging.getLogger(__name__)

# 環境変数 → (ドット区切りキー, 変換関数)
ENV_VARS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "SENSING_OUTPUT_DIR": ("output_dir", str),
    "SENSING_WORKERS": ("sweep.workers", int),
    "SENSING_LOG_LEVEL": ("logging.level", str.upper),
    "SENSING_ENERGY_PRESET": ("energy.preset", str),
    "SENSING_PRESETS_FILE": ("energy.presets_file", str),
}

# (ドット区切りキー, 許容する型)
REQUIRED_FIELDS = [
    ("simulation.frames", int),
    ("simulation.ratio_m", (int, float)),
    ("simulation.segment_len", int),
    ("simulation.fr", int),
    ("simulation.fmin", int),
    ("simulation.n", int),
    ("simulation.period_mode", str),
    ("simulation.threshold", (int, float)),
    ("simulation.seed", int),
    ("detector.kind", str),
    ("energy.preset", str),
    ("energy.presets_file", str),
    ("sweep.workers", int),
    ("sweep.default_grid", str),
    ("logging.level", str),
    ("logging.log_dir", str),
    ("output_dir", str),
]


def _deep_merge(base: Dict, override: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_json(path: Path) -> Optional[Dict]:
    """JSON を読む。存在しない・壊れている場合は None"""
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        logger.warning("⚠️ 設定ファイル読み込みエラー (%s): %s", path, e)
        return None


def _set_dotted(config: Dict, dotted: str, value):
    *parents, leaf = dotted.split(".")
    node = config
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


class ConfigManager:
    def __init__(self, config_dir: Path = Path("data"), template_file: Path = Path("config_template.json")):
        self.config_dir = Path(config_dir)
        self.config_dir.mkdir(parents=True, exist_ok=True)
        self.config_file = self.config_dir / "sim_config.json"
        self.template_file = Path(template_file)

    def load_config(self) -> Dict:
        """設定を読み込み（環境変数を優先）"""
        loaded = _read_json(self.config_file)
        if loaded is None:
            loaded = _read_json(self.template_file) or {}
        return self._override_with_env_vars(_deep_merge(self._get_default_config(), loaded))

    def _override_with_env_vars(self, config: Dict) -> Dict:
        for name, (dotted, convert) in ENV_VARS.items():
            raw = os.getenv(name)
            if not raw:
                continue
            try:
                _set_dotted(config, dotted, convert(raw))
            except ValueError:
                logger.warning("⚠️ %s を解釈できないため無視します: %s", name, raw)
        return config

    def _get_default_config(self) -> Dict:
        """デフォルト設定を取得"""
        return {
            'name': 'Near-Sensor Transmission Simulator',
            'version': '1.0.0',
            'output_dir': 'data/results',
            'simulation': {
                'frames': 10000,
                'ratio_m': 20.0,
                'segment_len': 20,
                'fr': 30,
                'fmin': 0,
                'n': 4,
                'period_mode': 'faithful',
                'threshold': 0.5,
                'seed': 0
            },
            'detector': {
                'kind': 'calibrated',
                'mu_bg': -1.0,
                'sigma_bg': 1.0,
                'mu_foi': 1.0,
                'sigma_foi': 1.0,
                'tpr': 0.95,
                'fpr': 0.05
            },
            'energy': {
                'preset': 'server_dominated',
                'presets_file': 'data/energy_presets.json'
            },
            'sweep': {
                'workers': 0,
                'default_grid': 'data/default_grid.json'
            },
            'logging': {
                'level': 'INFO',
                'log_dir': 'data/logs',
                'file': 'sensing.log'
            }
        }

    def save_config(self, config: Dict):
        """設定を sim_config.json に保存"""
        self.config_file.write_text(json.dumps(config, ensure_ascii=False, indent=2), encoding="utf-8")
        logger.info("設定を保存: %s", self.config_file)

    def create_config_from_template(self) -> bool:
        """sim_config.json が無ければテンプレートから作成（作成したら True）"""
        if self.config_file.exists():
            logger.info("設定ファイルは既に存在: %s", self.config_file)
            return False
        template = _read_json(self.template_file)
        if template is None:
            logger.warning("⚠️ テンプレートが読めません: %s", self.template_file)
            return False
        self.save_config(template)
        return True

    def get_env_overrides(self) -> Dict[str, str]:
        """環境変数による上書きの状態"""
        return {name: os.getenv(name, 'NOT_SET') for name in ENV_VARS}

    def validate_config(self, config: Dict) -> bool:
        """設定の妥当性をチェック"""
        for field, expected in REQUIRED_FIELDS:
            value = config
            for key in field.split('.'):
                if not isinstance(value, dict) or key not in value:
                    logger.error("❌ 必須設定が不足: %s", field)
                    return False
                value = value[key]

            # bool は int のサブクラスなので除外
            if isinstance(value, bool) or not isinstance(value, expected):
                logger.error("❌ 設定の型が不正です: %s = %r", field, value)
                return False

        return True

    def worker_count(self, config: Dict) -> int:
        """スイープの並列数（0 なら物理コア数）"""
        workers = config.get('sweep', {}).get('workers', 0)
        if workers and workers > 0:
            return int(workers)
        cores = psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True) or 1
        return max(1, int(cores))


def setup_logging(config: Dict, log_dir: Optional[Path] = None) -> Path:
    """ファイル（UTF-8）とコンソール（WARNING 以上）にログを出力"""
    log_config = config.get('logging', {})
    log_dir = Path(log_dir or log_config.get('log_dir', 'data/logs'))
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / log_config.get('file', 'sensing.log')

    level = getattr(logging, str(log_config.get('level', 'INFO')).upper(), logging.INFO)
    console = logging.StreamHandler()
    console.setLevel(logging.WARNING)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.FileHandler(log_file, encoding='utf-8'), console],
        force=True,
    )
    return log_file
