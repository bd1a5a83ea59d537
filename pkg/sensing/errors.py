#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
例外定義モジュール
設定エラー・トレース形式エラーなどをまとめて管理
"""

from typing import Optional


class SensingError(Exception):
    """シミュレータ共通の基底例外"""


class ConfigError(SensingError, ValueError):
    """設定値が不正（どのフィールドかを保持）"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceFormatError(SensingError, ValueError):
    """トレースファイルの形式エラー（行番号付き）"""

    def __init__(self, line: int, message: str, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")


class DetectorError(SensingError):
    pass


class MetricsError(SensingError, ValueError):
    pass
