"""
近センサー選択送信シミュレータ
ストリーム生成・検出器・送信ゲート・エネルギー計算・評価指標
"""

__version__ = "1.0.0"
