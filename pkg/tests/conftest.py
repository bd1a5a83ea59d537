import pytest

from sensing.energy import EnergyParams
from sensing.preset_registry import PresetRegistry


@pytest.fixture
def server_dominated(tmp_path) -> EnergyParams:
    """既定の server_dominated プリセット（一時ディレクトリに書き出したもの）"""
    return PresetRegistry(tmp_path / "energy_presets.json").get_params("server_dominated")


@pytest.fixture
def hand_params() -> EnergyParams:
    return EnergyParams(e_cam_low=1.0, e_cam_high=5.0, e_near=0.5, e_tx=2.0, e_server=10.0, bytes_per_frame=100)
