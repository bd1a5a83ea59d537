import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from experiment_controller import (
    ENERGY_CSV_HEADER, SWEEP_CSV_HEADER, FpCheckEntry, GridPoint, StreamTemplate, SweepGrid, SweepRow, aggregate,
    default_grid, derive_seed, energy_comparison, extra_transmissions, heatmap_table, inject_fp_check, run_sweep,
    simulate, spearman_matrix, sweep_csv_text, write_energy_comparison, write_heatmap, write_heatmaps, write_spearman,
    write_sweep, _RunOutcome,
)
from sensing.detector import CalibratedModel, IdealModel, ReplayModel
from sensing.energy import OffloadParams
from sensing.errors import ConfigError
from sensing.gate import GateConfig, PeriodMode, run_columns
from sensing.preset_registry import PresetRegistry
from sensing.stream import FrameStream, StreamSpec

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def small_grid(energy, **overrides):
    values = dict(
        t_values=(0.5,),
        m_values=(5.0,),
        fmin_values=(0.0,),
        n_values=(2,),
        detector=IdealModel(),
        energy=energy,
        replicates=1,
        base_seed=3,
        f_r=60,
        template=StreamTemplate(n_foi=100, mean_segment_len=10),
    )
    values.update(overrides)
    return SweepGrid(**values)


# ------ simulate ------

@pytest.mark.parametrize("n", [1, 2, 4, 8])
@pytest.mark.parametrize("f_min", [0, 15, 30])
def test_ideal_detector_never_misses(server_dominated, n, f_min):
    spec = StreamSpec(n_frames=5000, ratio_m=10.0, mean_segment_len=8, seed=n * 100 + f_min)
    for mode in PeriodMode:
        result = simulate(spec, IdealModel(), 0.5, GateConfig(n=n, f_r=60, f_min=f_min, period_mode=mode),
                          server_dominated, seed=1)
        assert result.metrics.p_miss == 0.0


def test_bypass_matches_conventional_system(server_dominated):
    spec = StreamSpec(n_frames=3000, ratio_m=20.0, mean_segment_len=10, seed=5)
    result = simulate(spec, CalibratedModel.from_auc(0.8), 0.9, GateConfig(n=1, bypass=True), server_dominated, seed=5)
    assert (result.metrics.p_miss, result.metrics.p_trans) == (0.0, 1.0)
    assert result.energy.e_tx_total == result.baseline.e_tx_total
    assert result.energy.storage_bytes == result.baseline.storage_bytes


def test_simulate_is_deterministic(server_dominated):
    spec = StreamSpec(n_frames=4000, ratio_m=5.0, mean_segment_len=6, seed=8)
    config = GateConfig(n=4, f_r=30, f_min=10)
    a = simulate(spec, CalibratedModel(), 0.6, config, server_dominated, seed=21, emit_log=True)
    b = simulate(spec, CalibratedModel(), 0.6, config, server_dominated, seed=21, emit_log=True)
    assert a == b
    assert len(a.decision_log) == 4000
    assert simulate(spec, CalibratedModel(), 0.6, config, server_dominated, seed=21).decision_log is None


def test_decision_log_agrees_with_metrics(server_dominated):
    spec = StreamSpec(n_frames=1000, ratio_m=3.0, mean_segment_len=5, seed=2)
    result = simulate(spec, CalibratedModel(), 0.5, GateConfig(n=2, f_r=30, f_min=15), server_dominated, seed=4,
                      emit_log=True)
    assert sum(row.decision.value for row in result.decision_log) == result.metrics.n_trans


def test_m50_transmission_reduction(server_dominated):
    p_trans = []
    for seed in range(20):
        spec = StreamSpec(n_frames=100000, ratio_m=50.0, mean_segment_len=50, seed=seed)
        result = simulate(spec, IdealModel(), 0.5, GateConfig(n=2, f_r=30, f_min=0), server_dominated, seed=seed)
        p_trans.append(result.metrics.p_trans)
    assert np.mean(p_trans) <= 0.04


def test_gated_energy_ratio_regime(server_dominated):
    # logit(T) ≈ 1.33 で FOI の検出率が約 75%、遅延停止で見逃しは数%に収まる
    spec = StreamSpec(n_frames=21336, ratio_m=20.0, mean_segment_len=20, seed=2024)
    detector = CalibratedModel(mu_bg=-2.0, sigma_bg=1.0, mu_foi=2.0, sigma_foi=1.0)
    result = simulate(spec, detector, 0.79, GateConfig(n=2, f_r=30, f_min=0), server_dominated, seed=7)
    assert server_dominated.e_near / (result.baseline.e_total / 21336) <= 0.05
    assert result.energy.e_total <= 0.16 * result.baseline.e_total
    assert abs(result.metrics.p_miss - 0.03) < 0.01
    print(f"p_miss={result.metrics.p_miss:.4f} savings={result.savings:.3f}")


def test_million_frame_simulation_runs(server_dominated):
    spec = StreamSpec(n_frames=1000000, ratio_m=20.0, mean_segment_len=20, seed=1)
    start = time.perf_counter()
    result = simulate(spec, CalibratedModel.from_auc(0.95), 0.5, GateConfig(n=4, f_r=30, f_min=5), server_dominated, 1)
    elapsed = time.perf_counter() - start
    assert result.metrics.n_frames == 1000000
    assert elapsed < 5.0


def test_simulate_replays_given_frames(server_dominated):
    frames = FrameStream(np.array([False, True, True, False]), np.array([0.1, 0.9, 0.2, 0.05]))
    spec = StreamSpec(n_frames=4, ratio_m=1.0, mean_segment_len=1)
    result = simulate(spec, ReplayModel(), 0.5, GateConfig(n=1), server_dominated, seed=0, frames=frames)
    assert result.metrics.n_frames == 4
    assert result.metrics.p_miss == 0.0
    assert result.metrics.n_trans == 3


def test_simulate_uses_separate_baseline_params(server_dominated):
    heavy = replace(server_dominated, e_server=server_dominated.e_server * 2.4)
    spec = StreamSpec(n_frames=2000, ratio_m=10.0, mean_segment_len=10, seed=6)
    same = simulate(spec, IdealModel(), 0.5, GateConfig(n=2), heavy, seed=6)
    split = simulate(spec, IdealModel(), 0.5, GateConfig(n=2), heavy, seed=6, baseline_params=server_dominated)
    assert split.energy == same.energy
    assert split.baseline.e_total == pytest.approx(2000 * 1.0)
    assert same.baseline.e_total > split.baseline.e_total


# ------ energy comparison ------

@pytest.fixture
def server_models(tmp_path):
    return PresetRegistry(tmp_path / "presets.json").server_model_presets()


def comparison(server_models, m_values, offload=None):
    detector = CalibratedModel(mu_bg=-2.0, sigma_bg=1.0, mu_foi=2.0, sigma_foi=1.0)
    template = StreamTemplate(n_foi=1016, mean_segment_len=20, count_mode="fixed_foi")
    return energy_comparison(
        m_values, server_models, server_models["server_light"], detector, 0.79,
        GateConfig(n=2, f_r=30, f_min=0), template, base_seed=2024, offload=offload,
    )


def test_server_models_against_light_conventional_system(server_models):
    rows = comparison(server_models, [20.0])
    assert [r.preset for r in rows] == ["server_light", "server_medium", "server_heavy"]
    ratios = {r.preset: r.ratio_conventional for r in rows}
    assert ratios["server_light"] < 0.10
    assert all(ratio < 0.16 for ratio in ratios.values())
    assert ratios["server_light"] < ratios["server_medium"] < ratios["server_heavy"]
    assert {r.n_frames for r in rows} == {1016 * 21}
    assert len({r.p_trans for r in rows}) == 1


def test_energy_grows_slowly_with_background(server_models):
    rows = [r for r in comparison(server_models, [1.0, 20.0, 50.0]) if r.preset == "server_light"]
    assert [r.m for r in rows] == [1.0, 20.0, 50.0]
    conventional = [r.e_conventional for r in rows]
    gated = [r.e_total for r in rows]
    assert conventional == sorted(conventional)
    assert gated[-1] - gated[0] < 0.1 * (conventional[-1] - conventional[0])


def test_energy_comparison_with_edge_offloading(server_models, tmp_path):
    light = server_models["server_light"]
    rows = comparison(server_models, [20.0], offload=OffloadParams(e_edge=light.e_server))
    for r in rows:
        assert r.e_offload == pytest.approx(r.n_frames * (light.e_cam_high + light.e_server))
        assert r.ratio_offload == pytest.approx(r.e_total / r.e_offload)
    lines = write_energy_comparison(rows, tmp_path / "energy.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(ENERGY_CSV_HEADER)
    assert len(lines) == 4
    assert comparison(server_models, [20.0])[0].ratio_offload is None


def test_energy_comparison_requires_values(server_models):
    with pytest.raises(ConfigError) as excinfo:
        comparison(server_models, [])
    assert excinfo.value.field == "m_values"
    with pytest.raises(ConfigError) as excinfo:
        comparison({}, [20.0])
    assert excinfo.value.field == "server_presets"


# ------ seeds / grid ------

def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 0.5, 20.0, 0, 2, 0) == derive_seed(0, 0.5, 20.0, 0, 2, 0)
    assert derive_seed(0, 0.5, 20.0, 0, 2, 0) != derive_seed(0, 0.5, 20.0, 0, 2, 1)
    assert derive_seed(1, "stream") != derive_seed(1, "detector")
    assert 0 <= derive_seed(2 ** 64 - 1, "x") < 2 ** 64


def test_stream_template_count_modes():
    fixed_foi = StreamTemplate(n_foi=200, count_mode="fixed_foi")
    assert fixed_foi.spec_for(20.0, 1).n_frames == 4200
    fixed_total = StreamTemplate(n_frames=3000, count_mode="fixed_total")
    assert fixed_total.spec_for(50.0, 1).n_frames == 3000
    with pytest.raises(ConfigError):
        StreamTemplate(count_mode="random")


def test_grid_points_are_lexicographic(server_dominated):
    grid = small_grid(server_dominated, t_values=(0.2, 0.8), m_values=(1.0, 5.0), fmin_values=(0.0, 0.25), n_values=(1, 4))
    points = grid.points()
    assert len(points) == 16
    assert points[0] == GridPoint(0.2, 1.0, 0, 1)
    assert points[1] == GridPoint(0.2, 1.0, 0, 4)
    assert points[2] == GridPoint(0.2, 1.0, 15, 1)
    assert points == sorted(points)


@pytest.mark.parametrize("overrides,field", [
    ({"fmin_values": (0.0, 1.0)}, "f_min"),
    ({"fmin_values": (0.33,)}, "fmin_values"),
    ({"t_values": (0.5, 1.2)}, "threshold"),
    ({"n_values": (2, 0)}, "n"),
    ({"replicates": 0}, "replicates"),
    ({"m_values": ()}, "m_values"),
])
def test_invalid_grid_fails_before_running(tmp_path, server_dominated, overrides, field):
    grid = small_grid(server_dominated, **overrides)
    out = tmp_path / "sweep.csv"
    with pytest.raises(ConfigError) as excinfo:
        write_sweep(run_sweep(grid), out)
    assert excinfo.value.field == field
    assert not out.exists()


def test_grid_from_dict(tmp_path):
    registry = PresetRegistry(tmp_path / "presets.json")
    with open(DATA_DIR / "default_grid.json", encoding="utf-8") as f:
        data = json.load(f)
    grid = SweepGrid.from_dict(data, registry)
    assert len(grid.validate()) == 9 * 5 * 3 * 4
    assert grid.template.n_foi == 200
    assert grid.detector.expected_auc() == pytest.approx(0.95)
    assert grid.energy == registry.get_params("server_dominated")

    with pytest.raises(ConfigError):
        SweepGrid.from_dict({"t_values": [0.5]}, registry)
    with pytest.raises(ConfigError):
        SweepGrid.from_dict(dict(data, energy={"preset": "nope"}), registry)


def test_default_grid_matches_documented_values(server_dominated):
    grid = default_grid(server_dominated)
    assert grid.t_values == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    assert sorted({p.f_min for p in grid.validate()}) == [0, 15, 30]


# ------ sweep ------

def test_degenerate_grid_equals_simulate(server_dominated):
    grid = small_grid(server_dominated, detector=CalibratedModel.from_auc(0.9))
    rows = run_sweep(grid)
    assert len(rows) == 1
    run_seed = derive_seed(3, 0.5, 5.0, 0, 2, 0)
    spec = grid.template.spec_for(5.0, derive_seed(run_seed, "stream"))
    result = simulate(spec, grid.detector, 0.5, GateConfig(n=2, f_r=60, f_min=0), server_dominated,
                      derive_seed(run_seed, "detector"))
    row = rows[0]
    assert row.p_miss_mean == result.metrics.p_miss
    assert row.p_trans_mean == result.metrics.p_trans
    assert row.savings_mean == result.savings
    assert (row.p_miss_std, row.p_trans_std, row.replicates) == (0.0, 0.0, 1)


def test_p_trans_decreases_with_m(server_dominated):
    grid = small_grid(server_dominated, m_values=(1.0, 20.0, 50.0), replicates=3,
                      template=StreamTemplate(n_foi=1000, mean_segment_len=20))
    rows = run_sweep(grid)
    p_trans = [row.p_trans_mean for row in rows]
    assert p_trans[0] > p_trans[1] > p_trans[2]


def test_replicate_order_does_not_change_rows():
    point = GridPoint(0.5, 5.0, 0, 2)
    outcomes = [_RunOutcome(0, rep, 0.1 * rep, 0.3 + 0.01 * rep, 0.5 - 0.02 * rep) for rep in range(5)]
    forward = aggregate(point, outcomes)
    assert aggregate(point, list(reversed(outcomes))) == forward
    assert forward.p_trans_std == pytest.approx(np.std([o.p_trans for o in outcomes], ddof=1))


def test_aggregate_skips_absent_miss_rate():
    point = GridPoint(0.5, 5.0, 0, 2)
    row = aggregate(point, [_RunOutcome(0, 0, None, 0.2, 0.7), _RunOutcome(0, 1, 0.1, 0.4, 0.5)])
    assert row.p_miss_mean == 0.1
    assert row.p_miss_std == 0.0
    assert row.replicates == 2
    assert aggregate(point, [_RunOutcome(0, 0, None, 0.2, 0.7)]).p_miss_mean is None


def test_parallel_sweep_is_byte_identical(tmp_path, server_dominated):
    grid = small_grid(server_dominated, detector=CalibratedModel.from_auc(0.9), t_values=(0.3, 0.7),
                      m_values=(2.0, 10.0), fmin_values=(0.0, 0.5), n_values=(1, 4), replicates=2)
    serial = write_sweep(run_sweep(grid, workers=1), tmp_path / "serial.csv")
    parallel = write_sweep(run_sweep(grid, workers=3), tmp_path / "parallel.csv")
    assert serial.read_bytes() == parallel.read_bytes()


def test_write_sweep_formats(tmp_path):
    rows = [
        SweepRow(0.5, 20.0, 15, 2, None, None, 0.25, 0.01, 0.7, 3),
        SweepRow(0.9, 20.0, 0, 4, 0.125, 0.0, 0.05, 0.0, 0.9, 1),
    ]
    text = write_sweep(rows, tmp_path / "out" / "s.csv").read_text(encoding="utf-8")
    lines = text.splitlines()
    assert lines[0] == ",".join(SWEEP_CSV_HEADER)
    assert lines[0] == "t,m,fmin,n,p_miss_mean,p_miss_std,p_trans_mean,p_trans_std,savings_mean,replicates"
    assert lines[1] == "0.5,20.0,15,2,,,0.25,0.01,0.7,3"
    assert text == sweep_csv_text(rows)
    assert not (tmp_path / "out" / "s.csv.tmp").exists()

    data = json.loads(write_sweep(rows, tmp_path / "s.json", fmt="json").read_text(encoding="utf-8"))
    assert data[1]["p_miss_mean"] == 0.125
    assert data[0]["p_miss_mean"] is None
    with pytest.raises(ConfigError):
        write_sweep(rows, tmp_path / "s.xml", fmt="xml")


# ------ spearman matrix ------

def row(t, m, f_min, n, p_miss, p_trans):
    return SweepRow(t, m, f_min, n, p_miss, 0.0, p_trans, 0.0, 0.0, 1)


def test_spearman_matrix_two_rows():
    rows = [row(0.2, 1.0, 0, 1, 0.1, 0.9), row(0.8, 5.0, 30, 8, 0.3, 0.2)]
    matrix = spearman_matrix(rows)
    assert matrix["t"] == {"p_miss": 1.0, "p_trans": -1.0}
    assert matrix["f_min"]["p_trans"] == -1.0


def test_spearman_matrix_constant_column_is_absent():
    rows = [row(0.2, 1.0, 0, 2, 0.1, 0.3), row(0.5, 1.0, 15, 2, 0.2, 0.5), row(0.8, 1.0, 30, 2, 0.4, 0.6)]
    matrix = spearman_matrix(rows)
    assert matrix["m"]["p_trans"] is None
    assert matrix["n"]["p_miss"] is None
    assert matrix["f_min"]["p_trans"] == pytest.approx(1.0)


def test_spearman_matrix_ignores_rows_without_miss_rate():
    rows = [row(0.2, 1.0, 0, 1, None, 0.9), row(0.5, 2.0, 15, 2, 0.2, 0.5), row(0.8, 3.0, 30, 4, 0.4, 0.2)]
    matrix = spearman_matrix(rows)
    assert matrix["t"]["p_miss"] == pytest.approx(1.0)
    assert matrix["t"]["p_trans"] == pytest.approx(-1.0)


def test_write_spearman(tmp_path):
    matrix = {"t": {"p_miss": 0.5, "p_trans": None}}
    lines = write_spearman(matrix, tmp_path / "rho.csv").read_text(encoding="utf-8").splitlines()
    assert lines == ["parameter,metric,rho", "t,p_miss,0.5", "t,p_trans,"]


def test_heatmap_table_averages_other_parameters():
    rows = [row(0.2, 1.0, 0, 1, 0.1, 0.5), row(0.2, 1.0, 0, 4, 0.3, 0.7), row(0.8, 1.0, 0, 1, None, 0.1)]
    assert heatmap_table(rows, "p_trans") == [(0.2, 1.0, pytest.approx(0.6)), (0.8, 1.0, 0.1)]
    assert heatmap_table(rows, "p_miss", x="n", y="t") == [(1, 0.2, 0.1), (4, 0.2, 0.3)]


def test_heatmap_table_rejects_bad_metric_and_axes():
    rows = [row(0.2, 1.0, 0, 1, 0.1, 0.5)]
    with pytest.raises(ConfigError) as excinfo:
        heatmap_table(rows, "e_total")
    assert excinfo.value.field == "metric"
    for x, y in (("t", "t"), ("t", "speed")):
        with pytest.raises(ConfigError) as excinfo:
            heatmap_table(rows, "p_trans", x=x, y=y)
        assert excinfo.value.field == "heatmap_axes"


def test_write_heatmap_is_long_form(tmp_path):
    rows = [row(0.2, 1.0, 0, 1, 0.1, 0.5), row(0.2, 5.0, 0, 1, 0.2, 0.25), row(0.8, 1.0, 0, 1, None, 0.1)]
    path = write_heatmap(rows, "p_miss", tmp_path / "heat" / "p_miss.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["t,m,p_miss_mean", "0.2,1.0,0.1", "0.2,5.0,0.2"]
    assert not path.with_name("p_miss.csv.tmp").exists()


def test_write_heatmaps_one_file_per_metric(tmp_path):
    rows = [row(0.2, 1.0, 0, 1, 0.1, 0.5), row(0.8, 1.0, 15, 4, 0.3, 0.2)]
    paths = write_heatmaps(rows, tmp_path, x="f_min", y="n")
    assert [p.name for p in paths] == [
        "heatmap_p_miss_f_min_n.csv", "heatmap_p_trans_f_min_n.csv", "heatmap_savings_f_min_n.csv",
    ]
    assert paths[1].read_text(encoding="utf-8").splitlines()[1:] == ["0,1,0.5", "15,4,0.2"]


def test_default_sweep_sign_pattern(server_dominated):
    grid = default_grid(server_dominated, replicates=1)
    rows = run_sweep(grid)
    assert len(rows) == 540
    matrix = spearman_matrix(rows)
    assert matrix["t"]["p_miss"] > 0
    assert matrix["t"]["p_trans"] < 0
    assert matrix["f_min"]["p_miss"] < 0
    assert matrix["f_min"]["p_trans"] > 0
    assert matrix["n"]["p_miss"] < 0


# ------ false positive injection ------

def brute_force_extra(config, length, position):
    base, _ = run_columns([0] * length, config)
    ys = [0] * length
    ys[position] = 1
    injected, _ = run_columns(ys, config)
    return int(injected.sum()) - int(base.sum())


@pytest.mark.parametrize("mode", list(PeriodMode))
@pytest.mark.parametrize("n,f_min", [(1, 0), (3, 0), (3, 15), (5, 10), (7, 6)])
def test_prefix_sum_matches_brute_force(n, f_min, mode):
    config = GateConfig(n=n, f_r=30, f_min=f_min, period_mode=mode)
    extras = extra_transmissions(config, 90)
    assert extras.tolist() == [brute_force_extra(config, 90, p) for p in range(90)]


@pytest.mark.parametrize("n", [1, 2, 5, 16])
def test_disabled_periodic_extra_is_n_plus_one(n):
    config = GateConfig(n=n)
    extras = extra_transmissions(config, 200)
    assert extras[n:200 - n - 1].tolist() == [n + 1] * (200 - 2 * n - 1)
    assert all(extras[p] == p + 1 <= n for p in range(n))


def test_injection_positions_subset():
    config = GateConfig(n=4, f_r=30, f_min=10)
    full = extra_transmissions(config, 500)
    assert extra_transmissions(config, 500, [3, 250, 499]).tolist() == full[[3, 250, 499]].tolist()
    with pytest.raises(ConfigError):
        extra_transmissions(config, 500, [500])


def test_false_positive_cost_bound():
    report = inject_fp_check(16, list(range(2, 9)), 10000)
    assert len(report.entries) == 16 * 7
    assert report.ok
    assert report.max_extra <= 33
    for entry in report.entries:
        assert entry.max_extra <= 2 * entry.n + 1
    print(f"max extra transmissions: {report.max_extra}")


def test_false_positive_bound_with_disabled_periodic_and_strict_mode():
    report = inject_fp_check(8, [None, 1, 3], 2000, period_mode=PeriodMode.STRICT_PERIOD)
    assert report.ok
    assert report.entries[0].k is None


def test_fp_report_flags_violations():
    entry = FpCheckEntry(n=1, k=2, worst_position=10, max_extra=4)
    assert entry.bound == 3
    assert not entry.ok
