# tests/test_pipeline.py
import numpy as np
import pytest

from adaptrack.config import ScenarioConfig
from adaptrack.diffcore import GradCheckError
from adaptrack.formats import FormatError, write_mot
from adaptrack.model import TrackingModel
from adaptrack.pipeline import (
    GRADCHECK_NAMES,
    analyze_scenario,
    benchmark_config,
    benchmark_scenarios,
    evaluate_files,
    gradcheck_suite,
    load_scenarios,
    oracle_frames,
    run_variant,
    scenario_dirs,
    simulate_to_dir,
    track_scenario,
    train_from_dirs,
)


def scenario_cfg(**overrides) -> ScenarioConfig:
    values = dict(n_objects=3, n_frames=12, depth_grid=8, appearance_dim=4, noise_dim=2, seed=5)
    values.update(overrides)
    return ScenarioConfig(**values)


class TestSimulate:
    def test_single_sequence(self, tmp_path):
        paths = simulate_to_dir(scenario_cfg(), tmp_path)
        assert paths == [tmp_path]
        assert (tmp_path / "scenario.json").exists()
        assert len(list((tmp_path / "depth").glob("*.dgrid"))) == 12

    def test_multiple_sequences(self, tmp_path):
        paths = simulate_to_dir(scenario_cfg(), tmp_path, sequences=3)
        assert [p.name for p in paths] == ["seq01", "seq02", "seq03"]
        scenarios = load_scenarios([tmp_path])
        assert [s.config.seed for s in scenarios] == [5, 6, 7]

    def test_scenario_dirs_missing(self, tmp_path):
        with pytest.raises(FormatError) as exc_info:
            scenario_dirs([tmp_path])
        assert "scenario.json" in str(exc_info.value)


class TestTrackAndEvaluate:
    def test_oracle_frames(self, tiny_scenario):
        frames = oracle_frames(tiny_scenario)
        assert len(frames) == tiny_scenario.n_frames
        assert np.allclose(frames[0].embeddings.sum(axis=1), 1.0)

    def test_oracle_round_trip_through_files(self, tiny_config, tiny_scenario, tmp_path):
        write_mot(tmp_path / "gt.txt", tiny_scenario.gt_records())
        write_mot(tmp_path / "pred.txt", track_scenario(tiny_scenario, None, tiny_config))
        result = evaluate_files([(tmp_path / "gt.txt", tmp_path / "pred.txt")])
        assert result.HOTA == pytest.approx(100.0)
        assert result.IDSW == 0

    def test_model_tracking(self, tiny_config, tiny_scenario):
        records = track_scenario(tiny_scenario, TrackingModel(tiny_config), tiny_config)
        assert records
        assert all(r.id >= 1 for r in records)


class TestTrainFromDirs:
    def test_writes_checkpoint_and_curves(self, tiny_config, tmp_path):
        simulate_to_dir(tiny_config.scenario, tmp_path / "data")
        result = train_from_dirs(tiny_config, [tmp_path / "data"], tmp_path / "model.npz", tmp_path / "loss.csv")
        assert (tmp_path / "model.npz").exists()
        lines = (tmp_path / "loss.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "epoch,det,id,depth,ia,total"
        assert len(lines) == 1 + len(result.history)


class TestAnalyze:
    def test_outputs(self, tiny_config, tiny_scenario, tmp_path):
        result = analyze_scenario(TrackingModel(tiny_config), tiny_scenario, tmp_path, frame_index=5, identity=1)
        n = len(tiny_scenario.detections[5])
        assert result.similarity.shape == (n, n)
        assert 0.0 <= result.high_fraction <= 1.0
        assert result.attention.shape[:2] == (tiny_config.model.ta_layers, tiny_config.model.heads)
        for name in ("topk_hist.csv", "similarity_matrix.csv", "ta_attention.csv", "depth_attention.csv"):
            assert (tmp_path / name).exists()
        header = (tmp_path / "ta_attention.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("layer,head,query,k0")

    def test_depth_attention_export(self, tiny_config, tiny_scenario, tmp_path):
        result = analyze_scenario(TrackingModel(tiny_config), tiny_scenario, tmp_path, frame_index=5)
        n = len(tiny_scenario.detections[5])
        L, H, N, P = result.depth_attention.shape
        assert (L, H, N) == (tiny_config.model.fusion_layers, tiny_config.model.heads, n)
        assert np.allclose(result.depth_attention.sum(axis=-1), 1.0)

        lines = (tmp_path / "depth_attention.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(["layer", "head", "object"] + [f"t{k}" for k in range(P)])
        assert len(lines) == 1 + L * H * N

    def test_depth_attention_without_spatial_adapter(self, tiny_config, tiny_scenario, tmp_path):
        config = tiny_config.model_copy(update={"ablation": tiny_config.ablation.model_copy(update={"sa": False})})
        result = analyze_scenario(TrackingModel(config), tiny_scenario, tmp_path)
        assert result.depth_attention is None
        assert (tmp_path / "depth_attention.csv").read_text(encoding="utf-8") == "layer,head,object\n"

    def test_without_temporal_adapter(self, tiny_config, tiny_scenario, tmp_path):
        config = tiny_config.model_copy(update={"ablation": tiny_config.ablation.model_copy(update={"ta": False})})
        result = analyze_scenario(TrackingModel(config), tiny_scenario, tmp_path)
        assert result.attention is None
        assert (tmp_path / "ta_attention.csv").read_text(encoding="utf-8") == "layer,head,query\n"


class TestGradcheckSuite:
    def test_all_cases_pass(self):
        results = gradcheck_suite(instances=3)
        assert set(results) == set(GRADCHECK_NAMES)
        for name, error in results.items():
            assert error < 1e-4, name

    def test_subset(self):
        assert list(gradcheck_suite(["softmax"], instances=2)) == ["softmax"]

    def test_unknown_name(self):
        with pytest.raises(GradCheckError) as exc_info:
            gradcheck_suite(["nope"])
        assert "nope" in str(exc_info.value)

    @pytest.mark.slow
    def test_twenty_instances(self):
        assert max(gradcheck_suite(instances=20).values()) < 1e-4


class TestBenchmark:
    def test_fixed_seeds(self):
        scenarios = benchmark_scenarios(seed=2, sequences=2, n_frames=10, depth_grid=8, appearance_dim=9)
        assert [s.config.seed for s in scenarios] == [2000, 2001]
        assert all(s.config.n_objects == 8 and s.config.preset == "crossing" for s in scenarios)

    def test_benchmark_config_matches_scenarios(self):
        config = benchmark_config(seed=3)
        scenario = benchmark_scenarios(seed=3, sequences=1, n_frames=20)[0]
        assert config.run.seed == 3
        for key in ("preset", "n_objects", "base_similarity", "appearance_noise", "noise_dim",
                    "appearance_dim", "depth_grid", "occlusion_rate"):
            assert getattr(config.scenario, key) == getattr(scenario.config, key)
        assert TrackingModel(config).temporal.dim == config.model.dim


TREND_SEEDS = (0, 1, 2)
TREND_VARIANTS = ("full", "none", "ta-only", "ta-zero-vector", "ia-cfe", "ia-raw")


@pytest.fixture(scope="module")
def trend_results():
    results = {name: [] for name in TREND_VARIANTS}
    for seed in TREND_SEEDS:
        scenarios = benchmark_scenarios(seed=seed)
        train, test = scenarios[:6], scenarios[6:]
        for name in TREND_VARIANTS:
            results[name].append(run_variant(benchmark_config(seed), name, train, test))
    return results


def mean_of(results, name, getter) -> float:
    return float(np.mean([getter(r) for r in results[name]]))


def assa(result) -> float:
    return result.eval.AssA


@pytest.mark.slow
class TestAblationTrends:
    def test_full_associates_better_than_none(self, trend_results):
        assert mean_of(trend_results, "full", assa) > mean_of(trend_results, "none", assa)

    def test_full_lowers_high_similarity_fraction(self, trend_results):
        full = mean_of(trend_results, "full", lambda r: r.high_fraction)
        none = mean_of(trend_results, "none", lambda r: r.high_fraction)
        assert full <= none - 0.10

    def test_mask_not_worse_than_zero_vector(self, trend_results):
        assert mean_of(trend_results, "ta-only", assa) >= mean_of(trend_results, "ta-zero-vector", assa)

    def test_cfe_not_worse_than_raw(self, trend_results):
        assert mean_of(trend_results, "ia-cfe", assa) >= mean_of(trend_results, "ia-raw", assa)
