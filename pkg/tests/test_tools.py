# tests/test_tools.py
from pathlib import Path

from adaptrack.config import ABLATIONS, ScenarioConfig
from adaptrack.metrics import EvalResult
from adaptrack.tools import format_ablation_list, format_eval_result, format_simulation


def make_result(**overrides) -> EvalResult:
    values = dict(HOTA=71.234, DetA=80.0, AssA=63.5, IDF1=75.0, MOTA=90.0,
                  TP=90, FP=3, FN=10, IDSW=2, IDTP=80, IDFP=13, IDFN=20)
    values.update(overrides)
    return EvalResult(**values)


class TestFormatEvalResult:
    def test_formats_metrics(self):
        output = format_eval_result(make_result(), sequences=3)

        assert "评测结果" in output
        assert "共3个序列" in output
        assert "| HOTA | 71.23 |" in output
        assert "| MOTA | 90.00 |" in output
        assert "| IDSW | 2 |" in output

    def test_all_counts_listed(self):
        output = format_eval_result(make_result())
        for name in ("TP", "FP", "FN", "IDSW", "IDTP", "IDFP", "IDFN"):
            assert f"| {name} |" in output


class TestFormatSimulation:
    def test_formats_paths(self):
        scenario = ScenarioConfig(preset="circular", n_objects=5, n_frames=50, seed=9)
        output = format_simulation([Path("out/seq01"), Path("out/seq02")], scenario)

        assert "共2个场景" in output
        assert "circular" in output
        assert "种子 9" in output
        assert "seq02" in output

    def test_empty(self):
        output = format_simulation([], ScenarioConfig())
        assert "没有生成" in output


class TestFormatAblationList:
    def test_formats_presets(self):
        output = format_ablation_list(ABLATIONS)

        assert "消融预设" in output
        assert "| full | - |" in output
        assert "sa=False, ta=False, ia=False" in output
        for name in ABLATIONS:
            assert f"| {name} |" in output
