import numpy as np
import pytest

from yolocs import analyzer
from yolocs.errors import DimensionMismatchError
from yolocs.graph import Graph, ModelConfig, build, load_config
from yolocs.nn import CBS, Conv2d
from yolocs.nn.module import FlopCounter, Meta

from conftest import ROOT


@pytest.fixture(scope="module")
def v5l(config_dir):
    return build(load_config(config_dir / "v5l-baseline.yaml"), seed=None)


def test_single_cbs_closed_form():
    cbs = CBS(3, 16, 6, 2, 2)
    enumerated = sum(p.size for p in cbs.parameters())
    assert enumerated == 6 * 6 * 3 * 16 + 16 + 32 == 1776
    params, flops = analyzer.module_cost(cbs, (1, 3, 640, 640))
    out = 16 * 320 * 320
    assert params == 1776
    assert flops == 2 * 36 * 3 * out + out + 2 * out + 2 * out


def test_unit_conv_flops():
    _, flops = analyzer.module_cost(Conv2d(7, 5, 1), (1, 7, 1, 1))
    assert flops == 2 * 7 * 5
    _, flops = analyzer.module_cost(Conv2d(7, 5, 1, bias=True), (1, 7, 1, 1))
    assert flops == 2 * 7 * 5 + 5


def test_empty_graph_counts_zero():
    g = Graph([], ModelConfig(1, 1.0, 1.0, []))
    assert analyzer.count_params(g) == ([], 0)


def test_running_stats_not_counted():
    cbs = CBS(4, 8)
    assert cbs.num_params() == 4 * 8 + 8 + 2 * 8


def test_report_totals_are_row_sums(v5l):
    rep = analyzer.profile(v5l, 640)
    per_p, tot_p = analyzer.count_params(v5l)
    per_f, tot_f = analyzer.count_flops(v5l, 640)
    assert rep.total_params == tot_p == sum(per_p) == sum(r.params for r in rep.rows)
    assert rep.total_flops == tot_f == sum(per_f)
    assert rep.input_size == 640


def test_baseline_calibration(v5l):
    rep = analyzer.profile(v5l, 640)
    assert abs(rep.params_m - 46.5) / 46.5 <= 0.02
    assert abs(rep.gflops - 109.1) / 109.1 <= 0.03


def test_flops_scale_quadratically(v5l):
    full = analyzer.count_flops(v5l, 640)[0]
    half = analyzer.count_flops(v5l, 320)[0]
    assert all(f == 4 * h for f, h in zip(full, half))
    c = Conv2d(16, 32, 3, 2)
    assert analyzer.module_cost(c, (1, 16, 640, 640))[1] == 4 * analyzer.module_cost(c, (1, 16, 320, 320))[1]


def test_conv_flops_quarter_at_half_size(v5l):
    def conv_flops(size):
        total = 0
        for node in v5l.nodes:
            counter = FlopCounter()
            shapes = v5l.infer_shapes((1, 3, size, size))
            ins = [Meta((1, 3, size, size) if s < 0 else shapes[s], counter) for s in node.sources]
            node.module(ins if len(ins) > 1 or node.kind == "Detect" else ins[0])
            total += counter.by_kind.get("conv", 0)
        return total
    assert conv_flops(640) == 4 * conv_flops(320)


def test_input_size_must_divide_by_32(v5l):
    with pytest.raises(DimensionMismatchError):
        analyzer.count_flops(v5l, 100)


def test_compare_self_is_zero(v5l):
    rep = analyzer.profile(v5l, 640, "a")
    rows = analyzer.compare([rep, rep])
    assert rows[1].d_params == 0 and rows[1].d_flops == 0
    assert analyzer.compare([]) == []


def test_orderings(config_dir):
    def tot(name):
        rep = analyzer.profile(build(load_config(config_dir / f"{name}.yaml"), seed=None), 640)
        return rep.total_params, rep.total_flops

    base, one, ocj, three = tot("v5l-baseline"), tot("dcfs-1x1"), tot("v5l-dcfs"), tot("dcfs-3x3")
    assert one[0] < ocj[0] < three[0] and one[1] < ocj[1] < three[1]
    assert one[1] < base[1]
    adh, dh = tot("v5l-adh"), tot("v5l-dh")
    assert adh[0] < dh[0] and adh[1] < dh[1]


def test_path_costs_show_asymmetry(config_dir):
    g = build(load_config(config_dir / "v5l-adh.yaml"), seed=None)
    costs = analyzer.path_costs(g.head, 0, g.infer_shapes((1, 3, 640, 640))[17])
    assert costs["obj"][1] > costs["cls"][1] > costs["box"][1] > 0


def test_formats_match_golden(config_dir):
    golden = (ROOT / "docs" / "report-format.md").read_text()
    rep = analyzer.profile(build(load_config(config_dir / "micro.yaml"), seed=None, img_size=96), 96, "micro")
    assert analyzer.format_table(rep) in golden
    assert analyzer.format_kv(rep) in golden
    a = analyzer.profile(build(load_config(config_dir / "v5l-baseline.yaml"), seed=None), 640, "v5l-baseline")
    b = analyzer.profile(build(load_config(config_dir / "v5l-adh.yaml"), seed=None), 640, "v5l-adh")
    assert analyzer.format_compare(analyzer.compare([a, b])) in golden
    assert analyzer.format_compare(analyzer.compare([a, b]), kv=True) in golden
