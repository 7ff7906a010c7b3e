import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ditehrnet import complexity as cx
from ditehrnet.complexity import Expectation, analyze, config_from_id, dka_flop_delta, verify_against_paper
from ditehrnet.dsc import dka_overhead_flops
from ditehrnet.network import ModelConfig
from ditehrnet.nn import Recorder
from ditehrnet.tensor import ConvSpec


@pytest.fixture(scope="module")
def report18(model18):
    return analyze(model18, (256, 192))


class TestReport:
    def test_params_equal_allocated_elements(self, model18, report18):
        allocated = sum(arr.size for _, arr in model18.named_parameters())
        assert report18.params == allocated == report18.model_params

    def test_params_do_not_depend_on_input(self, model18, report18):
        assert analyze(model18, (384, 288)).params == report18.params

    def test_totals_equal_sum_of_parts(self, report18):
        for key in ("stage", "branch", "block"):
            parts = report18.breakdown(key).values()
            assert sum(p["params"] for p in parts) == report18.params
            assert sum(p["flops"] for p in parts) == report18.flops
        assert report18.backbone_flops + report18.head_flops == report18.flops
        assert report18.flops_with_norm_act > report18.flops

    def test_stages_and_head_itemised(self, report18):
        assert list(report18.by_stage()) == ["1", "2", "3", "4", "head"]
        assert report18.head_params == 40 * 17 + 17
        assert report18.head_flops == 64 * 48 * 40 * 17

    def test_conv_flops_scale_with_area(self, model18):
        def conv_macs(size):
            rep = analyze(model18, size)
            # global-context shifts act on a 1x1 pooled vector and do not scale
            return sum(n.macs for n in rep.nodes
                       if n.kind.startswith(("conv", "dynconv")) and n.in_shape[2:] != (1, 1))

        assert conv_macs((512, 384)) == 4 * conv_macs((256, 192))

    def test_conv_flop_formula(self):
        rec = Recorder()
        from ditehrnet.nn import Conv2d
        Conv2d(ConvSpec(8, 16, (3, 3), 2, 1), np.random.default_rng(0)).trace(rec, (1, 8, 32, 32))
        assert rec.nodes[0].macs == 16 * 16 * 16 * 8 * 9

    def test_exports(self, report18):
        d = json.loads(json.dumps(report18.to_json()))
        assert d["totals"]["params"] == report18.params
        rows = list(csv.DictReader(io.StringIO(report18.to_csv())))
        assert len(rows) == len(report18.nodes)
        assert sum(int(r["flops"]) for r in rows) == report18.flops
        assert "norm + act" in report18.table()


class TestDkaDelta:
    @pytest.mark.parametrize("c,h,w,n", [(64, 16, 16, 4), (40, 64, 48, 4), (12, 7, 5, 3), (8, 8, 8, 1)])
    def test_depthwise(self, c, h, w, n):
        spec = ConvSpec(c, c, (3, 3), 1, 1, c)
        assert dka_flop_delta(spec, n, h, w) == dka_overhead_flops(c, h, w, n)

    def test_pointwise(self):
        assert dka_flop_delta(ConvSpec(32, 64, (1, 1)), 4, 10, 10) == dka_overhead_flops(32, 10, 10, 4)


class TestSweep:
    @pytest.fixture(scope="class")
    @classmethod
    def cells(cls):
        return cx.sweep_hyperparams(ModelConfig.variant_config("18"))

    def test_layout(self, cells):
        assert len(cells) == 16 and all(c.error is None for c in cells)
        assert [c.G for c in cells[:4]] == [(1, 1, 1, 1)] * 4
        assert [c.N for c in cells[:4]] == list(cx.TABLE5_N)
        assert len(cx.sweep_table(cells).splitlines()) == 5

    def test_params_monotone(self, cells):
        look = {(c.G, c.N): c.params for c in cells}

        def le(a, b):
            return all(x <= y for x, y in zip(a, b))

        for (g1, n1), p1 in look.items():
            for (g2, n2), p2 in look.items():
                if le(g1, g2) and le(n1, n2):
                    assert p1 <= p2, (g1, n1, g2, n2)

    def test_invalid_cell_is_reported(self):
        cells = cx.sweep_hyperparams(ModelConfig.variant_config("18"), G_grid=[(3, 1, 1, 1)], N_grid=[(1, 1, 1, 1)])
        assert cells[0].error and "divisible" in cells[0].error

    @settings(max_examples=8, deadline=None)
    @given(st.integers(0, 3), st.integers(1, 4), st.integers(1, 3))
    def test_raising_one_entry_never_lowers_params(self, k, n, bump):
        base = [1, 1, 1, 1]
        lo = ModelConfig.variant_config("18", N=tuple(base[:k] + [n] + base[k + 1:]))
        hi = ModelConfig.variant_config("18", N=tuple(base[:k] + [n + bump] + base[k + 1:]))
        assert analyze(lo).params <= analyze(hi).params


class TestExpectations:
    def test_config_ids(self):
        cfg = config_from_id("dite-18:G=4-4-4-4:N=1-2-4-4")
        assert cfg.G == (4, 4, 4, 4) and cfg.N == (1, 2, 4, 4)
        assert config_from_id("dite-30").module_counts == (1, 3, 8, 3)
        with pytest.raises(ValueError):
            config_from_id("resnet-50")

    def test_bundled_tables_load(self):
        assert cx.bundled_tables() == ["table2", "table3", "table4", "table5", "table6"]
        t5 = cx.load_expectations("table5")
        assert len(t5) == 16 and {e.input_h for e in t5} == {256}
        t6 = cx.load_expectations("table6")
        assert {(e.input_h, e.input_w, e.mflops) for e in t6} == {(256, 192, 209.8), (256, 256, 279.5)}

    def test_matching_totals_pass(self, report18):
        e = Expectation("dite-18", 256, 192, report18.params / 1e6, report18.flops / 1e6, 0.001, 0.001)
        (v,) = verify_against_paper([e], reports={("dite-18", 256, 192): report18})
        assert v.passed and abs(v.rel_flops) < 1e-9 and v.line().startswith("PASS")

    def test_doubled_params_fail_with_localisation(self, report18):
        wide = ModelConfig.variant_config("18", widths=(80, 160, 320, 640))
        bad = analyze(wide, (256, 192))
        e = Expectation("dite-18", 256, 192, report18.params / 1e6, report18.flops / 1e6, 0.05, 0.02)
        (v,) = verify_against_paper([e], reports={("dite-18", 256, 192): bad},
                                    references={("dite-18", 256, 192): report18})
        assert not v.passed and v.rel_params > 1.0
        assert any(s.startswith("stage 2") for s in v.localization)
        assert v.line().startswith("FAIL")

    def test_unbuildable_entry_is_listed(self):
        (v,) = verify_against_paper([Expectation("dite-99", 256, 192, 1, 1, 0.1, 0.1)])
        assert not v.passed and v.error and v.line().startswith("MISSING")
        assert json.loads(cx.verdicts_json([v]))[0]["error"]

    def test_csv_file(self, tmp_path, report18):
        p = tmp_path / "exp.csv"
        p.write_text("config_id,input_h,input_w,params,mflops,tol_params,tol_flops\n"
                     f"dite-18,256,192,{report18.params / 1e6},{report18.flops / 1e6},0.01,0.01\n")
        (e,) = cx.load_expectations(p)
        assert e.note == "" and e.tol_flops == 0.01
