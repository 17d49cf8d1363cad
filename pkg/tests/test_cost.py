import json

import pytest
from hypothesis import given, strategies as st

from miru.cells import CellKind
from miru.cost import (REFERENCE, EnergyTable, backward_terms, cost_report, count_backward,
                       count_forward, count_parameters, estimate_energy, format_reports,
                       reference_deltas)
from miru.network import ModelConfig
from miru.numerics import ContractError

KINDS = [CellKind.GRU, CellKind.MIRU1, CellKind.MIRU2]


def cfg(kind, n_x=28, n_h=128, n_y=10):
    return ModelConfig(n_x, n_h, n_y, 1, kind)


class TestParameters:
    def test_miru1_without_output_bias(self):
        assert count_parameters(cfg("miru1"), "without-output-bias") == \
            2 * (128 * 28 + 128 * 128 + 128) + 128 * 10 == 41_472

    def test_miru2_with_output_bias(self):
        assert count_parameters(cfg("miru2"), "with-output-bias") == 21_386

    def test_gru_without_output_bias(self):
        n = count_parameters(cfg("gru"), "without-output-bias")
        assert n == 61_568
        assert abs(n - 61_696) / 61_696 == pytest.approx(128 / 61_696)

    @pytest.mark.parametrize("kind", KINDS)
    def test_matches_model_tensors(self, kind):
        from miru.network import init_model
        c = ModelConfig(5, 7, 3, 2, kind)
        n = sum(a.size for a in init_model(c).tensors().values())
        assert count_parameters(c) == n

    def test_ratio(self):
        r = count_parameters(cfg("gru")) / count_parameters(cfg("miru2"))
        assert 2.8 <= r <= 3.0

    def test_unknown_convention(self):
        with pytest.raises(ContractError):
            count_parameters(cfg("gru"), "maybe")


class TestForward:
    def test_miru2(self):
        f = count_forward(cfg("miru2"))
        assert f.macs == 19_968 + 128 + 1_280 == 21_376
        assert f.activations == 128 + 10 == 138

    def test_gru_activations(self):
        assert count_forward(cfg("gru")).activations == 3 * 128 + 10 == 394

    def test_unit_size(self):
        assert count_forward(cfg("miru2", 1, 1, 1)).macs == 4

    def test_steps_multiplier(self):
        one, many = count_forward(cfg("gru")), count_forward(cfg("gru"), steps=28)
        assert many.macs - 128 * 10 == 28 * (one.macs - 128 * 10)


class TestBackward:
    def test_miru2_hand_count(self):
        n_x, n_h, n_y = 28, 128, 10
        out_mul, out_add = 2 * n_y * n_h, n_y + n_h * (n_y - 1)
        cell_mul = 3 * n_h + n_h * n_x + n_h * n_h
        cell_add = 2 * n_h
        b = count_backward(cfg("miru2"))
        assert (b.mul, b.add) == (out_mul + cell_mul, out_add + cell_add) == (22_912, 1_418)

    def test_bptt_adds_propagation(self):
        for kind in KINDS:
            step, full = count_backward(cfg(kind)), count_backward(cfg(kind), "bptt")
            extra = [t for t in backward_terms(cfg(kind)) if t.propagation]
            assert full.mul - step.mul == sum(t.mul for t in extra)
            assert full.add - step.add == sum(t.add for t in extra)

    def test_zero_size_rejected(self):
        with pytest.raises(ContractError):
            count_backward(ModelConfig(28, 0, 10, 1, "gru"))


class TestEnergy:
    def test_miru2_formula(self):
        rep = cost_report(cfg("miru2"))
        expect = (21_386 * 5.893 + 21_376 * 0.376 + 128 * 0.326 + 10 * 0.228) * 1e-6
        assert rep.energy_uj == pytest.approx(expect, rel=1e-12)
        assert abs(rep.energy_uj - 0.136) / 0.136 < 0.02

    def test_gru(self):
        e = cost_report(cfg("gru")).energy_uj
        assert e == pytest.approx(0.386, abs=1e-3)

    def test_zero_table(self):
        assert estimate_energy(cost_report(cfg("gru")), EnergyTable.zero()) == 0.0

    def test_load_table(self, tmp_path):
        (tmp_path / "e.txt").write_text("# pJ\nmac = 1.0\nsram-read = 2\n")
        t = EnergyTable.load(tmp_path / "e.txt")
        assert t.mac == 1.0 and t.sram_read == 2.0 and t.tanh == 0.326
        (tmp_path / "bad.txt").write_text("flux = 3\n")
        with pytest.raises(ContractError):
            EnergyTable.load(tmp_path / "bad.txt")

    def test_ratio(self):
        r = cost_report(cfg("gru")).energy_uj / cost_report(cfg("miru2")).energy_uj
        assert 2.7 <= r <= 3.0


class TestMonotone:
    @given(st.sampled_from(KINDS), st.integers(1, 64), st.integers(1, 64), st.integers(1, 16),
           st.sampled_from(["n_x", "n_h", "n_y"]))
    def test_growing_any_dimension(self, kind, n_x, n_h, n_y, which):
        small = dict(n_x=n_x, n_h=n_h, n_y=n_y)
        big = {**small, which: small[which] + 1}
        a, b = cost_report(cfg(kind, **small)), cost_report(cfg(kind, **big))
        assert b.parameters > a.parameters
        assert b.macs > a.macs
        assert b.energy_uj > a.energy_uj

    def test_kind_order(self):
        reps = [cost_report(cfg(k, 10, 20, 3)) for k in KINDS]
        assert reps[0].parameters > reps[1].parameters > reps[2].parameters
        assert reps[0].macs > reps[1].macs > reps[2].macs


class TestReport:
    def test_deltas_only_at_reference_size(self):
        d = reference_deltas(cost_report(cfg("miru2")))
        assert d["parameters"]["delta"] == 0
        assert d["parameters"]["reference"] == REFERENCE[CellKind.MIRU2]["parameters"]
        assert reference_deltas(cost_report(cfg("miru2", 10, 20, 3))) == {}

    def test_text_and_json(self):
        reps = [cost_report(cfg(k)) for k in KINDS]
        text = format_reports(reps)
        assert "with-output-bias" in text and "miru1" in text
        assert json.loads(reps[0].to_json())["kind"] == "gru"
        assert format_reports([]).strip() == "(no models)"
