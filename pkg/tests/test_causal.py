import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_probe.attacks import AttackConfig
from causal_probe.causal import (IDLE, PWM, Z0, AttackCondition, CEReport, Concept, Do,
                                 InterventionVariable, PixelRegion, apply_intervention, attack_ce_sweep,
                                 causal_effect, ce_report, concept_summary, discretize_concept,
                                 expected_causal_effect, intervene_bottleneck, pixel_mask, _do_hook)
from causal_probe.errors import ContractError, FormatError, RangeError
from causal_probe.nets import output_probs
from causal_probe.tensor import Tensor

from oracles import all_binary_inputs, enumerable_model, null_path, oracle_expected_ce


class TestEnumerationOracle:
    @pytest.mark.parametrize("baseline", ["zero-fill", "clean"])
    @pytest.mark.parametrize("node", [0, 1])
    @pytest.mark.parametrize("bins", [16, 4, 3])
    def test_matches_brute_force(self, baseline, node, bins):
        aug, data = enumerable_model(1), all_binary_inputs()
        got = expected_causal_effect(aug, Z0, Concept(1, node), bins, dataset=data, baseline=baseline)
        want = oracle_expected_ce(aug, data.images, node, bins, baseline)
        assert abs(got - want) <= 1e-10
        assert abs(want) > 1e-3  # the model is not trivially inert

    @pytest.mark.parametrize("seed", range(5))
    def test_other_models(self, seed):
        aug, data = enumerable_model(seed), all_binary_inputs()
        for baseline in ("zero-fill", "clean"):
            got = expected_causal_effect(aug, Z0, Concept(1, 0), 16, dataset=data, baseline=baseline)
            assert abs(got - oracle_expected_ce(aug, data.images, 0, 16, baseline)) <= 1e-10


class TestIdleDo:
    def test_idle_is_identity(self, bars_aug, rng):
        x = rng.uniform(size=(1000, 1, 8, 8))
        got = apply_intervention(bars_aug, x, InterventionVariable(Concept(2, 1), IDLE))
        assert got.tobytes() == output_probs(bars_aug, x).tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 5.0), st.integers(0, 3), st.integers(0, 1000))
    def test_do_sets_summary(self, value, node, seed):
        z = np.random.default_rng(seed).uniform(size=(4, 4, 5, 5))
        out = _do_hook(node, value)(Tensor(z)).data
        assert np.max(np.abs(concept_summary(out, node) - value)) <= 1e-12
        np.testing.assert_array_equal(np.delete(out, node, axis=1), np.delete(z, node, axis=1))
        np.testing.assert_allclose(intervene_bottleneck(z, node, value), out, rtol=0, atol=1e-15)

    def test_do_zero_fills(self, rng):
        z = rng.uniform(size=(2, 3, 4, 4))
        assert np.all(intervene_bottleneck(z, 1, 0.0)[:, 1] == 0.0)

    def test_null_path_probs_unchanged(self, bars_aug, rng):
        aug = null_path(bars_aug, 2)
        x = rng.uniform(size=(50, 1, 8, 8))
        base = output_probs(aug, x)
        for v in (0.0, 0.7, 3.0):
            got = apply_intervention(aug, x, InterventionVariable(Concept(2, 2), Do(v)))
            assert got.tobytes() == base.tobytes()

    def test_pixel_region(self, bars_aug, rng):
        x = rng.uniform(size=(3, 1, 8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        mask[:2] = True
        got = apply_intervention(bars_aug.host, x, InterventionVariable(PixelRegion(mask), Do(0.0)))
        xm = x.copy()
        xm[:, :, :2] = 0.0
        np.testing.assert_array_equal(got, output_probs(bars_aug.host, xm))

    def test_bad_level_and_node(self, bars_aug):
        x = np.zeros((1, 1, 8, 8))
        with pytest.raises(RangeError):
            apply_intervention(bars_aug, x, InterventionVariable(Concept(1, 0), Do(1.0)))
        with pytest.raises(RangeError):
            apply_intervention(bars_aug, x, InterventionVariable(Concept(2, 4), Do(1.0)))

    def test_bad_state(self):
        with pytest.raises(ContractError):
            InterventionVariable(Concept(1, 0), "on")


class TestSummaryAndBins:
    def test_summary_examples(self):
        a = np.zeros((3, 1, 2, 2))
        a[0, 0] = 1.0
        a[1, 0] = [[0, 2], [2, 0]]
        np.testing.assert_array_equal(concept_summary(a, 0), [1.0, 1.0, 0.0])

    def test_two_bins(self):
        d = discretize_concept([0, 0, 1, 1], 2)
        np.testing.assert_array_equal(d.probs, [0.5, 0.5])
        np.testing.assert_array_equal(d.representatives, [0.0, 1.0])

    def test_quantile_representatives(self):
        d = discretize_concept(np.arange(100), 4)
        np.testing.assert_allclose(d.representatives, [12, 37, 62, 87], atol=0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=8, max_size=200), st.integers(2, 8))
    def test_probs_sum_to_one(self, values, bins):
        d = discretize_concept(values, bins)
        assert abs(d.probs.sum() - 1.0) <= 1e-12
        assert np.all(np.diff(d.representatives) >= 0)

    def test_degenerate_single_bin(self):
        d = discretize_concept(np.full(10, 0.3), 4)
        assert d.degenerate and d.probs.tolist() == [1.0]

    def test_too_few(self):
        with pytest.raises(ContractError):
            discretize_concept([1.0, 2.0], 4)


class TestCausalEffect:
    def test_do_zero_is_zero(self, bars_aug, bars_data):
        x = bars_data[1].images[:100]
        assert causal_effect(bars_aug, x, Concept(2, 0), 0.0) == 0.0

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.0, 20.0), st.integers(0, 3), st.sampled_from(["zero-fill", "clean"]))
    def test_in_unit_interval(self, bars_aug, bars_data, value, node, baseline):
        ce = causal_effect(bars_aug, bars_data[1].images[:40], Concept(2, node), value, baseline=baseline)
        assert -1.0 <= ce <= 1.0

    def test_null_path_zero_every_condition(self, bars_aug, bars_data):
        aug = null_path(bars_aug, 1)
        data = bars_data[1].head(60)
        for cond in (Z0, PWM(0.1, 3), AttackCondition(AttackConfig("FGSM", 0.3))):
            for baseline in ("zero-fill", "clean"):
                assert abs(expected_causal_effect(aug, cond, Concept(2, 1), 8, dataset=data,
                                                  baseline=baseline)) <= 1e-10

    def test_bad_baseline(self, bars_aug, bars_data):
        with pytest.raises(ContractError):
            causal_effect(bars_aug, bars_data[1].images[:5], Concept(2, 0), 1.0, baseline="mean")

    def test_fixed_class_policy(self, bars_aug, bars_data):
        x = bars_data[1].images[:20]
        a = causal_effect(bars_aug, x, Concept(2, 0), 1.0, class_policy=1)
        b = causal_effect(bars_aug, x, Concept(2, 0), 1.0, classes=np.ones(20, dtype=int))
        assert a == b


class TestPixelMask:
    def test_exact_count(self, rng):
        x = rng.uniform(0.1, 1.0, size=(3, 1, 28, 28))
        out = pixel_mask(x, 0.10, fill=0.0, rng_seed=0)
        assert [(out[i] != x[i]).sum() for i in range(3)] == [78, 78, 78]

    def test_fill_equal_to_input_is_noop(self):
        x = np.zeros((2, 1, 5, 5))
        assert pixel_mask(x, 0.3, fill=0.0, rng_seed=1).tobytes() == x.tobytes()

    def test_seeds_differ(self, rng):
        x = rng.uniform(0.1, 1.0, size=(1, 1, 28, 28))
        assert not np.array_equal(pixel_mask(x, 0.1, rng_seed=0) == 0, pixel_mask(x, 0.1, rng_seed=1) == 0)

    def test_region(self, rng):
        x = rng.uniform(size=(1, 1, 4, 4))
        mask = np.eye(4, dtype=bool)
        out = pixel_mask(x, region=mask, fill=0.5)
        assert np.all(out[0, 0][mask] == 0.5) and np.array_equal(out[0, 0][~mask], x[0, 0][~mask])

    def test_bad_fraction(self):
        with pytest.raises(ContractError):
            pixel_mask(np.zeros((1, 1, 4, 4)), 1.5)


class TestReport:
    def test_rows_and_determinism(self, bars_aug, bars_data):
        data = bars_data[1].head(80)
        conds = [Z0, PWM(0.1, 0), AttackCondition(AttackConfig("FGSM", 0.3))]
        a = ce_report(bars_aug, data, [(2, 0), (2, 3)], conds)
        b = ce_report(bars_aug, data, [(2, 0), (2, 3)], conds)
        assert len(a.rows) == 6
        assert a.to_tsv() == b.to_tsv()
        assert all(np.isfinite(r.expected_ce) for r in a.rows)
        for key in ("level_convention", "discretization", "baseline", "class_policy", "lambdas", "conditions"):
            assert key in a.metadata

    def test_tsv_roundtrip(self, bars_aug, bars_data, tmp_path):
        rep = ce_report(bars_aug, bars_data[1].head(40), [(2, 1)], [Z0, PWM()])
        path = rep.write(tmp_path / "t.tsv")
        back = CEReport.from_tsv(path.read_text())
        assert back.metadata == rep.metadata
        assert [(r.level, r.node, r.condition) for r in back.rows] == [(r.level, r.node, r.condition) for r in rep.rows]
        for r, s in zip(back.rows, rep.rows):
            assert r.expected_ce == pytest.approx(s.expected_ce, rel=1e-5)
        assert back.to_tsv() == rep.to_tsv()

    def test_malformed_tsv(self):
        with pytest.raises(FormatError):
            CEReport.from_tsv("level\tnode\n")

    def test_attack_sweep_rows(self, bars_aug, bars_data):
        cfgs = [AttackConfig("FGSM"), AttackConfig("BIM", steps=2), AttackConfig("PGD", steps=2),
                AttackConfig("JSMA", gamma=0.05)]
        rep = attack_ce_sweep(bars_aug, bars_data[1].head(20), [(2, 0)], cfgs)
        assert len(rep.rows) == 4
        assert rep.metadata["most_negative_attack"]["2,0"] in {r.condition for r in rep.rows}

    def test_zero_epsilon_sweep_equals_z0(self, bars_aug, bars_data):
        data = bars_data[1].head(40)
        z0 = ce_report(bars_aug, data, [(2, 2)], [Z0]).rows[0].expected_ce
        cfgs = [AttackConfig(k, epsilon=0.0, steps=3) for k in ("FGSM", "BIM", "PGD")]
        for r in attack_ce_sweep(bars_aug, data, [(2, 2)], cfgs).rows:
            assert abs(r.expected_ce - z0) <= 1e-10

    def test_condition_validation(self):
        with pytest.raises(ContractError):
            PWM(0.0)
