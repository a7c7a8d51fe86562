"""Tests for the built-in verification suite."""

import pytest

from w2vj.core.oracles import (
    FRAGMENTS,
    NEGATIVE_CONTROL,
    build_fragment,
    ctc_oracle_grid,
    run_gradcheck_suite,
)
from w2vj.utils.errors import ConfigError

SEEDS = range(5)
QUICK = ("linear", "mlp", "quantizer", "diversity", "contrastive", "ctc")
HEAVY = tuple(
    name for name in FRAGMENTS if name not in QUICK and name != NEGATIVE_CONTROL
)


def _assert_all_pass(name):
    results = run_gradcheck_suite([name], seeds=SEEDS)
    assert [r.seed for r in results] == list(SEEDS)
    for result in results:
        assert result.report.passed, (result.seed, result.report.max_rel_error)
        assert result.ok


class TestGradcheckSuite:
    @pytest.mark.parametrize("name", QUICK)
    def test_fragment_passes(self, name):
        _assert_all_pass(name)

    @pytest.mark.slow
    @pytest.mark.parametrize("name", HEAVY)
    def test_model_fragment_passes(self, name):
        _assert_all_pass(name)

    def test_every_fragment_is_covered(self):
        assert set(QUICK) | set(HEAVY) | {NEGATIVE_CONTROL} == set(FRAGMENTS)
        models = {"fbank_frontend", "wav_frontend", "toy_model"}
        assert models | {"transformer_block", "conformer_block"} <= set(HEAVY)

    def test_negative_control_is_caught(self):
        (result,) = run_gradcheck_suite([NEGATIVE_CONTROL], seeds=[0])
        assert not result.report.passed
        # backward drops a factor of two, so the relative error is 1/2
        assert result.report.max_rel_error == pytest.approx(0.5, abs=1e-3)
        assert result.ok

    def test_several_seeds(self):
        results = run_gradcheck_suite(["linear"], seeds=[0, 1, 2])
        assert [r.seed for r in results] == [0, 1, 2]
        assert all(r.ok for r in results)

    def test_fragments_are_deterministic(self):
        case = build_fragment("contrastive", seed=3)
        assert case.fragment().item() == case.fragment().item()

    def test_unknown_fragment(self):
        with pytest.raises(ConfigError):
            build_fragment("softmax")

    def test_registry_names_match_cases(self):
        for name in ("linear", "ctc", NEGATIVE_CONTROL):
            assert name in FRAGMENTS
            assert build_fragment(name).name == name


class TestCtcOracleGrid:
    def test_small_grid_matches_enumeration(self):
        result = ctc_oracle_grid(trials=48, seed=1)
        assert result.trials == 48
        assert 0 < result.compared < 48
        assert result.passed(1e-10)
