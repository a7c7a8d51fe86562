"""Tests for edit distance and pooled CER/WER."""

import pytest

from w2vj.core.scoring import (
    EditCounts,
    ScoreReport,
    average_error_rates,
    edit_distance,
    error_rate,
    normalize_text,
    pair_transcripts,
    read_transcripts,
    score_corpus,
    write_transcripts,
)
from w2vj.utils.errors import ManifestError, ScoringError

# (reference, hypothesis, (S, I, D), N) worked out by hand
GOLDEN = [
    ("abc", "abc", (0, 0, 0), 3),
    ("abc", "abd", (1, 0, 0), 3),
    ("ab", "", (0, 0, 2), 2),
    ("かな", "かんな", (0, 1, 0), 2),
    ("kitten", "sitting", (2, 1, 0), 6),
    ("abcd", "acd", (0, 0, 1), 4),
    ("a b", "a  b", (0, 1, 0), 3),
    ("abc", "xyz", (3, 0, 0), 3),
    ("", "xy", (0, 2, 0), 0),
    ("hello", "hello", (0, 0, 0), 5),
]


class TestEditDistance:
    @pytest.mark.parametrize("ref,hyp,counts,length", GOLDEN)
    def test_golden_pairs(self, ref, hyp, counts, length):
        result = edit_distance(list(ref), list(hyp))
        assert result.as_tuple() == counts
        assert result.reference_length == length

    def test_metric_properties(self, rng):
        def word() -> str:
            return "".join(rng.choice(list("abc"), size=int(rng.integers(0, 7))))

        for _ in range(100):
            a, b, c = word(), word(), word()
            ab = edit_distance(a, b).errors
            assert ab == edit_distance(b, a).errors
            assert edit_distance(a, c).errors <= ab + edit_distance(b, c).errors
            assert (ab == 0) == (a == b)

    def test_counts_add(self):
        total = EditCounts(1, 2, 3, 4) + EditCounts(1, 1, 1, 1)
        assert total == EditCounts(2, 3, 4, 5)
        assert total.errors == 9


class TestErrorRate:
    def test_golden_corpus_is_pooled(self):
        report = score_corpus([(ref, hyp) for ref, hyp, _, _ in GOLDEN], "char")
        assert report.counts == EditCounts(6, 5, 3, 31)
        assert report.error_rate == pytest.approx(14 / 31)

    def test_japanese_insertion(self):
        assert error_rate([("かな", "かんな")], "char") == pytest.approx(0.5)

    def test_pooled_differs_from_utterance_average(self):
        pairs = [("a", "b"), ("abcd", "abcd")]
        assert error_rate(pairs, "char") == pytest.approx(0.2)
        per_utterance = [error_rate([pair], "char") for pair in pairs]
        assert sum(per_utterance) / 2 == pytest.approx(0.5)

    def test_perfect_hypotheses(self):
        assert error_rate([("the cat", "the cat"), ("か", "か")], "word") == 0.0

    def test_word_units(self):
        pairs = [("the cat sat", "the bat  sat")]
        assert error_rate(pairs, "word") == pytest.approx(1 / 3)

    def test_strip_space(self):
        assert error_rate([("a b", "a  b")], "char") == pytest.approx(1 / 3)
        assert error_rate([("a b", "a  b")], "char", strip_space=True) == 0.0

    def test_normalization_is_opt_in(self):
        pairs = [("Hello, World!", "hello world")]
        assert score_corpus(pairs, "word").error_rate == 1.0
        assert score_corpus(pairs, "word", normalize=True).error_rate == 0.0
        assert normalize_text("  A,  b.c ") == "a bc"

    def test_all_references_empty(self):
        with pytest.raises(ScoringError):
            error_rate([("", "abc"), ("", "")], "char")

    def test_unknown_unit(self):
        with pytest.raises(ValueError):
            error_rate([("a", "a")], "phone")

    def test_report_dict_and_average(self):
        a = ScoreReport("char", EditCounts(1, 0, 0, 4), name="dev")
        b = ScoreReport("char", EditCounts(0, 0, 0, 2))
        assert a.to_dict() == {
            "unit": "char",
            "S": 1,
            "I": 0,
            "D": 0,
            "N": 4,
            "error_rate": 0.25,
            "name": "dev",
        }
        assert average_error_rates([a, b]) == pytest.approx(0.125)
        with pytest.raises(ScoringError):
            average_error_rates([])


class TestTranscripts:
    def test_file_keeps_empty_hypotheses(self, tmp_path):
        path = tmp_path / "hyp.txt"
        write_transcripts({"u1": "ab", "u2": ""}, path)
        assert read_transcripts(path) == {"u1": "ab", "u2": ""}

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "hyp.txt"
        path.write_text("u1\ta\nu1\tb\n", encoding="utf-8")
        with pytest.raises(ManifestError):
            read_transcripts(path)

    def test_pairing_scores_missing_hypotheses_as_empty(self, caplog):
        pairs = pair_transcripts({"u1": "ab", "u2": "cd"}, {"u1": "ab", "u3": "zz"})
        assert pairs == [("ab", "ab"), ("cd", "")]
        assert "no hypothesis" in caplog.text
        assert "without a reference" in caplog.text
