"""
Edit-distance scoring: CER and WER pooled over a corpus.
"""

import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

from ..utils.errors import ManifestError, ScoringError
from ..utils.logging import get_logger

logger = get_logger(__name__)

UNITS = ("char", "word")


@dataclass(frozen=True)
class EditCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.reference_length + other.reference_length,
        )

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def as_tuple(self) -> Tuple[int, int, int]:
        return self.substitutions, self.insertions, self.deletions


def edit_distance(ref: Sequence[object], hyp: Sequence[object]) -> EditCounts:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    On cost ties the backtrace takes the diagonal (match/substitution) first,
    then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        cost[i][0] = i
    for j in range(m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            change = cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i][j] = min(change, cost[i - 1][j] + 1, cost[i][j - 1] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        differs = i > 0 and j > 0 and ref[i - 1] != hyp[j - 1]
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + differs:
            subs += differs
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(subs, ins, dels, n)


def normalize_text(text: str) -> str:
    """Lower-case, drop ASCII punctuation, collapse runs of whitespace."""
    text = "".join(c for c in text.lower() if c not in string.punctuation)
    return re.sub(r"\s+", " ", text).strip()


def tokenize(text: str, unit: str, strip_space: bool = False) -> List[str]:
    if unit == "word":
        return [w for w in text.split(" ") if w]
    if unit == "char":
        return [c for c in text if not (strip_space and c.isspace())]
    raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")


@dataclass(frozen=True)
class ScoreReport:
    unit: str
    counts: EditCounts
    name: str = ""

    @property
    def error_rate(self) -> float:
        return self.counts.errors / self.counts.reference_length

    def to_dict(self) -> Dict[str, Union[str, int, float]]:
        data: Dict[str, Union[str, int, float]] = {
            "unit": self.unit,
            "S": self.counts.substitutions,
            "I": self.counts.insertions,
            "D": self.counts.deletions,
            "N": self.counts.reference_length,
            "error_rate": self.error_rate,
        }
        if self.name:
            data["name"] = self.name
        return data


def score_corpus(
    pairs: Iterable[Tuple[str, str]],
    unit: str = "char",
    strip_space: bool = False,
    normalize: bool = False,
    name: str = "",
) -> ScoreReport:
    """Pool (S, I, D, N) over (reference, hypothesis) pairs."""
    total = EditCounts()
    for ref, hyp in pairs:
        if normalize:
            ref, hyp = normalize_text(ref), normalize_text(hyp)
        counts = edit_distance(
            tokenize(ref, unit, strip_space), tokenize(hyp, unit, strip_space)
        )
        total = total + counts
    if total.reference_length == 0:
        raise ScoringError("all references are empty; error rate is undefined")
    return ScoreReport(unit=unit, counts=total, name=name)


def error_rate(
    pairs: Iterable[Tuple[str, str]], unit: str = "char", strip_space: bool = False
) -> float:
    """(S + I + D) / N summed over the corpus."""
    return score_corpus(pairs, unit, strip_space).error_rate


def average_error_rates(reports: Sequence[ScoreReport]) -> float:
    """Unweighted mean of per-set error rates."""
    if not reports:
        raise ScoringError("no score reports to average")
    return sum(r.error_rate for r in reports) / len(reports)


def read_transcripts(path: Union[str, Path]) -> Dict[str, str]:
    """Read ``utt_id<TAB>text`` lines; text may be empty."""
    transcripts: Dict[str, str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        utt_id, _, text = line.partition("\t")
        if utt_id in transcripts:
            raise ManifestError(
                f"duplicate utterance id {utt_id!r} in {path}", line=number
            )
        transcripts[utt_id] = text
    return transcripts


def write_transcripts(transcripts: Mapping[str, str], path: Union[str, Path]) -> None:
    lines = [f"{utt_id}\t{text}" for utt_id, text in transcripts.items()]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def pair_transcripts(
    refs: Mapping[str, str], hyps: Mapping[str, str]
) -> List[Tuple[str, str]]:
    """Align by utterance id in reference order; missing hypotheses score as empty."""
    missing = [utt_id for utt_id in refs if utt_id not in hyps]
    if missing:
        logger.warning(
            "%d reference utterances have no hypothesis (first: %s)",
            len(missing),
            missing[0],
        )
    extra = [utt_id for utt_id in hyps if utt_id not in refs]
    if extra:
        logger.warning(
            "ignoring %d hypotheses without a reference (first: %s)",
            len(extra),
            extra[0],
        )
    return [(text, hyps.get(utt_id, "")) for utt_id, text in refs.items()]
