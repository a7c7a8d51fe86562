"""
Manifests, vocabularies, batching and the synthetic tone corpus.

A manifest is a UTF-8 TSV file ``utt_id<TAB>path<TAB>length[<TAB>transcript]``.
Lengths are samples for WAV-mode manifests and frames for FBANK-mode ones;
``entry_length`` converts a WAV-mode length when a frame budget is used.
"""

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.audio import write_wav
from ..utils.errors import FeatureError, ManifestError, VocabularyError
from ..utils.logging import get_logger
from .features import (
    SAMPLE_RATE,
    CmvnStats,
    apply_cmvn,
    extract_fbank,
    load_waveform,
    num_frames,
)

logger = get_logger(__name__)

PathLike = Union[str, Path]

BLANK = "<blank>"
BLANK_INDEX = 0
SAMPLES_PER_SECOND = SAMPLE_RATE
FRAMES_PER_SECOND = 100
UNITS = ("samples", "frames")

# Synthetic tone corpus
TONE_BASE_HZ = 300.0
TONE_STEP_HZ = 40.0
TONE_SECONDS = 0.12
TONE_AMPLITUDE = 0.5
SYNTH_SNR_DB = 30.0


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: str
    length: int
    transcript: Optional[str] = None


def load_manifest(path: PathLike) -> List[ManifestEntry]:
    """Parse a manifest; errors carry the offending line number."""
    entries: List[ManifestEntry] = []
    seen: Dict[str, int] = {}
    base = Path(path).parent
    with open(path, "r", encoding="utf-8", newline="\n") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) > 4:
                raise ManifestError(
                    "too many columns; TAB is reserved as the column delimiter", line_no
                )
            if len(fields) < 3:
                raise ManifestError(
                    f"expected at least 3 columns, found {len(fields)}", line_no
                )
            utt_id, audio_path, length_text = fields[:3]
            if not utt_id:
                raise ManifestError("empty utterance id", line_no)
            if utt_id in seen:
                raise ManifestError(
                    f"duplicate utterance id {utt_id!r} (first on line {seen[utt_id]})",
                    line_no,
                )
            try:
                length = int(length_text)
            except ValueError as e:
                raise ManifestError(
                    f"length {length_text!r} is not an integer", line_no
                ) from e
            if length <= 0:
                raise ManifestError(f"length must be positive, got {length}", line_no)
            audio = Path(audio_path)
            if not audio.is_absolute():
                audio = base / audio
            transcript = fields[3] if len(fields) == 4 else None
            seen[utt_id] = line_no
            entries.append(ManifestEntry(utt_id, str(audio), length, transcript))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: PathLike) -> None:
    lines = []
    for entry in entries:
        if "\t" in entry.utterance_id or "\t" in entry.audio_path:
            raise ManifestError(
                f"{entry.utterance_id}: TAB is reserved as the column delimiter"
            )
        fields = [entry.utterance_id, entry.audio_path, str(entry.length)]
        if entry.transcript is not None:
            if "\t" in entry.transcript or "\n" in entry.transcript:
                raise ManifestError(
                    f"{entry.utterance_id}: transcript contains a reserved delimiter"
                )
            fields.append(entry.transcript)
        lines.append("\t".join(fields))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("".join(line + "\n" for line in lines))


def merge_manifests(
    manifests: Sequence[Sequence[ManifestEntry]],
) -> List[ManifestEntry]:
    """Concatenate manifests; utterance ids must stay unique."""
    merged: List[ManifestEntry] = []
    seen = set()
    for entries in manifests:
        for entry in entries:
            if entry.utterance_id in seen:
                raise ManifestError(
                    f"duplicate utterance id {entry.utterance_id!r} across manifests"
                )
            seen.add(entry.utterance_id)
            merged.append(entry)
    return merged


def budget_from_seconds(seconds: float, unit: str) -> int:
    """87.5 s -> 1,400,000 samples or 8750 frames."""
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")
    rate = SAMPLES_PER_SECOND if unit == "samples" else FRAMES_PER_SECOND
    return int(round(seconds * rate))


def is_waveform_path(path: str) -> bool:
    return path.lower().endswith(".wav")


def entry_length(entry: ManifestEntry, unit: str) -> int:
    """Length of ``entry`` in ``unit``; WAV-mode sample counts convert to frames."""
    if unit == "frames" and is_waveform_path(entry.audio_path):
        return num_frames(entry.length)
    if unit == "samples" and not is_waveform_path(entry.audio_path):
        raise ManifestError(
            f"{entry.utterance_id}: feature files have no sample length"
        )
    return entry.length


def subset_by_hours(
    entries: Sequence[ManifestEntry], hours: float, unit: str, seed: int
) -> List[ManifestEntry]:
    """Seeded random subset whose total duration first reaches ``hours``.

    Entries keep their manifest order in the result.
    """
    rate = SAMPLES_PER_SECOND if unit == "samples" else FRAMES_PER_SECOND
    target = hours * 3600.0 * rate
    order = np.random.default_rng(seed).permutation(len(entries))
    chosen: List[int] = []
    total = 0
    for index in order:
        if total >= target:
            break
        chosen.append(int(index))
        total += entry_length(entries[int(index)], unit)
    return [entries[i] for i in sorted(chosen)]


# ----------------------------------------------------------------------
# Vocabulary
# ----------------------------------------------------------------------


class Vocabulary:
    """Characters with the CTC blank reserved at index 0."""

    def __init__(self, tokens: Sequence[str]) -> None:
        tokens = list(tokens)
        if not tokens or tokens[0] != BLANK:
            tokens = [BLANK] + [t for t in tokens if t != BLANK]
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        self.tokens: List[str] = tokens
        self._index = {token: i for i, token in enumerate(tokens)}

    @property
    def blank_index(self) -> int:
        return BLANK_INDEX

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def symbols(self) -> List[str]:
        """Non-blank tokens in index order."""
        return self.tokens[1:]

    def encode(self, text: str) -> List[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as e:
            raise VocabularyError(
                f"character {e.args[0]!r} is not in the vocabulary"
            ) from e

    def decode(self, indices: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in indices if i != BLANK_INDEX)

    def save(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write("".join(token + "\n" for token in self.tokens))

    @classmethod
    def load(cls, path: PathLike) -> "Vocabulary":
        with open(path, "r", encoding="utf-8", newline="\n") as handle:
            tokens = [line[:-1] if line.endswith("\n") else line for line in handle]
        if not tokens or tokens[0] != BLANK:
            raise VocabularyError(f"{path}: first line must be {BLANK}")
        return cls(tokens)


def build_vocab(manifests: Sequence[Sequence[ManifestEntry]]) -> Vocabulary:
    """Sorted unique transcript characters with the blank prepended."""
    characters = set()
    found = False
    for entries in manifests:
        for entry in entries:
            if entry.transcript is None:
                raise VocabularyError(
                    f"{entry.utterance_id}: transcript required to build a vocabulary"
                )
            found = True
            characters.update(entry.transcript)
    if not found or not characters:
        raise VocabularyError("cannot build a vocabulary from an empty transcript set")
    return Vocabulary([BLANK] + sorted(characters))


# ----------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------


@dataclass
class BatchPlan:
    """Index sets for one epoch plus the entries skipped as over budget."""

    batches: List[List[int]]
    skipped: List[int] = field(default_factory=list)


def make_batches(
    entries: Sequence[ManifestEntry],
    budget: int,
    unit: str,
    seed: int,
    epoch: int = 0,
) -> BatchPlan:
    """Batch index sets for one epoch over ``entries`` under a ``unit`` budget."""
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")
    return bucket_lengths([entry_length(e, unit) for e in entries], budget, seed, epoch)


def bucket_lengths(
    lengths: Sequence[int],
    budget: int,
    seed: int,
    epoch: int = 0,
) -> BatchPlan:
    """Length-sorted greedy bucketing, then a seeded shuffle of the buckets.

    Each batch's summed length stays within ``budget``; entries longer than the
    budget are skipped (and logged). Batch order depends only on
    (lengths, budget, seed, epoch).
    """
    if budget <= 0:
        raise ValueError("batch budget must be positive")
    skipped = [i for i, n in enumerate(lengths) if n > budget]
    if skipped:
        logger.warning(
            "skipping %d entries longer than the batch budget %d", len(skipped), budget
        )
    fitting = (i for i, n in enumerate(lengths) if n <= budget)
    order = sorted(fitting, key=lambda i: (lengths[i], i))
    batches: List[List[int]] = []
    current: List[int] = []
    total = 0
    for index in order:
        if current and total + lengths[index] > budget:
            batches.append(current)
            current, total = [], 0
        current.append(index)
        total += lengths[index]
    if current:
        batches.append(current)
    permutation = np.random.default_rng([seed, epoch]).permutation(len(batches))
    return BatchPlan(batches=[batches[i] for i in permutation], skipped=skipped)


def utterance_seed(seed: int, step: int, utterance_id: str) -> List[int]:
    """Seed material for per-utterance randomness, independent of batch position."""
    return [seed, step, zlib.crc32(utterance_id.encode("utf-8"))]


def utterance_rng(
    seed: int, step: int, utterance_id: str, stream: int
) -> np.random.Generator:
    """Independent generator per (seed, step, utterance, stream)."""
    return np.random.default_rng(utterance_seed(seed, step, utterance_id) + [stream])


@dataclass
class Batch:
    """Padded features with their true lengths."""

    ids: List[str]
    features: np.ndarray
    lengths: np.ndarray
    transcripts: List[Optional[str]]

    @property
    def padding_mask(self) -> np.ndarray:
        """True at padded positions, shape (B, T_max)."""
        positions = np.arange(self.features.shape[1])
        return positions[None, :] >= self.lengths[:, None]

    def __len__(self) -> int:
        return len(self.ids)

    def utterance(self, b: int) -> np.ndarray:
        """Unpadded features of utterance ``b``."""
        return self.features[b, : int(self.lengths[b])]


def collate(
    features: Sequence[np.ndarray],
    ids: Sequence[str],
    transcripts: Optional[Sequence[Optional[str]]] = None,
) -> Batch:
    """Zero-pad a list of (T, F) or (N,) arrays into one batch array."""
    if not features:
        raise ValueError("cannot collate an empty batch")
    lengths = np.array([f.shape[0] for f in features], dtype=np.int64)
    longest = int(lengths.max())
    trailing = features[0].shape[1:]
    padded = np.zeros((len(features), longest) + trailing, dtype=features[0].dtype)
    for b, array in enumerate(features):
        padded[b, : array.shape[0]] = array
    return Batch(
        ids=list(ids),
        features=padded,
        lengths=lengths,
        transcripts=(
            list(transcripts) if transcripts is not None else [None] * len(features)
        ),
    )


def load_features(
    entry: ManifestEntry, frontend: str, cmvn: Optional[CmvnStats] = None
) -> np.ndarray:
    """Model input for ``entry``: raw samples (wav) or CMVN-normalized FBANK (fbank)."""
    if frontend == "wav":
        if not is_waveform_path(entry.audio_path):
            raise FeatureError(
                f"{entry.utterance_id}: the wav frontend needs a WAV file"
            )
        return load_waveform(entry.audio_path).samples
    if is_waveform_path(entry.audio_path):
        frames = extract_fbank(load_waveform(entry.audio_path))
    else:
        frames = np.load(entry.audio_path)
    return apply_cmvn(frames, cmvn) if cmvn is not None else frames


def load_corpus_features(
    entries: Sequence[ManifestEntry],
    frontend: str,
    cmvn: Optional[CmvnStats] = None,
    workers: int = 1,
) -> Dict[str, np.ndarray]:
    """Model inputs keyed by utterance id; ``workers`` threads share the decoding."""
    if workers <= 1:
        arrays = [load_features(e, frontend, cmvn) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(lambda e: load_features(e, frontend, cmvn), entries))
    return {e.utterance_id: a for e, a in zip(entries, arrays)}


# ----------------------------------------------------------------------
# Synthetic tone corpus
# ----------------------------------------------------------------------


def tone_frequency(token_index: int) -> float:
    """Token k sounds at 300 + 40k Hz."""
    return TONE_BASE_HZ + TONE_STEP_HZ * token_index


def synthesize_utterance(
    token_indices: Sequence[int], rng: np.random.Generator
) -> np.ndarray:
    """Concatenated 120 ms tones plus Gaussian noise at 30 dB SNR."""
    n = int(round(TONE_SECONDS * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    tones = [
        TONE_AMPLITUDE * np.sin(2.0 * np.pi * tone_frequency(k) * t)
        for k in token_indices
    ]
    clean = np.concatenate(tones)
    signal_power = TONE_AMPLITUDE**2 / 2.0
    noise_std = np.sqrt(signal_power / 10.0 ** (SYNTH_SNR_DB / 10.0))
    return np.clip(clean + rng.normal(0.0, noise_std, size=clean.size), -1.0, 1.0)


def generate_synthetic_corpus(
    n_utts: int,
    vocab: Vocabulary,
    seed: int,
    out_dir: PathLike,
    min_tokens: int = 2,
    max_tokens: int = 10,
    manifest_name: str = "train.tsv",
) -> Tuple[Path, List[ManifestEntry]]:
    """Write ``n_utts`` WAV files plus a manifest; reproducible from ``seed``."""
    symbols = vocab.symbols()
    if len(symbols) < 2:
        raise VocabularyError("the synthetic corpus needs at least 2 non-blank tokens")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries: List[ManifestEntry] = []
    for u in range(n_utts):
        count = int(rng.integers(min_tokens, max_tokens + 1))
        indices = [int(i) for i in rng.integers(1, len(vocab), size=count)]
        samples = synthesize_utterance(indices, rng)
        utt_id = f"synth{u:05d}"
        wav_path = out / "wav" / f"{utt_id}.wav"
        write_wav(wav_path, samples, SAMPLE_RATE)
        entries.append(
            ManifestEntry(
                utt_id, f"wav/{utt_id}.wav", int(samples.size), vocab.decode(indices)
            )
        )
    manifest = out / manifest_name
    write_manifest(entries, manifest)
    vocab.save(out / "vocab.txt")
    logger.info("wrote %d synthetic utterances to %s", n_utts, out)
    return manifest, [
        ManifestEntry(e.utterance_id, str(out / e.audio_path), e.length, e.transcript)
        for e in entries
    ]
