"""
Main CLI entry point for w2vj.

Provides commands for feature extraction, the synthetic corpus, pretraining,
fine-tuning, checkpoint averaging, decoding, scoring and the verification
suite.
"""

import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, List, Optional, Sequence

import click
import numpy as np
import typer
from rich.console import Console
from rich.panel import Panel

from .core.data import (
    BLANK,
    ManifestEntry,
    Vocabulary,
    build_vocab,
    generate_synthetic_corpus,
    load_corpus_features,
    load_manifest,
    write_manifest,
)
from .core.features import CmvnStats, estimate_cmvn, load_cmvn, save_cmvn
from .core.finetune import run_finetuning, transcribe
from .core.model import SpeechModel
from .core.oracles import (
    FRAGMENTS,
    NEGATIVE_CONTROL,
    ctc_oracle_grid,
    run_gradcheck_suite,
)
from .core.pretrain import run_pretraining
from .core.scoring import (
    UNITS,
    average_error_rates,
    pair_transcripts,
    read_transcripts,
    score_corpus,
    write_transcripts,
)
from .ui.display import DisplayManager
from .utils.checkpoints import average_checkpoints, load_checkpoint, save_checkpoint
from .utils.config import ConfigManager
from .utils.errors import ConfigError, ManifestError, ScoringError, VocabularyError
from .utils.logging import setup_logging

app = typer.Typer(
    name="w2vj",
    help="Self-supervised speech pretraining and CTC fine-tuning toolkit",
    add_completion=False,
    rich_markup_mode="rich",
)

# Global console for consistent styling
console = Console()

BANNER = """
[bold blue]w2vj[/bold blue]
[dim]wav2vec-style pretraining with FBANK or waveform frontends[/dim]
"""

# Input problems the user can fix by changing arguments or files
USAGE_ERRORS = (
    ConfigError,
    ManifestError,
    VocabularyError,
    ScoringError,
    FileNotFoundError,
)

DEFAULT_ALPHABET = "abcdefgh"

CONFIG_ACTIONS = (
    ("w2vj config --show", "Show resolved config"),
    ("w2vj config --init PATH", "Write a config file"),
)


def show_banner() -> None:
    """Display the w2vj banner."""
    console.print(Panel(BANNER.strip(), border_style="blue"))


@contextmanager
def _report_errors(verbose: bool) -> Iterator[None]:
    """Print failures the way every command does and map them to exit codes."""
    try:
        yield
    except (typer.Exit, click.ClickException, click.Abort):
        raise
    except Exception as e:
        if verbose:
            console.print_exception()
        else:
            console.print(f"[red]❌ Error: {e}[/red]")
        raise typer.Exit(1 if isinstance(e, USAGE_ERRORS) else 2)


def _settings(config_file: Optional[Path], **overrides: Any) -> ConfigManager:
    return ConfigManager(config_file, overrides=overrides)


def _require(value: str, key: str) -> str:
    if not value:
        raise ConfigError(
            f"{key} is required (flag, config file or W2VJ_{key.upper()})"
        )
    return value


def _cmvn(
    path: str, manifest: str, frontend: str, out_dir: Path, workers: int = 1
) -> Optional[CmvnStats]:
    """Given statistics, or statistics re-estimated on the training manifest.

    Only fbank runs estimate; wav runs get None.
    """
    if path:
        return load_cmvn(path)
    if frontend != "fbank":
        return None
    stats = _estimate(load_manifest(manifest), workers)
    target = out_dir / "cmvn.txt"
    save_cmvn(stats, target)
    console.print(
        f"[dim]CMVN estimated over {stats.frame_count} frames ({target})[/dim]"
    )
    return stats


def _estimate(entries: Sequence[ManifestEntry], workers: int) -> CmvnStats:
    features = load_corpus_features(entries, "fbank", workers=workers)
    return estimate_cmvn(features[e.utterance_id] for e in entries)


@app.command("extract-features")
def extract_features(
    manifest: Optional[str] = typer.Option(
        None, "--manifest", "-m", help="WAV manifest"
    ),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="Output directory"),
    config_file: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat TOML config"
    ),
    workers: Optional[int] = typer.Option(
        None, "--workers", help="Feature extraction threads"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """
    Compute 80-dim log mel-filterbank features.

    Writes one [code].npy[/code] matrix per utterance and a frames-unit manifest.
    """
    setup_logging(verbose)
    with _report_errors(verbose):
        run = _settings(config_file, manifest=manifest, out=out, workers=workers).config
        entries = load_manifest(_require(run.manifest, "manifest"))
        out_dir = Path(run.out)
        feats_dir = out_dir / "feats"
        feats_dir.mkdir(parents=True, exist_ok=True)
        features = load_corpus_features(entries, "fbank", workers=run.workers)
        converted: List[ManifestEntry] = []
        for entry in entries:
            frames = features[entry.utterance_id].astype(np.float32)
            path = feats_dir / f"{entry.utterance_id}.npy"
            np.save(path, frames)
            converted.append(
                ManifestEntry(
                    entry.utterance_id,
                    f"feats/{path.name}",
                    frames.shape[0],
                    entry.transcript,
                )
            )
        write_manifest(converted, out_dir / "manifest.tsv")
        console.print(
            f"[green]✅ Wrote {len(converted)} feature files to {feats_dir}[/green]"
        )


@app.command("estimate-cmvn")
def estimate_cmvn_command(
    out: Path = typer.Option(..., "--out", "-o", help="CMVN statistics file"),
    manifest: Optional[str] = typer.Option(
        None, "--manifest", "-m", help="WAV or FBANK manifest"
    ),
    config_file: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat TOML config"
    ),
    workers: Optional[int] = typer.Option(
        None, "--workers", help="Feature extraction threads"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Estimate global CMVN statistics over a training manifest."""
    setup_logging(verbose)
    with _report_errors(verbose):
        run = _settings(config_file, manifest=manifest, workers=workers).config
        entries = load_manifest(_require(run.manifest, "manifest"))
        stats = _estimate(entries, run.workers)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_cmvn(stats, out)
        console.print(
            f"[green]✅ CMVN over {stats.frame_count} frames written to {out}[/green]"
        )


@app.command("make-synth")
def make_synth(
    n: int = typer.Option(20, "--n", help="Training utterances"),
    dev_n: int = typer.Option(5, "--dev-n", help="Dev utterances"),
    seed: Optional[int] = typer.Option(
        None, "--seed", help="Random seed (default: config, then 0)"
    ),
    alphabet: str = typer.Option(
        DEFAULT_ALPHABET, "--alphabet", help="Token characters"
    ),
    out: Path = typer.Option(Path("synth"), "--out", "-o", help="Output directory"),
    config_file: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat TOML config"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """
    Generate the synthetic tone corpus.

    Each token is a 120 ms sine tone; the same seed gives identical corpora.
    """
    setup_logging(verbose)
    with _report_errors(verbose):
        if n <= 0 or dev_n < 0:
            raise ConfigError("--n must be positive and --dev-n non-negative")
        run_seed = _settings(config_file, seed=seed).config.seed
        vocab = Vocabulary([BLANK] + sorted(set(alphabet)))
        train, _ = generate_synthetic_corpus(
            n, vocab, run_seed, out, manifest_name="train.tsv"
        )
        if dev_n:
            generate_synthetic_corpus(
                dev_n, vocab, run_seed + 1, out / "dev", manifest_name="dev.tsv"
            )
        console.print(
            f"[green]✅ Synthetic corpus written to {out} "
            f"(manifest {train}, seed {run_seed})[/green]"
        )


@app.command()
def pretrain(
    manifest: Optional[str] = typer.Option(
        None, "--manifest", "-m", help="Training manifest"
    ),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="Run directory"),
    config_file: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat TOML config"
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed"),
    model_size: Optional[str] = typer.Option(None, "--model-size", help="toy | base"),
    frontend: Optional[str] = typer.Option(None, "--frontend", help="wav | fbank"),
    encoder: Optional[str] = typer.Option(
        None, "--encoder", help="transformer | conformer"
    ),
    steps: Optional[int] = typer.Option(None, "--steps", help="Pretraining updates"),
    cmvn: Optional[str] = typer.Option(
        None, "--cmvn", help="CMVN stats (fbank; estimated on --manifest if omitted)"
    ),
    workers: Optional[int] = typer.Option(
        None, "--workers", help="Feature loading threads"
    ),
    resume: bool = typer.Option(
        True, "--resume/--no-resume", help="Resume from last.ckpt"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """
    Self-supervised pretraining with the contrastive + diversity objective.
    """
    setup_logging(verbose)
    with _report_errors(verbose):
        settings = _settings(
            config_file,
            manifest=manifest,
            out=out,
            seed=seed,
            model_size=model_size,
            frontend=frontend,
            encoder=encoder,
            pretrain_steps=steps,
            cmvn=cmvn,
            workers=workers,
        )
        run = settings.config
        model_config = run.model_config()
        pretrain_config = run.pretrain_config()
        out_dir = Path(run.out)
        settings.dump(out_dir / "config.toml")
        display = DisplayManager(console, verbose)
        display.show_run_start(
            "Pretraining",
            {
                "frontend": run.frontend,
                "encoder": run.encoder,
                "steps": pretrain_config.max_steps,
                "seed": run.seed,
            },
        )
        train_manifest = _require(run.manifest, "manifest")
        frontend_kind = model_config.frontend.kind
        stats = _cmvn(run.cmvn, train_manifest, frontend_kind, out_dir, run.workers)
        result = run_pretraining(
            train_manifest,
            model_config,
            pretrain_config,
            out_dir,
            cmvn=stats,
            workers=run.workers,
            resume=resume,
        )
        records = [m.to_record() for m in result.history]
        display.show_steps(records, every=max(1, pretrain_config.max_steps // 10))
        display.show_success(f"Pretrained model written to {result.checkpoint}")


@app.command()
def finetune(
    manifest: Optional[str] = typer.Option(
        None, "--manifest", "-m", help="Labelled training manifest"
    ),
    dev_manifest: Optional[str] = typer.Option(
        None, "--dev-manifest", help="Dev manifest"
    ),
    vocab: Optional[str] = typer.Option(
        None, "--vocab", help="Vocabulary file (built from transcripts if omitted)"
    ),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="Run directory"),
    pretrained: Optional[str] = typer.Option(
        None, "--pretrained", help="Pretrained checkpoint (omit for a baseline)"
    ),
    config_file: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat TOML config"
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed"),
    model_size: Optional[str] = typer.Option(None, "--model-size", help="toy | base"),
    frontend: Optional[str] = typer.Option(None, "--frontend", help="wav | fbank"),
    encoder: Optional[str] = typer.Option(
        None, "--encoder", help="transformer | conformer"
    ),
    mask_position: Optional[str] = typer.Option(
        None, "--mask-position", help="pre | post"
    ),
    resource: Optional[str] = typer.Option(
        None, "--resource", help="low | high (evaluation cadence)"
    ),
    steps: Optional[int] = typer.Option(None, "--steps", help="Fine-tuning updates"),
    eval_every: Optional[int] = typer.Option(
        None, "--eval-every", help="Dev evaluation cadence"
    ),
    keep_top: Optional[int] = typer.Option(
        None, "--keep-top", help="Checkpoints kept for averaging"
    ),
    cmvn: Optional[str] = typer.Option(
        None, "--cmvn", help="CMVN stats (fbank; estimated on --manifest if omitted)"
    ),
    workers: Optional[int] = typer.Option(
        None, "--workers", help="Feature loading threads"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """
    CTC fine-tuning with pre-CNN or post-CNN masking.

    Keeps the best checkpoints by dev loss and writes their average.
    """
    setup_logging(verbose)
    with _report_errors(verbose):
        settings = _settings(
            config_file,
            manifest=manifest,
            dev_manifest=dev_manifest,
            vocab=vocab,
            out=out,
            pretrained=pretrained,
            seed=seed,
            model_size=model_size,
            frontend=frontend,
            encoder=encoder,
            mask_position=mask_position,
            resource=resource,
            finetune_steps=steps,
            eval_every=eval_every,
            keep_top=keep_top,
            cmvn=cmvn,
            workers=workers,
        )
        run = settings.config
        train_entries = load_manifest(_require(run.manifest, "manifest"))
        dev_entries = load_manifest(_require(run.dev_manifest, "dev_manifest"))
        if run.vocab:
            vocabulary = Vocabulary.load(run.vocab)
        else:
            vocabulary = build_vocab([train_entries])
        finetune_config = run.finetune_config()
        out_dir = Path(run.out)
        settings.dump(out_dir / "config.toml")
        vocabulary.save(out_dir / "vocab.txt")
        display = DisplayManager(console, verbose)
        display.show_run_start(
            "Fine-tuning",
            {
                "init": run.pretrained or "scratch",
                "mask position": finetune_config.mask_position,
                "steps": finetune_config.max_steps,
                "eval every": finetune_config.eval_every,
                "vocabulary": len(vocabulary),
            },
        )
        if not run.pretrained:
            display.show_warning(
                "no --pretrained checkpoint; training a from-scratch baseline"
            )
        result = run_finetuning(
            train_entries,
            dev_entries,
            vocabulary,
            finetune_config,
            out_dir,
            model_config=run.model_config(),
            pretrained=run.pretrained or None,
            cmvn=_cmvn(run.cmvn, run.manifest, run.frontend, out_dir, run.workers),
            workers=run.workers,
        )
        display.show_evaluations(result.evaluations, result.averaged_eval)
        display.show_success(
            f"Averaged model written to {result.averaged} (report {result.report})"
        )


@app.command("average-ckpt")
def average_ckpt(
    checkpoints: List[Path] = typer.Argument(..., help="Checkpoints to average"),
    out: Path = typer.Option(..., "--out", "-o", help="Averaged checkpoint"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Element-wise average of checkpoints with identical parameter sets."""
    setup_logging(verbose)
    with _report_errors(verbose):
        averaged = average_checkpoints(checkpoints)
        save_checkpoint(out, averaged.arrays, step=averaged.step, meta=averaged.meta)
        console.print(
            f"[green]✅ Averaged {len(checkpoints)} checkpoints into {out}[/green]"
        )


@app.command()
def decode(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Fine-tuned checkpoint"),
    out: Path = typer.Option(..., "--out", "-o", help="Hypothesis file (id<TAB>text)"),
    manifest: Optional[str] = typer.Option(
        None, "--manifest", "-m", help="Manifest to transcribe"
    ),
    vocab: Optional[str] = typer.Option(
        None, "--vocab", help="Vocabulary (default: from the checkpoint)"
    ),
    cmvn: Optional[str] = typer.Option(
        None, "--cmvn", help="CMVN statistics (default: from the checkpoint)"
    ),
    config_file: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat TOML config"
    ),
    workers: Optional[int] = typer.Option(
        None, "--workers", help="Feature loading threads"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """Greedy CTC decoding of every utterance in a manifest."""
    setup_logging(verbose)
    with _report_errors(verbose):
        run = _settings(
            config_file, manifest=manifest, vocab=vocab, cmvn=cmvn, workers=workers
        ).config
        entries = load_manifest(_require(run.manifest, "manifest"))
        loaded = load_checkpoint(checkpoint)
        if run.vocab:
            vocabulary = Vocabulary.load(run.vocab)
        elif "vocab" in loaded.meta:
            vocabulary = Vocabulary(loaded.meta["vocab"])
        else:
            raise ConfigError(f"{checkpoint} carries no vocabulary; pass --vocab")
        model = SpeechModel.from_checkpoint_arrays(loaded.arrays, loaded.meta)
        if "ctc_head.weight" not in model.params:
            raise ConfigError(
                f"{checkpoint} has no CTC head; decode a fine-tuned checkpoint"
            )
        if run.cmvn:
            stats: Optional[CmvnStats] = load_cmvn(run.cmvn)
        elif "cmvn" in loaded.meta:
            stats = CmvnStats.from_dict(loaded.meta["cmvn"])
        else:
            stats = None
        kind = model.config.frontend.kind
        features = load_corpus_features(entries, kind, stats, run.workers)
        hypotheses = {
            e.utterance_id: transcribe(model, features[e.utterance_id], vocabulary)
            for e in entries
        }
        out.parent.mkdir(parents=True, exist_ok=True)
        write_transcripts(hypotheses, out)
        console.print(
            f"[green]✅ Decoded {len(hypotheses)} utterances to {out}[/green]"
        )


@app.command()
def score(
    ref: List[Path] = typer.Option(
        ..., "--ref", help="Reference file(s) (id<TAB>text)"
    ),
    hyp: List[Path] = typer.Option(
        ..., "--hyp", help="Hypothesis file(s), paired with --ref in order"
    ),
    unit: str = typer.Option("char", "--unit", help="char | word"),
    strip_space: bool = typer.Option(
        False, "--strip-space", help="Ignore spaces for CER"
    ),
    normalize: bool = typer.Option(
        False, "--normalize", help="Lower-case and drop punctuation"
    ),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="JSON report"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """
    Corpus-pooled CER or WER.

    Several [code]--ref/--hyp[/code] pairs are scored separately and averaged.
    """
    setup_logging(verbose)
    with _report_errors(verbose):
        if unit not in UNITS:
            raise ConfigError(f"--unit must be one of {UNITS}, got {unit!r}")
        if len(ref) != len(hyp):
            raise ConfigError(f"{len(ref)} --ref files but {len(hyp)} --hyp files")
        reports = [
            score_corpus(
                pair_transcripts(read_transcripts(r), read_transcripts(h)),
                unit=unit,
                strip_space=strip_space,
                normalize=normalize,
                name=r.stem,
            )
            for r, h in zip(ref, hyp)
        ]
        average = average_error_rates(reports)
        DisplayManager(console, verbose).show_score_reports(reports, average)
        if out is not None:
            payload = {
                "sets": [r.to_dict() for r in reports],
                "average_error_rate": average,
            }
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


@app.command()
def gradcheck(
    fragment: Optional[List[str]] = typer.Option(
        None, "--fragment", "-f", help="Fragment(s) to check (default: all)"
    ),
    seeds: int = typer.Option(1, "--seeds", help="Number of seeds per fragment"),
    seed: int = typer.Option(0, "--seed", help="First seed"),
    tolerance: Optional[float] = typer.Option(
        None, "--tolerance", help="Override the per-fragment tolerance"
    ),
    ctc_trials: int = typer.Option(
        200, "--ctc-trials", help="CTC enumeration trials (0 to skip)"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """
    Run the finite-difference gradient checks and the CTC enumeration oracle.

    The negative control is expected to fail; anything else failing exits 2.
    """
    setup_logging(verbose)
    with _report_errors(verbose):
        names = list(fragment) if fragment else list(FRAGMENTS)
        unknown = [name for name in names if name not in FRAGMENTS]
        if unknown:
            raise ConfigError(
                f"unknown fragment(s) {unknown}; choose from {sorted(FRAGMENTS)}"
            )
        display = DisplayManager(console, verbose)
        seed_range = range(seed, seed + seeds)
        results = run_gradcheck_suite(names, seeds=seed_range, tolerance=tolerance)
        display.show_gradcheck(results)
        ok = all(r.ok for r in results)
        if ctc_trials > 0:
            oracle = ctc_oracle_grid(trials=ctc_trials, seed=seed)
            display.show_ctc_oracle(oracle, 1e-10)
            ok = ok and oracle.passed(1e-10)
        if not ok:
            display.show_error("verification suite failed")
            raise typer.Exit(2)
        checked = len([r for r in results if r.case != NEGATIVE_CONTROL])
        display.show_success(f"{checked} gradient checks passed")


@app.command()
def config(
    show: bool = typer.Option(
        False, "--show", "-s", help="Show the resolved configuration"
    ),
    init: Optional[Path] = typer.Option(
        None, "--init", help="Write the resolved configuration to a file"
    ),
    config_file: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Flat TOML config"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output"),
) -> None:
    """
    Inspect run configuration.

    Values come from defaults, the config file, W2VJ_* environment variables
    and command-line flags, in increasing precedence.
    """
    with _report_errors(verbose):
        show_banner()
        config_manager = ConfigManager(config_file)
        if init is not None:
            config_manager.dump(init)
            console.print(f"[green]✅ Configuration written to {init}[/green]")
        elif show:
            config_manager.show_config(console)
        else:
            console.print("[blue]📋 Configuration Management[/blue]")
            console.print("\n[dim]Available actions:[/dim]")
            for usage, action in CONFIG_ACTIONS:
                console.print(f"  [code]{usage:<24}[/code] - {action}")


@app.command()
def version() -> None:
    """Show w2vj version information."""
    from . import __version__

    show_banner()
    console.print(f"[blue]Version:[/blue] {__version__}")
    console.print("[blue]Python:[/blue] " + sys.version.split()[0])
    console.print("[blue]NumPy:[/blue] " + np.__version__)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on usage errors, 2 on runtime errors."""
    command = typer.main.get_command(app)
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = command.main(args=args, prog_name="w2vj", standalone_mode=False)
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        console.print("[red]Aborted.[/red]")
        return 1
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
