"""
Display management for w2vj.

Renders run summaries, step and evaluation tables, score reports and the
verification suite through rich.
"""

from typing import Any, Mapping, Optional, Sequence, Tuple

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from ..core.finetune import EvalResult
from ..core.oracles import CtcOracleResult, SuiteResult
from ..core.scoring import ScoreReport


class DisplayManager:
    """Manages display output for w2vj."""

    def __init__(self, console: Console, verbose: bool = False) -> None:
        self.console = console
        self.verbose = verbose

    def show_run_start(self, title: str, settings: Mapping[str, Any]) -> None:
        """Show the settings a run starts with."""
        table = Table(show_header=False, box=None)
        table.add_column("Setting", style="cyan")
        table.add_column("Value", style="white")
        for key, value in settings.items():
            table.add_row(key, str(value))
        self.console.print(
            Panel(
                table,
                border_style="blue",
                title=f"[bold]{title}[/bold]",
                title_align="left",
            )
        )

    def show_steps(self, records: Sequence[Mapping[str, Any]], every: int = 1) -> None:
        """Tabulate training metric records, one row per ``every`` steps."""
        if not records:
            return
        columns = [key for key in records[0] if key != "wall_ms" or self.verbose]
        table = Table(title="[bold]Training Steps[/bold]")
        for column in columns:
            style = "cyan" if column == "step" else "white"
            table.add_column(column, justify="right", style=style)
        for record in records:
            if int(record["step"]) % every and record is not records[-1]:
                continue
            table.add_row(*(_fmt(record.get(column)) for column in columns))
        self.console.print(table)

    def show_evaluations(
        self, evaluations: Sequence[EvalResult], averaged: Optional[EvalResult] = None
    ) -> None:
        table = Table(title="[bold]Dev Evaluations[/bold]")
        table.add_column("Step", justify="right", style="cyan")
        table.add_column("Dev loss", justify="right")
        table.add_column("CER", justify="right", style="green")
        table.add_column("WER", justify="right", style="green")
        for result in evaluations:
            table.add_row(str(result.step), *_eval_cells(result))
        if averaged is not None:
            table.add_row("[bold]averaged[/bold]", *_eval_cells(averaged))
        self.console.print(table)

    def show_score_reports(
        self, reports: Sequence[ScoreReport], average: Optional[float] = None
    ) -> None:
        unit = reports[0].unit.upper() if reports else ""
        table = Table(title=f"[bold]{unit}ER[/bold]")
        for column in ("Set", "S", "I", "D", "N"):
            table.add_column(column, justify="right" if column != "Set" else "left")
        table.add_column("Error rate", justify="right", style="green")
        for report in reports:
            counts = report.counts
            table.add_row(
                report.name or "-",
                str(counts.substitutions),
                str(counts.insertions),
                str(counts.deletions),
                str(counts.reference_length),
                f"{report.error_rate:.4f}",
            )
        if average is not None and len(reports) > 1:
            table.add_row("[bold]average[/bold]", "", "", "", "", f"{average:.4f}")
        self.console.print(table)

    def show_gradcheck(self, results: Sequence[SuiteResult]) -> None:
        table = Table(title="[bold]Gradient Checks[/bold]")
        table.add_column("Fragment", style="cyan")
        table.add_column("Seed", justify="right")
        table.add_column("Max rel. error", justify="right")
        table.add_column("Result")
        for result in results:
            expectation = "" if result.expect_pass else " (expected fail)"
            status = "[green]✅ ok[/green]" if result.ok else "[red]❌ FAIL[/red]"
            table.add_row(
                result.case,
                str(result.seed),
                f"{result.report.max_rel_error:.2e}",
                status + expectation,
            )
            if self.verbose and not result.ok:
                for check in result.report.checks:
                    if not check.passed:
                        error = f"{check.max_rel_error:.2e}"
                        detail = f"{result.case}: {check.name} rel. error {error}"
                        self.console.print(f"  [dim]{detail}[/dim]")
        self.console.print(table)

    def show_ctc_oracle(self, result: CtcOracleResult, tolerance: float) -> None:
        passed = result.passed(tolerance)
        status = "[green]✅ ok[/green]" if passed else "[red]❌ FAIL[/red]"
        self.console.print(
            f"CTC vs enumeration: {result.compared}/{result.trials} admissible trials, "
            f"max |Δ| = {result.max_abs_error:.2e} {status}"
        )

    def show_error(self, message: str) -> None:
        """Show error message."""
        self.console.print(f"\n[red]❌ Error: {message}[/red]")

    def show_warning(self, message: str) -> None:
        """Show warning message."""
        self.console.print(f"\n[yellow]⚠️  Warning: {message}[/yellow]")

    def show_success(self, message: str) -> None:
        """Show success message."""
        self.console.print(f"\n[green]✅ {message}[/green]")


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return "" if value is None else str(value)


def _eval_cells(result: EvalResult) -> Tuple[str, str, str]:
    return _fmt(result.dev_loss), _fmt(result.dev_cer), _fmt(result.dev_wer)
