"""Colored terminal output for training progress, reports and run history."""

from datetime import datetime
from typing import Optional

import colorama
from colorama import Fore, Style

from priorfill.models import REPORT_COLUMNS, AblationReport, MetricReport, StageRecord, TrainingStep

# Initialize colorama for cross-platform colored terminal output
colorama.init(autoreset=True)


# Status symbols
SYMBOL_SUCCESS = "✓"
SYMBOL_ERROR = "✗"
SYMBOL_SKIP = "⊙"
SYMBOL_PENDING = "→"


def print_header(title: str, width: int = 60) -> None:
    """
    Print a formatted header.

    Args:
        title: Header title
        width: Width of the header line
    """
    print(f"\n{Style.BRIGHT}{Fore.CYAN}{'=' * width}{Style.RESET_ALL}")
    print(f"{Style.BRIGHT}{Fore.CYAN}{title}{Style.RESET_ALL}")
    print(f"{Style.BRIGHT}{Fore.CYAN}{'=' * width}{Style.RESET_ALL}\n")


def print_section(title: str) -> None:
    print(f"{Style.BRIGHT}{Fore.CYAN}{'=' * 80}{Style.RESET_ALL}")
    print(f"{Style.BRIGHT}{Fore.CYAN}{title}{Style.RESET_ALL}")
    print(f"{Style.BRIGHT}{Fore.CYAN}{'=' * 80}{Style.RESET_ALL}")


def print_error(message: str) -> None:
    print(f"{Fore.RED}{SYMBOL_ERROR} Error: {message}{Style.RESET_ALL}")


def print_success(message: str) -> None:
    print(f"{Fore.GREEN}{SYMBOL_SUCCESS} {message}{Style.RESET_ALL}")


def print_warning(message: str) -> None:
    print(f"{Fore.YELLOW}{SYMBOL_SKIP} Warning: {message}{Style.RESET_ALL}")


def print_info(message: str) -> None:
    print(f"{Fore.CYAN}{SYMBOL_PENDING} {message}{Style.RESET_ALL}")


def format_progress(entry: TrainingStep, total: int) -> str:
    """
    Format one training-progress line.

    Args:
        entry: Logged step (0-indexed)
        total: Total number of steps in the stage
    """
    current = entry.step + 1
    percentage = (current / total * 100) if total > 0 else 0
    return (
        f"{Fore.CYAN}[{entry.stage} {current}/{total} - {percentage:.0f}%]{Style.RESET_ALL} "
        f"loss {entry.loss:.5f}  lr {entry.lr:.2e}"
    )


def print_progress(entry: TrainingStep, total: int, every: int = 50) -> None:
    """Print a progress line every `every` steps and on the last step."""
    if entry.step % every == 0 or entry.step + 1 == total:
        print(format_progress(entry, total))


def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def format_metric_report(report: MetricReport) -> str:
    """Render a metric report as an aligned table, one row per domain."""
    headers = ["domain", *(c.upper().replace("_", "-") for c in REPORT_COLUMNS), "N"]
    rows = [["all", *(_cell(v) for v in report.row().values()), str(report.n_samples)]]
    for domain, values in sorted(report.per_domain.items()):
        n = values.get("n")
        rows.append([domain, *(_cell(values.get(c)) for c in REPORT_COLUMNS), "" if n is None else str(int(n))])
    lines = _table(headers, rows)
    if report.incomplete:
        lines.append(f"{Fore.YELLOW}{SYMBOL_SKIP} Incomplete: {len(report.missing)} outputs missing{Style.RESET_ALL}")
    return "\n".join(lines)


def format_ablation_report(report: AblationReport) -> str:
    columns = report.columns
    headers = ["variant", *columns, "seed"]
    rows = [[row.variant, *(_cell(row.metrics.get(c)) for c in columns), str(row.seed)] for row in report.rows]
    return "\n".join(_table(headers, rows))


def _table(headers: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(str(r[i])) for r in [headers, *rows]) for i in range(len(headers))]
    lines = [
        f"{Style.BRIGHT}" + "  ".join(h.ljust(w) for h, w in zip(headers, widths)) + f"{Style.RESET_ALL}",
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    return lines


def print_metric_report(report: MetricReport) -> None:
    print(format_metric_report(report))


def print_ablation_report(report: AblationReport) -> None:
    print_header(f"Ablation - {report.preset}")
    print(format_ablation_report(report))


# ============================================================================
# History Command Output Functions
# ============================================================================


def print_history(run_dir: str, records: list[StageRecord]) -> None:
    """
    Print the stage records of a run directory.

    This provides much more detail than the training output.
    """
    print_header("PriorFill - Run History", width=80)
    print(f"  📂 Run directory: {run_dir}")
    print(f"  🧩 Stages recorded: {len(records)}")
    print()

    for record in records:
        _print_stage_detail(record)
        print()


def _print_stage_detail(record: StageRecord) -> None:
    """Print detailed information for a single stage."""
    timestamp = datetime.fromisoformat(record.timestamp)
    print_section(f"Stage: {record.stage}")
    print(f"  📅 Run Date: {timestamp.strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"  ⏱️  Duration: {record.duration_seconds:.2f} seconds")
    print(f"  🎲 Seed: {record.seed}")
    print(f"  💾 Checkpoint: {record.checkpoint_path}")
    print(f"  🔑 Content hash: {record.content_hash[:16]}")
    if record.final_loss is not None:
        print(f"  📉 Final loss: {record.final_loss:.6f}")
    if record.log_path:
        print(f"  📝 Loss log: {record.log_path}")
    print(f"  🔧 PriorFill Version: {record.priorfill_version}")
    print(f"  🔥 Torch Version: {record.torch_version}")

    if record.upstream_hashes:
        print(f"\n  {Fore.WHITE}Upstream checkpoints:{Style.RESET_ALL}")
        for name, value in sorted(record.upstream_hashes.items()):
            print(f"    {SYMBOL_PENDING} {name}: {value[:16]}")

    if record.frozen_hashes:
        print(f"\n  {Fore.WHITE}Frozen parameters (verified unchanged):{Style.RESET_ALL}")
        for name, value in sorted(record.frozen_hashes.items()):
            print(f"    {Fore.GREEN}{SYMBOL_SUCCESS}{Style.RESET_ALL} {name}: {value[:16]}")
