from __future__ import annotations

import logging

from rich.console import Console
from rich.table import Table

from dlgmoe.harness.harness_schema import AccountingReport, EvalReport, ReportRow
from dlgmoe.model.accounting_service import count_params, encoder_frames, estimate_flops
from dlgmoe.model.model_schema import DlgMoeConfig

logger = logging.getLogger(__name__)


def build_report(
    config: DlgMoeConfig, t_frames: int, chunk_size: int | None = None
) -> AccountingReport:
    """Parameter and FLOP figures for every k a frame can activate."""
    counts = count_params(config)
    rows = [
        ReportRow(
            k=k,
            activated_params=counts.activated_at(k),
            flops=estimate_flops(config, t_frames, k, chunk_size),
        )
        for k in range(1, config.experts_in_routed_group + 1)
    ]
    return AccountingReport(
        moe_type=config.moe_type,
        t_frames=t_frames,
        encoder_frames=encoder_frames(config, t_frames),
        chunk_size=chunk_size,
        total_params=counts.total,
        per_expert_params=counts.per_expert,
        rows=rows,
    )


def _millions(n: int) -> str:
    return f"{n / 1e6:.2f}M"


def _giga(n: int) -> str:
    return f"{n / 1e9:.2f}G"


def accounting_table(report: AccountingReport) -> Table:
    table = Table(
        title=f"{report.moe_type} model, {report.t_frames} input frames "
        f"({report.encoder_frames} encoder frames)"
    )
    table.add_column("k", justify="right")
    table.add_column("total params", justify="right")
    table.add_column("activated params", justify="right")
    table.add_column("FLOPs", justify="right")
    table.add_column("FLOPs / top-1", justify="right")
    base = report.rows[0].flops if report.rows else 1
    for row in report.rows:
        table.add_row(
            str(row.k),
            _millions(report.total_params),
            _millions(row.activated_params),
            _giga(row.flops),
            f"{row.flops / base:.3f}",
        )
    return table


def eval_table(report: EvalReport) -> Table:
    title = f"k={report.k}" + (f", routed to {report.override}" if report.override else "")
    table = Table(title=title)
    table.add_column("subset")
    table.add_column("utts", justify="right")
    table.add_column("S/I/D", justify="right")
    table.add_column("TER", justify="right")
    table.add_column("routing acc.", justify="right")
    for key, counts in report.error_counts.items():
        routing = report.routing_accuracy_by_class.get(key)
        if key == "all":
            routing = report.routing_accuracy
        table.add_row(
            key,
            str(counts.utterances),
            f"{counts.substitutions}/{counts.insertions}/{counts.deletions}",
            f"{report.token_error_rate[key]:.4f}",
            "-" if routing is None else f"{routing:.4f}",
        )
    return table


def print_table(table: Table, console: Console | None = None) -> None:
    (console or Console(stderr=True)).print(table)
