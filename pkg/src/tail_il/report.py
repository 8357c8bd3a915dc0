"""Cross-seed aggregation of run ledgers and static figures.

The comparison table has one row per suite plus an ``average`` row and, for
every strategy, FWT and BWT as mean and std over seeds. Figures are written
with matplotlib's non-interactive Agg backend next to the CSVs they plot.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import LedgerError, RunLedger, mean_std

log = logging.getLogger(__name__)

AVERAGE = "average"
METRICS = ("fwt", "bwt")


@dataclass
class Table:
    """cells[(row, strategy, metric)] = (mean, std, n)."""

    rows: list[str]
    strategies: list[str]
    cells: dict = field(default_factory=dict)

    def get(self, row: str, strategy: str, metric: str):
        return self.cells.get((row, strategy, metric))


def _compat_key(led: RunLedger) -> tuple:
    h = led.header
    return (tuple(h.get("suites", [])), tuple(h.get("data_seeds", [])), h.get("eval_seed"))


def aggregate(ledgers: Sequence[RunLedger]) -> Table:
    """Mean and std over seeds of per-suite and averaged FWT/BWT, per strategy.

    All ledgers must share suites, data seeds, and eval seed. Missing BWT
    values (first stage, or absent revisits) are skipped with a warning.
    """
    if not ledgers:
        raise LedgerError("no ledgers given")
    keys = {_compat_key(l) for l in ledgers}
    if len(keys) > 1:
        raise LedgerError(f"incompatible ledgers (bench seeds or suites differ): {sorted(map(str, keys))}")
    suites = list(ledgers[0].header.get("suites") or [s["suite_id"] for s in ledgers[0].stages])
    per: dict[tuple, list[float]] = {}
    strategies: list[str] = []
    for led in ledgers:
        strat = led.header.get("strategy") or (led.stages[0]["strategy"] if len(led) else "?")
        if strat not in strategies:
            strategies.append(strat)
        fw, bw = [], []
        for s in led.stages:
            per.setdefault((s["suite_id"], strat, "fwt"), []).append(s["fwt"])
            fw.append(s["fwt"])
            if s.get("bwt") is None:
                if s["stage"] >= 2:
                    log.warning("ledger %s: stage %d has no BWT (missing revisits)", led.path, s["stage"])
                continue
            per.setdefault((s["suite_id"], strat, "bwt"), []).append(s["bwt"])
            bw.append(s["bwt"])
        if fw:
            per.setdefault((AVERAGE, strat, "fwt"), []).append(sum(fw) / len(fw))
        if bw:
            per.setdefault((AVERAGE, strat, "bwt"), []).append(sum(bw) / len(bw))
    table = Table(suites + [AVERAGE], strategies)
    for k, vals in per.items():
        m, s = mean_std(vals)
        table.cells[k] = (m, s, len(vals))
    return table


def _cell_text(c) -> str:
    if c is None:
        return "-"
    m, s, n = c
    return f"{m:.2f} ± {s:.2f}" if n > 1 else f"{m:.2f}"


def render(table: Table) -> str:
    """Fixed-width text table: rows are suites, columns strategy FWT/BWT."""
    head = ["suite"] + [f"{s} {m.upper()}" for s in table.strategies for m in METRICS]
    body = [[r] + [_cell_text(table.get(r, s, m)) for s in table.strategies for m in METRICS] for r in table.rows]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = lambda row: "  ".join(str(x).ljust(w) for x, w in zip(row, widths))  # noqa: E731
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [f"{s}:{m}:{stat}" for s in table.strategies for m in METRICS for stat in ("mean", "std", "n")]
    w.writerow(["suite"] + cols)
    for r in table.rows:
        row = [r]
        for s in table.strategies:
            for m in METRICS:
                c = table.get(r, s, m)
                row += ["", "", ""] if c is None else [repr(float(c[0])), repr(float(c[1])), c[2]]
        w.writerow(row)
    return buf.getvalue()


def read_table_csv(path: str | Path) -> Table:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "suite":
            raise LedgerError(f"{path} is not a comparison table")
        cols = [tuple(h.split(":")) for h in header[1:]]
        strategies: list[str] = []
        for s, _, _ in cols:
            if s not in strategies:
                strategies.append(s)
        table = Table([], strategies)
        for row in reader:
            table.rows.append(row[0])
            vals = dict(zip(cols, row[1:]))
            for s in strategies:
                for m in METRICS:
                    if vals.get((s, m, "mean"), "") != "":
                        table.cells[(row[0], s, m)] = (float(vals[(s, m, "mean")]), float(vals[(s, m, "std")]),
                                                       int(vals[(s, m, "n")]))
    return table


# --------------------------------------------------------------------------- figures


def curve_rows(led: RunLedger) -> list[dict]:
    """Flatten a ledger into per-epoch loss and per-checkpoint success rows on a global epoch axis."""
    rows = []
    offset = 0
    for s in led.stages:
        for e, (tr, va) in enumerate(zip(s["train_nll"], s["val_nll"]), start=1):
            rows.append({"stage": s["stage"], "suite": s["suite_id"], "global_epoch": offset + e,
                         "kind": "loss", "series": "train_nll", "value": tr})
            rows.append({"stage": s["stage"], "suite": s["suite_id"], "global_epoch": offset + e,
                         "kind": "loss", "series": "val_nll", "value": va})
        for ck in s["success"]:
            for suite, rates in ck["suites"].items():
                v = sum(rates.values()) / len(rates)
                rows.append({"stage": s["stage"], "suite": s["suite_id"], "global_epoch": offset + ck["epoch"],
                             "kind": "success", "series": suite, "value": v})
        offset += s["epochs"]
    return rows


def plot_ledger(led: RunLedger, out_dir: str | Path, fmt: str = "svg") -> list[Path]:
    """Loss and success curves for one curriculum, plus the CSV behind them."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = curve_rows(led)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["stage", "suite", "global_epoch", "kind", "series", "value"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    title = led.header.get("strategy", "")
    boundaries, acc = [], 0
    for s in led.stages:
        acc += s["epochs"]
        boundaries.append(acc)
    paths = []
    # matplotlib stamps a creation date into SVG metadata and salts element ids
    # randomly; drop the one and fix the other so reruns are byte-identical
    meta = {"Date": None} if fmt == "svg" else {}
    for kind, ylabel in (("loss", "NLL"), ("success", "success rate")):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        series = sorted({r["series"] for r in rows if r["kind"] == kind})
        for name in series:
            pts = [(r["global_epoch"], r["value"]) for r in rows if r["kind"] == kind and r["series"] == name]
            xs, ys = zip(*pts) if pts else ((), ())
            ax.plot(xs, ys, marker="o" if kind == "success" else None, ms=3, lw=1.2, label=name)
        for b in boundaries[:-1]:
            ax.axvline(b, color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("epoch (across stages)")
        ax.set_ylabel(ylabel)
        if kind == "success":
            ax.set_ylim(-0.05, 1.05)
        ax.set_title(f"{title} {kind}".strip())
        ax.legend(fontsize=7, loc="best")
        fig.tight_layout()
        p = out / f"{kind}_curves.{fmt}"
        with matplotlib.rc_context({"svg.hashsalt": "tail-il"}):
            fig.savefig(p, metadata=meta)
        plt.close(fig)
        paths.append(p)
    return paths


def plot_sweep(rows: Sequence[dict], out_dir: str | Path, fmt: str = "svg") -> Path:
    """Rank vs. mean FWT, one line per adapter method."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        pts = sorted((int(r["rank"]), float(r["mean_fwt"])) for r in rows if r["method"] == method)
        ax.plot(*zip(*pts), marker="o", label=method)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("rank / bottleneck size")
    ax.set_ylabel("mean FWT")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    p = out / f"rank_sweep.{fmt}"
    with matplotlib.rc_context({"svg.hashsalt": "tail-il"}):
        fig.savefig(p, metadata={"Date": None} if fmt == "svg" else {})
    plt.close(fig)
    return p
