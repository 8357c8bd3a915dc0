"""Forward/backward transfer and the append-only run ledger."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

LEDGER_VERSION = 1
CSV_FIELDS = ("stage", "epoch", "task", "split", "metric", "value")


class LedgerError(RuntimeError):
    pass


def compute_fwt(curve: Sequence[float]) -> tuple[float, int]:
    """Best success over a stage's evaluation checkpoints and its (earliest) index."""
    if len(curve) == 0:
        raise ValueError("empty success curve")
    best, arg = curve[0], 0
    for i, v in enumerate(curve):
        if v > best:
            best, arg = v, i
    return float(best), arg


def compute_bwt(fwt: Sequence[float], revisit: Sequence[float | None], k: int | None = None) -> float:
    """Mean of (S_i - F_i) over the k-1 earlier stages (k is 1-based)."""
    k = len(fwt) + 1 if k is None else k
    if k < 2:
        raise ValueError("backward transfer needs at least two stages")
    if len(fwt) < k - 1 or len(revisit) < k - 1:
        raise ValueError(f"need F and S for {k - 1} earlier stages, got {len(fwt)} and {len(revisit)}")
    diffs = []
    for i in range(k - 1):
        if revisit[i] is None:
            raise ValueError(f"missing revisit success for stage {i + 1}")
        diffs.append(revisit[i] - fwt[i])
    return sum(diffs) / len(diffs)


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """Mean and population std; NaN for an empty input."""
    v = [float(x) for x in values if x is not None and not math.isnan(x)]
    if not v:
        return float("nan"), float("nan")
    m = sum(v) / len(v)
    return m, math.sqrt(sum((x - m) ** 2 for x in v) / len(v))


class RunLedger:
    """Stage records for one curriculum run, persisted as ledger.json + metrics.csv.

    Records can only be appended. Wall-clock timings go to a separate
    ``timing.json`` so the ledger and CSV stay byte-identical across reruns.
    """

    def __init__(self, path: str | os.PathLike | None = None, config: Mapping | None = None):
        self.path = Path(path) if path is not None else None
        self.config = copy.deepcopy(dict(config or {}))
        self._stages: list[dict] = []
        self._rows: list[tuple] = []
        self._timing: list[dict] = []
        self.header: dict = {}

    @property
    def stages(self) -> tuple[dict, ...]:
        return tuple(copy.deepcopy(s) for s in self._stages)

    def __len__(self) -> int:
        return len(self._stages)

    def append(self, record: Mapping, rows: Iterable[tuple] = (), wall_clock: float | None = None) -> None:
        rec = copy.deepcopy(dict(record))
        if rec.get("stage") != len(self._stages) + 1:
            raise LedgerError(f"stage {rec.get('stage')} appended out of order (have {len(self._stages)})")
        for split in rec.get("success", []):
            for suite in split.get("suites", {}).values():
                for v in suite.values():
                    if not 0.0 <= v <= 1.0:
                        raise LedgerError(f"success value {v} outside [0, 1]")
        if rec["stage"] < 2 and rec.get("bwt") is not None:
            raise LedgerError("BWT is undefined for the first stage")
        self._stages.append(rec)
        self._rows.extend(tuple(r) for r in rows)
        self._timing.append({"stage": rec["stage"], "wall_clock_s": wall_clock})
        if self.path is not None:
            self.save()

    def stage(self, k: int) -> dict:
        return copy.deepcopy(self._stages[k - 1])

    def find_suite(self, suite_id: str) -> dict:
        for s in self._stages:
            if s["suite_id"] == suite_id:
                return copy.deepcopy(s)
        raise LedgerError(f"suite {suite_id!r} is not in the ledger")

    def fwt(self) -> list[float]:
        return [s["fwt"] for s in self._stages]

    def bwt(self) -> list[float | None]:
        return [s.get("bwt") for s in self._stages]

    def rows(self) -> list[tuple]:
        return list(self._rows)

    # ------------------------------------------------------------------ persistence

    def to_json(self) -> dict:
        return {"ledger_version": LEDGER_VERSION, "header": self.header, "config": self.config,
                "stages": self._stages}

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self._rows:
            w.writerow([_fmt(x) for x in r])
        return buf.getvalue()

    def save(self) -> Path:
        if self.path is None:
            raise LedgerError("ledger has no directory")
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "ledger.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        (self.path / "metrics.csv").write_text(self.csv_text())
        (self.path / "timing.json").write_text(json.dumps(self._timing, indent=2))
        return self.path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunLedger":
        path = Path(path)
        try:
            doc = json.loads((path / "ledger.json").read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise LedgerError(f"cannot read ledger in {path}: {exc}") from exc
        if doc.get("ledger_version") != LEDGER_VERSION:
            raise LedgerError(f"unsupported ledger version {doc.get('ledger_version')!r}")
        led = cls(None, doc.get("config", {}))
        led.header = doc.get("header", {})
        led._stages = doc["stages"]
        csv_path = path / "metrics.csv"
        if csv_path.exists():
            led._rows = [tuple(_parse(r)) for r in csv.DictReader(csv_path.open())]
        led.path = path
        return led


def _fmt(x):
    if isinstance(x, float):
        return repr(float(x))
    return x


def _parse(r: Mapping[str, str]) -> tuple:
    epoch = r["epoch"]
    return (int(r["stage"]), int(epoch) if epoch not in ("", "None") else None, r["task"], r["split"],
            r["metric"], float(r["value"]))


def read_metrics_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
