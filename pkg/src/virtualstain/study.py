"""Tally of the pathologist adjudication study (Improvement / Concordance / Discordance)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable

VERDICTS = ("I", "C", "D")
VERDICT_NAMES = {"I": "Improvement", "C": "Concordance", "D": "Discordance"}


@dataclass(frozen=True)
class AdjudicationRecord:
    case_id: int
    pathologist_id: str
    verdict: str

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}, got {self.verdict!r}")
        if not 1 <= int(self.case_id) <= 16:
            raise ValueError(f"case_id must lie in 1..16, got {self.case_id}")


def percent(count: int, n: int) -> Decimal:
    """``count / n * 100`` rounded half-up to one decimal."""
    return (Decimal(count) * 100 / Decimal(n)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


@dataclass
class Tally:
    per_pathologist: dict[str, dict[str, int]]
    overall: dict[str, int]
    n: int

    @property
    def percentages(self) -> dict[str, Decimal]:
        return {v: percent(self.overall[v], self.n) for v in VERDICTS}

    def table(self) -> str:
        """Aligned text table: one row per pathologist, then the overall counts and percentages."""
        names = sorted(self.per_pathologist)
        lines = [f"{'':<12}" + "".join(f"{v:>8}" for v in VERDICTS)]
        for p in names:
            lines.append(f"{p:<12}" + "".join(f"{self.per_pathologist[p][v]:>8d}" for v in VERDICTS))
        lines.append(f"{'overall':<12}" + "".join(f"{self.overall[v]:>8d}" for v in VERDICTS))
        pct = self.percentages
        lines.append(f"{'percent':<12}" + "".join(f"{str(pct[v]):>8}" for v in VERDICTS))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", *VERDICTS])
        for p in sorted(self.per_pathologist):
            w.writerow([p, *(self.per_pathologist[p][v] for v in VERDICTS)])
        w.writerow(["overall", *(self.overall[v] for v in VERDICTS)])
        w.writerow(["percent", *(str(self.percentages[v]) for v in VERDICTS)])
        return buf.getvalue()


def tally_study(records: Iterable[AdjudicationRecord]) -> Tally:
    records = list(records)
    if not records:
        raise ValueError("no adjudication records")
    per: dict[str, dict[str, int]] = {}
    overall = dict.fromkeys(VERDICTS, 0)
    for r in records:
        if r.verdict not in VERDICTS:
            raise ValueError(f"invalid verdict {r.verdict!r}")
        per.setdefault(r.pathologist_id, dict.fromkeys(VERDICTS, 0))[r.verdict] += 1
        overall[r.verdict] += 1
    return Tally(per, overall, len(records))


def read_records(path) -> list[AdjudicationRecord]:
    """Records from a ``case_id,pathologist_id,verdict`` CSV file."""
    return parse_records(Path(path).read_text())


def parse_records(text: str) -> list[AdjudicationRecord]:
    reader = csv.DictReader(io.StringIO(text))
    need = {"case_id", "pathologist_id", "verdict"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise ValueError(f"CSV header must contain {sorted(need)}")
    return [AdjudicationRecord(int(row["case_id"]), row["pathologist_id"].strip(), row["verdict"].strip()) for row in reader]


def table1_records() -> list[AdjudicationRecord]:
    """The 48 adjudications of the kidney study (16 cases x 3 pathologists)."""
    text = resources.files("virtualstain.data").joinpath("table1.csv").read_text()
    return parse_records(text)
