"""Per-iteration loss records."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("iteration", "l_reproj", "l_beta", "l_eps", "total", "lr")


@dataclass
class LossRecord:
    """Loss components of one optimizer iteration."""
    iteration: int
    l_reproj: float
    l_beta: float
    l_eps: float
    total: float
    lr: float
    ba_active: bool = False
    skipped: bool = False
    metadata: dict = field(default_factory=dict)


class FitLog:
    """Collects loss records and reports progress."""

    def __init__(self, name: str = "fit", log_every: int = 100):
        """
        Args:
            name: Label used in progress lines.
            log_every: Emit an INFO line every this many iterations (0 disables).
        """
        self.name = name
        self.log_every = log_every
        self.records: list[LossRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def track(
        self,
        iteration: int,
        l_reproj: float,
        l_beta: float,
        l_eps: float,
        total: float,
        lr: float,
        ba_active: bool = False,
        skipped: bool = False,
        metadata: dict | None = None,
    ) -> LossRecord:
        """Record one iteration and log it when due."""
        record = LossRecord(
            iteration=iteration,
            l_reproj=float(l_reproj),
            l_beta=float(l_beta),
            l_eps=float(l_eps),
            total=float(total),
            lr=float(lr),
            ba_active=ba_active,
            skipped=skipped,
            metadata=metadata or {},
        )
        self.records.append(record)
        if self.log_every and iteration % self.log_every == 0:
            logger.info(
                "%s iter %d: total=%.6g reproj=%.6g beta=%.6g eps=%.6g lr=%.3g%s",
                self.name, iteration, record.total, record.l_reproj, record.l_beta,
                record.l_eps, record.lr, " [ba]" if ba_active else "",
            )
        return record

    @property
    def first(self) -> LossRecord | None:
        return self.records[0] if self.records else None

    @property
    def last(self) -> LossRecord | None:
        return self.records[-1] if self.records else None

    def totals(self) -> list[float]:
        return [r.total for r in self.records]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                writer.writerow([r.iteration, repr(r.l_reproj), repr(r.l_beta), repr(r.l_eps), repr(r.total), repr(r.lr)])
