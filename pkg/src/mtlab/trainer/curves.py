"""Per-epoch training records and their CSV form."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from mtlab.errors import DatasetFormatError
from mtlab.losses import COMPONENTS, LossBundle

CSV_COLUMNS = ("epoch", "split", "l_total", "l_classif", "l_segm", "l_recon", "l_detect",
               "metric_name", "metric_value")
NA = "NA"


@dataclass
class EpochRecord:
    epoch: int
    split: str
    losses: LossBundle
    metric_name: str
    metric_value: float | None


@dataclass
class TrainingCurve:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def rows(self, split: str) -> list[EpochRecord]:
        return [r for r in self.records if r.split == split]

    def series(self, split: str, column: str) -> list:
        """One value per epoch: a loss column (``l_total``, ``l_segm``...) or ``metric``."""
        out = []
        for r in self.rows(split):
            out.append(r.metric_value if column == "metric" else getattr(r.losses, column))
        return out

    @property
    def epochs(self) -> list[int]:
        return sorted({r.epoch for r in self.records})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        fmt = lambda v: NA if v is None else repr(float(v))  # noqa: E731
        for r in self.records:
            comps = [fmt(getattr(r.losses, "l_" + c)) for c in COMPONENTS]
            w.writerow([r.epoch, r.split, fmt(r.losses.l_total), *comps, r.metric_name,
                        fmt(r.metric_value)])
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, text: str, source: str = "<csv>") -> "TrainingCurve":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise DatasetFormatError(f"{source}: line 1: expected header {','.join(CSV_COLUMNS)}")
        parse = lambda v: None if v == NA else float(v)  # noqa: E731
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise DatasetFormatError(f"{source}: line {lineno}: expected "
                                         f"{len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                losses = LossBundle(*(parse(v) for v in row[3:7]), l_total=parse(row[2]))
                records.append(EpochRecord(int(row[0]), row[1], losses, row[7], parse(row[8])))
            except ValueError as exc:
                raise DatasetFormatError(f"{source}: line {lineno}: {exc}") from exc
        curve = cls(records)
        curve.check_contiguous(source)
        return curve

    def check_contiguous(self, source: str = "<curve>") -> None:
        for split in sorted({r.split for r in self.records}):
            epochs = [r.epoch for r in self.rows(split)]
            if epochs != list(range(1, len(epochs) + 1)):
                raise DatasetFormatError(f"{source}: epochs for split '{split}' are not "
                                         f"contiguous from 1: {epochs[:10]}")

    @classmethod
    def load(cls, path) -> "TrainingCurve":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DatasetFormatError(f"missing curve file: {path}") from None
        return cls.from_csv(text, str(path))
