"""Dataset loading, preprocessing and deterministic sampling for SST-2 and QNLI."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from textcf.errors import IngestionError, InvalidInputError

DATASETS = ("sst2", "qnli")
SEP = "[SEP]"
PAIR_SEPARATOR = f" {SEP} "

# QNLI string labels -> classifier label ids; must match the fine-tuned model's head order
QNLI_LABELS = {"entailment": 0, "not_entailment": 1}

_WS = re.compile(r"\s+")
_LOWER_SEP = re.compile(re.escape(SEP.lower()))


@dataclass(frozen=True)
class ExampleRecord:
    id: str
    dataset: str
    gold_label: int
    text: str | None = None
    question: str | None = None
    sentence: str | None = None

    @property
    def classifier_input(self) -> str:
        if self.dataset == "qnli":
            return encode_pair(self.question, self.sentence)
        return self.text

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def preprocess(text: str) -> str:
    """Lowercase and collapse whitespace; the pair separator keeps its upper-case spelling."""
    out = _WS.sub(" ", text.lower()).strip()
    return _LOWER_SEP.sub(SEP, out)


def encode_pair(question: str, sentence: str) -> str:
    if not question or not sentence:
        raise InvalidInputError("both question and sentence must be non-empty")
    return f"{question}{PAIR_SEPARATOR}{sentence}"


def split_pair(encoded: str) -> tuple[str, str]:
    if PAIR_SEPARATOR not in encoded:
        raise InvalidInputError(f"no {SEP!r} separator in {encoded!r}")
    question, sentence = encoded.split(PAIR_SEPARATOR, 1)
    return question, sentence


def _read_rows(path: Path) -> list[dict]:
    if path.suffix == ".jsonl":
        with path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    with path.open(encoding="utf-8", newline="") as fh:
        # GLUE TSVs contain unescaped quotes
        return list(csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))


def _to_record(name: str, split: str, i: int, row: dict) -> ExampleRecord:
    rid = str(row.get("id", row.get("idx", row.get("index", row.get("row", i)))))
    rid = rid if rid.startswith(f"{name}-") else f"{name}-{split}-{rid}"
    label = row.get("gold_label", row.get("label"))
    if name == "sst2":
        return ExampleRecord(rid, name, int(label), text=preprocess(row.get("text", row.get("sentence", ""))))
    if isinstance(label, str) and not label.isdigit():
        label = QNLI_LABELS[label.strip()]
    return ExampleRecord(rid, name, int(label), question=preprocess(row["question"]),
                         sentence=preprocess(row["sentence"]))


def read_dataset(name: str, source: str | Path, split: str = "validation") -> list[ExampleRecord]:
    """All rows from a GLUE-format TSV, a JSONL file, or ``toy:<size>`` for the synthetic corpus."""
    if name not in DATASETS:
        raise InvalidInputError(f"unknown dataset {name!r}; choose from {DATASETS}")
    source = str(source)
    if source == "toy" or source.startswith("toy:"):
        from textcf.toy import toy_corpus

        size = int(source.split(":", 1)[1]) if ":" in source else 2000
        rows = toy_corpus(name, size)
    else:
        path = Path(source)
        if path.is_dir():
            folder = {"sst2": "SST-2", "qnli": "QNLI"}[name]
            fname = {"validation": "dev.tsv", "train": "train.tsv", "test": "test.tsv"}[split]
            path = path / folder / fname
        if not path.exists():
            raise IngestionError(f"{name} data not found at {path}")
        rows = _read_rows(path)
    records = [_to_record(name, split, i, row) for i, row in enumerate(rows)]
    return [r for r in records if (r.text if name == "sst2" else r.question and r.sentence)]


def load_dataset(name: str, n: int, seed: int, source: str | Path = "toy", split: str = "validation") -> list[ExampleRecord]:
    """Uniform sample of ``n`` records without replacement, fixed by ``seed``."""
    if n < 1:
        raise InvalidInputError("n must be positive")
    records = read_dataset(name, source, split)
    if n > len(records):
        raise InvalidInputError(f"requested {n} samples but {name} has only {len(records)} rows")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(records), size=n, replace=False)
    return [records[i] for i in idx]


def write_records(records: list[ExampleRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
