"""Dataset records, manifest I/O, split handling, and label vocabularies.

A dataset is a JSON-lines manifest in which every line describes one
(image, query phrase, English verb, target-language verb) record together
with its split tag and its row index into the image feature matrix.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

SPLITS = ("train", "val", "test")

# Normative JSON-lines keys, in writing order.
_MANIFEST_KEYS = ("id", "query", "verb", "target", "split", "row")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest files."""


@dataclass(frozen=True)
class Sample:
    """One dataset record.

    ``query_phrase`` is stored lowercased (applied at load time); the
    ``target_verb`` keeps its original casing because target-language
    capitalization can be meaningful.
    """

    id: str
    query_phrase: str
    english_verb: str
    target_verb: str
    split: str
    feature_row: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(
                f"sample {self.id!r}: unknown split {self.split!r} (expected one of {SPLITS})"
            )
        if self.feature_row < 0:
            raise ManifestError(
                f"sample {self.id!r}: negative feature_row {self.feature_row}"
            )


@dataclass(frozen=True)
class LabelVocab:
    """Ordered target-verb vocabulary with its inverse index."""

    labels: tuple[str, ...]
    index: dict[str, int] = field(compare=False)

    @property
    def size(self) -> int:
        return len(self.labels)

    def __contains__(self, token: str) -> bool:
        return token in self.index


@dataclass(frozen=True)
class DatasetManifest:
    """A full dataset: samples plus the sidecar references resolved by the CLI.

    ``feature_file`` and ``embedding_file`` are carried as opaque paths; the
    manifest file itself stores only the samples.
    """

    language: str
    samples: tuple[Sample, ...]
    feature_file: str | None = None
    embedding_file: str | None = None


def load_manifest(path, language: str = "de") -> DatasetManifest:
    """Read a JSON-lines manifest.

    Each line is an object with keys ``id``, ``query``, ``verb``, ``target``,
    ``split``, ``row``. Query phrases are lowercased on load; target verbs are
    left untouched. Raises :class:`ManifestError` with the offending line
    number on malformed lines and on duplicate ids.
    """
    path = Path(path)
    samples = []
    seen_ids = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            missing = [k for k in _MANIFEST_KEYS if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
            if not isinstance(obj["row"], int) or isinstance(obj["row"], bool):
                raise ManifestError(f"{path}:{lineno}: row must be an integer")
            try:
                sample = Sample(
                    id=str(obj["id"]),
                    query_phrase=str(obj["query"]).lower(),
                    english_verb=str(obj["verb"]),
                    target_verb=str(obj["target"]),
                    split=str(obj["split"]),
                    feature_row=obj["row"],
                )
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if sample.id in seen_ids:
                raise ManifestError(f"{path}:{lineno}: duplicate sample id {sample.id!r}")
            seen_ids.add(sample.id)
            samples.append(sample)
    return DatasetManifest(language=language, samples=tuple(samples))


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write samples as JSON-lines with the normative key order."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in manifest.samples:
            obj = {
                "id": s.id,
                "query": s.query_phrase,
                "verb": s.english_verb,
                "target": s.target_verb,
                "split": s.split,
                "row": s.feature_row,
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def build_label_vocab(samples) -> LabelVocab:
    """Collect the distinct target verbs, sorted lexicographically.

    Sorting makes the label indexing deterministic across runs regardless of
    sample order. Raises ``ManifestError`` on empty input.
    """
    samples = list(samples)
    if not samples:
        raise ManifestError("cannot build a label vocabulary from zero samples")
    labels = tuple(sorted({s.target_verb for s in samples}))
    return LabelVocab(labels=labels, index={t: i for i, t in enumerate(labels)})


def majority_label(samples) -> str:
    """Most frequent target verb; ties broken by the lexicographically smallest."""
    samples = list(samples)
    if not samples:
        raise ManifestError("cannot compute a majority label from zero samples")
    counts = Counter(s.target_verb for s in samples)
    top = max(counts.values())
    return min(t for t, c in counts.items() if c == top)


def filter_split(manifest: DatasetManifest, split: str):
    """Order-preserving list of the samples tagged with ``split``."""
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r} (expected one of {SPLITS})")
    return [s for s in manifest.samples if s.split == split]


def with_sidecar(manifest: DatasetManifest, language=None, feature_file=None,
                 embedding_file=None) -> DatasetManifest:
    """Return a copy with sidecar config fields filled in."""
    updates = {}
    if language is not None:
        updates["language"] = language
    if feature_file is not None:
        updates["feature_file"] = str(feature_file)
    if embedding_file is not None:
        updates["embedding_file"] = str(embedding_file)
    return replace(manifest, **updates)
