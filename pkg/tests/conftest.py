"""Shared fixture builders for tiny on-disk datasets."""

import json

import numpy as np
import pytest

from verbsense import corpus, features


def make_samples(rows):
    """rows: list of (id, query, verb, target, split, feature_row)."""
    return tuple(
        corpus.Sample(id=r[0], query_phrase=r[1], english_verb=r[2],
                      target_verb=r[3], split=r[4], feature_row=r[5])
        for r in rows
    )


TINY_ROWS = [
    ("a1", "riding a horse", "ride", "reiten", "train", 0),
    ("a2", "riding a bike", "ride", "fahren", "train", 1),
    ("a3", "riding the bus", "ride", "fahren", "val", 2),
    ("a4", "riding a pony", "ride", "reiten", "test", 3),
]


@pytest.fixture
def tiny_manifest():
    return corpus.DatasetManifest(language="de", samples=make_samples(TINY_ROWS))


@pytest.fixture
def tiny_manifest_file(tmp_path, tiny_manifest):
    path = tmp_path / "manifest.jsonl"
    corpus.write_manifest(tiny_manifest, path)
    return path


def write_features(path, data):
    store = features.FeatureStore(data=np.asarray(data, dtype=np.float32))
    features.write_feature_store(store, path)
    return store


def write_embeddings(path, entries, dim):
    lines = [f"{len(entries)} {dim}"]
    for token, vec in entries.items():
        lines.append(token + " " + " ".join(repr(float(x)) for x in vec))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_jsonl(path, objs):
    with path.open("w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    return path
