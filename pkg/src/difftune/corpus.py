"""Synthetic corpus assembly plus PPM + manifest export/import.

The manifest is a CSV with one record per image (filename, tag, seed);
the tag is a pattern name for pair members, a class name for labeled
images, and "train" for training scenes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

from .errors import ConfigError
from .ppm import read_ppm, write_ppm
from .synthbench import (
    CLASS_NAMES,
    ContrastivePair,
    LabeledSet,
    PATTERNS,
    VisualPattern,
    gen_labeled_set,
    gen_pairs,
    gen_training_set,
)

MANIFEST_NAME = "manifest.csv"


@dataclass
class Corpus:
    train_images: list
    train_seeds: list
    pairs: list
    labeled: LabeledSet


def build_corpus(
    train_count: int, pairs_per_pattern: int, labeled_count: int, seed: int
) -> Corpus:
    """Deterministically generate the full corpus for one seed."""
    train_images, train_seeds = gen_training_set(train_count, seed)
    pairs = gen_pairs(pairs_per_pattern * len(PATTERNS), seed)
    labeled = gen_labeled_set(labeled_count, seed)
    return Corpus(
        train_images=train_images, train_seeds=train_seeds, pairs=pairs, labeled=labeled
    )


def save_corpus(corpus: Corpus, out_dir) -> str:
    """Write every image as PPM plus the sidecar manifest; returns its path."""
    for sub in ("train", "pairs", "labeled"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    records = []
    for i, (img, seed) in enumerate(zip(corpus.train_images, corpus.train_seeds)):
        name = f"train/train_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), img)
        records.append((name, "train", seed))
    for m, pair in enumerate(corpus.pairs):
        for side, img in (("a", pair.image_a), ("b", pair.image_b)):
            name = f"pairs/pair_{m:05d}_{side}.ppm"
            write_ppm(os.path.join(out_dir, name), img)
            records.append((name, pair.pattern.value, pair.seed))
    for i, (img, label, seed) in enumerate(
        zip(corpus.labeled.images, corpus.labeled.labels, corpus.labeled.seeds)
    ):
        name = f"labeled/labeled_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), img)
        records.append((name, CLASS_NAMES[label], seed))
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "tag", "seed"])
        writer.writerows(records)
    return manifest


def load_corpus(root) -> Corpus:
    """Rebuild a Corpus from a directory written by save_corpus."""
    manifest = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise ConfigError(f"no {MANIFEST_NAME} under {root}; run gen-data first")
    pattern_names = {p.value for p in PATTERNS}
    train_images, train_seeds = [], []
    labeled = LabeledSet(images=[], labels=[], seeds=[])
    pair_sides: dict[str, dict] = {}
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            name, tag, seed = row["filename"], row["tag"], int(row["seed"])
            img = read_ppm(os.path.join(root, name))
            if tag == "train":
                train_images.append(img)
                train_seeds.append(seed)
            elif tag in pattern_names:
                stem, side = name.rsplit("_", 1)
                entry = pair_sides.setdefault(stem, {"tag": tag, "seed": seed})
                entry[side.split(".")[0]] = img
            elif tag in CLASS_NAMES:
                labeled.images.append(img)
                labeled.labels.append(CLASS_NAMES.index(tag))
                labeled.seeds.append(seed)
            else:
                raise ConfigError(f"{manifest}: unknown tag {tag!r} for {name}")
    pairs = []
    for stem in sorted(pair_sides):
        entry = pair_sides[stem]
        if "a" not in entry or "b" not in entry:
            raise ConfigError(f"{manifest}: pair {stem} is missing a side")
        pairs.append(
            ContrastivePair(
                image_a=entry["a"],
                image_b=entry["b"],
                pattern=VisualPattern(entry["tag"]),
                seed=entry["seed"],
                background=None,
            )
        )
    return Corpus(
        train_images=train_images, train_seeds=train_seeds, pairs=pairs, labeled=labeled
    )
