"""Procedural fine-grained image pairs, labeled shape sets, and probes.

Scenes are simple geometric shapes rasterized on plain backgrounds at
32x32. All geometry tests use integer arithmetic on a uint8 canvas, so
regeneration is bit-stable across platforms; float images are derived from
the byte canvas with the same [0,255] -> [-1,1] map the PPM reader uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .encoder import global_embedding_array
from .errors import ConfigError, ShapeError
from .rng import RngStream
from .tensor import Tensor

IMAGE_SIZE = 32

BACKGROUNDS = ((30, 30, 34), (12, 24, 48), (20, 40, 28), (44, 26, 22))
OBJECT_COLORS = (
    (224, 48, 48),
    (48, 200, 72),
    (64, 96, 232),
    (232, 212, 56),
    (204, 64, 204),
    (60, 204, 212),
    (240, 240, 240),
    (240, 144, 48),
)

CLASS_NAMES = ("disk", "square", "triangle", "diamond", "ring", "cross", "xmark", "frame")

BAR_ANGLES = (0, 45, 90, 135)


class VisualPattern(str, Enum):
    ORIENTATION = "orientation"
    QUANTITY = "quantity"
    COLOR = "color"
    POSITION = "position"
    STRUCTURE = "structure"


PATTERNS = tuple(VisualPattern)


@dataclass
class ContrastivePair:
    image_a: Tensor
    image_b: Tensor
    pattern: VisualPattern
    seed: int
    background: tuple


@dataclass
class LabeledSet:
    images: list
    labels: list  # int indices into CLASS_NAMES
    seeds: list


# --- integer rasterizer ----------------------------------------------------


def _canvas(background) -> np.ndarray:
    c = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    c[:, :] = background
    return c


_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
_YY = _YY.astype(np.int64)
_XX = _XX.astype(np.int64)


def _paint(canvas, mask, color):
    canvas[mask] = color


def _shape_mask(kind: str, cx: int, cy: int, size: int) -> np.ndarray:
    dx = _XX - cx
    dy = _YY - cy
    if kind == "disk":
        return dx * dx + dy * dy <= size * size
    if kind == "square":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size)
    if kind == "triangle":
        return (np.abs(dy) <= size) & (2 * np.abs(dx) <= dy + size)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= size
    if kind == "ring":
        rr = dx * dx + dy * dy
        inner = max(size - 2, 1)
        return (rr <= size * size) & (rr > inner * inner)
    if kind == "cross":
        return ((np.abs(dx) <= 1) & (np.abs(dy) <= size)) | (
            (np.abs(dy) <= 1) & (np.abs(dx) <= size)
        )
    if kind == "xmark":
        box = np.maximum(np.abs(dx), np.abs(dy)) <= size
        return box & ((np.abs(dx - dy) <= 1) | (np.abs(dx + dy) <= 1))
    if kind == "frame":
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        return (cheb <= size) & (cheb > size - 2)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _bar_mask(angle: int, cx: int, cy: int, half_len: int, half_width: int) -> np.ndarray:
    dx = _XX - cx
    dy = _YY - cy
    if angle == 0:
        return (np.abs(dx) <= half_len) & (np.abs(dy) <= half_width)
    if angle == 90:
        return (np.abs(dy) <= half_len) & (np.abs(dx) <= half_width)
    if angle == 45:
        return (np.abs(dx - dy) <= half_width * 2) & (np.abs(dx + dy) <= half_len * 2)
    if angle == 135:
        return (np.abs(dx + dy) <= half_width * 2) & (np.abs(dx - dy) <= half_len * 2)
    raise ConfigError(f"unsupported bar angle {angle}")


def bytes_to_image(canvas: np.ndarray) -> Tensor:
    """Map a uint8 canvas linearly from [0, 255] to [-1, 1]."""
    return Tensor(canvas.astype(np.float64) / 255.0 * 2.0 - 1.0)


def image_to_bytes(image: Tensor) -> np.ndarray:
    """Quantize a [-1, 1] image back onto the byte grid."""
    scaled = np.rint((image.data + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


# --- generators -------------------------------------------------------------


def _pick(rng: RngStream, options):
    return options[rng.integers(0, len(options) - 1)]


def _distinct_pair(rng: RngStream, count: int) -> tuple[int, int]:
    first, second = (int(i) for i in rng.choice(count, 2))
    return first, second


def gen_pair(pattern: VisualPattern, seed: int) -> ContrastivePair:
    """Two scenes differing only in the pattern's attribute; deterministic."""
    rng = RngStream(seed).split("pair", pattern.value)
    bg = _pick(rng, BACKGROUNDS)
    a = _canvas(bg)
    b = _canvas(bg)

    if pattern is VisualPattern.ORIENTATION:
        color = _pick(rng, OBJECT_COLORS)
        cx = rng.integers(12, 19)
        cy = rng.integers(12, 19)
        half_len = rng.integers(8, 10)
        half_width = rng.integers(1, 2)
        ia, ib = _distinct_pair(rng, len(BAR_ANGLES))
        _paint(a, _bar_mask(BAR_ANGLES[ia], cx, cy, half_len, half_width), color)
        _paint(b, _bar_mask(BAR_ANGLES[ib], cx, cy, half_len, half_width), color)

    elif pattern is VisualPattern.QUANTITY:
        color = _pick(rng, OBJECT_COLORS)
        radius = rng.integers(2, 3)
        n = rng.integers(2, 4)
        slots = [(6 + 10 * (k % 3), 6 + 10 * (k // 3)) for k in range(9)]
        jitter = [(rng.integers(-1, 1), rng.integers(-1, 1)) for _ in range(9)]
        order = [int(i) for i in rng.permutation(9)]
        for idx in order[: n + 1]:
            cx = slots[idx][0] + jitter[idx][0]
            cy = slots[idx][1] + jitter[idx][1]
            mask = _shape_mask("disk", cx, cy, radius)
            if idx != order[n]:
                _paint(a, mask, color)
            _paint(b, mask, color)

    elif pattern is VisualPattern.COLOR:
        kind = _pick(rng, ("disk", "square", "diamond", "triangle"))
        cx = rng.integers(10, 21)
        cy = rng.integers(10, 21)
        size = rng.integers(4, 7)
        ca, cb = _distinct_pair(rng, len(OBJECT_COLORS))
        mask = _shape_mask(kind, cx, cy, size)
        _paint(a, mask, OBJECT_COLORS[ca])
        _paint(b, mask, OBJECT_COLORS[cb])

    elif pattern is VisualPattern.POSITION:
        kind = _pick(rng, ("disk", "square", "diamond", "triangle"))
        color = _pick(rng, OBJECT_COLORS)
        size = rng.integers(3, 5)
        slots = [(8 + 8 * (k % 3), 8 + 8 * (k // 3)) for k in range(9)]
        sa, sb = _distinct_pair(rng, 9)
        ja = (rng.integers(-1, 1), rng.integers(-1, 1))
        jb = (rng.integers(-1, 1), rng.integers(-1, 1))
        _paint(a, _shape_mask(kind, slots[sa][0] + ja[0], slots[sa][1] + ja[1], size), color)
        _paint(b, _shape_mask(kind, slots[sb][0] + jb[0], slots[sb][1] + jb[1], size), color)

    else:  # STRUCTURE: same two bars, different arrangement
        color = _pick(rng, OBJECT_COLORS)
        cx = rng.integers(13, 18)
        cy = rng.integers(13, 18)
        arrangements = (
            ((0, 0), (0, 0)),       # plus
            ((0, -5), (0, 1)),      # tee
            ((3, 5), (-3, -1)),     # ell
            ((0, 6), (0, -6)),      # split (disconnected)
        )
        ia, ib = _distinct_pair(rng, len(arrangements))
        for canvas, (h_off, v_off) in ((a, arrangements[ia]), (b, arrangements[ib])):
            _paint(canvas, _bar_mask(0, cx + h_off[0], cy + h_off[1], 6, 1), color)
            _paint(canvas, _bar_mask(90, cx + v_off[0], cy + v_off[1], 6, 1), color)

    if np.array_equal(a, b):
        raise ShapeError(f"degenerate pair for {pattern.value} seed {seed}")
    return ContrastivePair(
        image_a=bytes_to_image(a),
        image_b=bytes_to_image(b),
        pattern=pattern,
        seed=seed,
        background=bg,
    )


def gen_labeled_image(class_idx: int, seed: int) -> Tensor:
    """One image of CLASS_NAMES[class_idx]; deterministic per seed."""
    rng = RngStream(seed).split("labeled", class_idx)
    bg = _pick(rng, BACKGROUNDS)
    color = _pick(rng, OBJECT_COLORS)
    size = rng.integers(4, 6)
    cx = rng.integers(10, 21)
    cy = rng.integers(10, 21)
    canvas = _canvas(bg)
    _paint(canvas, _shape_mask(CLASS_NAMES[class_idx], cx, cy, size), color)
    return bytes_to_image(canvas)


def gen_training_image(seed: int) -> Tensor:
    """One multi-object training scene; deterministic per seed."""
    rng = RngStream(seed).split("train-scene")
    bg = _pick(rng, BACKGROUNDS)
    canvas = _canvas(bg)
    count = rng.integers(1, 3)
    slots = [(6 + 10 * (k % 3), 6 + 10 * (k // 3)) for k in range(9)]
    order = [int(i) for i in rng.permutation(9)]
    for j in range(count):
        cx = slots[order[j]][0] + rng.integers(-2, 2)
        cy = slots[order[j]][1] + rng.integers(-2, 2)
        color = _pick(rng, OBJECT_COLORS)
        if rng.integers(0, 3) == 0:
            mask = _bar_mask(_pick(rng, BAR_ANGLES), cx, cy, rng.integers(4, 7), 1)
        else:
            mask = _shape_mask(_pick(rng, CLASS_NAMES), cx, cy, rng.integers(3, 5))
        _paint(canvas, mask, color)
    return bytes_to_image(canvas)


def gen_labeled_set(count: int, seed: int) -> LabeledSet:
    """Balanced labeled images: label i % len(CLASS_NAMES)."""
    images, labels, seeds = [], [], []
    for i in range(count):
        label = i % len(CLASS_NAMES)
        img_seed = _image_seed(seed, "labeled", i)
        images.append(gen_labeled_image(label, img_seed))
        labels.append(label)
        seeds.append(img_seed)
    return LabeledSet(images=images, labels=labels, seeds=seeds)


def _image_seed(corpus_seed: int, role: str, index: int) -> int:
    base = {"train": 1, "pairs": 2, "labeled": 3}[role]
    return ((corpus_seed * 1_000_003 + base * 101_159 + index) & ((1 << 62) - 1))


def gen_pairs(count: int, seed: int) -> list:
    """Held-out pairs interleaved across patterns: pair m has pattern m % 5."""
    pairs = []
    for m in range(count):
        pattern = PATTERNS[m % len(PATTERNS)]
        pairs.append(gen_pair(pattern, _image_seed(seed, "pairs", m)))
    return pairs


def gen_training_set(count: int, seed: int) -> tuple[list, list]:
    """Training images plus the per-image seeds that regenerate them."""
    seeds = [_image_seed(seed, "train", i) for i in range(count)]
    return [gen_training_image(s) for s in seeds], seeds


# --- evaluation probes -------------------------------------------------------


def pair_separation(encoder_model, pairs) -> float:
    """Mean over pairs of 1 - cos(global embedding a, global embedding b)."""
    if not pairs:
        raise ConfigError("pair_separation needs a nonempty pair list")
    total = 0.0
    for pair in pairs:
        ea = global_embedding_array(pair.image_a, encoder_model.params, encoder_model.config)
        eb = global_embedding_array(pair.image_b, encoder_model.params, encoder_model.config)
        total += 1.0 - float(ea @ eb)
    return total / len(pairs)


def pattern_separations(encoder_model, pairs) -> dict:
    """pair_separation broken out per pattern (plus 'all')."""
    buckets: dict[str, list] = {}
    for pair in pairs:
        buckets.setdefault(pair.pattern.value, []).append(pair)
    out = {name: pair_separation(encoder_model, group) for name, group in sorted(buckets.items())}
    out["all"] = pair_separation(encoder_model, pairs)
    return out


def knn_accuracy(ref_emb, ref_labels, query_emb, query_labels, k: int) -> float:
    """Cosine kNN classification accuracy in percent; deterministic ties."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"k must be odd and >= 1, got {k}")
    if k > len(ref_labels):
        raise ConfigError(f"k={k} exceeds reference size {len(ref_labels)}")
    ref = np.asarray(ref_emb)
    ref = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    query = np.asarray(query_emb)
    query = query / np.linalg.norm(query, axis=1, keepdims=True)
    ref_labels = np.asarray(ref_labels)
    correct = 0
    sims = query @ ref.T
    for row, true_label in zip(sims, query_labels):
        top = np.argsort(-row, kind="stable")[:k]
        votes: dict[int, list] = {}
        for idx in top:
            votes.setdefault(int(ref_labels[idx]), []).append(float(row[idx]))
        # majority vote; ties broken by total similarity, then by class id
        best = max(votes.items(), key=lambda kv: (len(kv[1]), sum(kv[1]), -kv[0]))
        if best[0] == int(true_label):
            correct += 1
    return 100.0 * correct / len(query_labels)


def knn_retention(encoder_model, labeled: LabeledSet, k: int = 5) -> float:
    """kNN accuracy: first half of the set is reference, second half query.

    Labels cycle through the classes by index, so both halves stay balanced.
    """
    embs = np.stack(
        [
            global_embedding_array(img, encoder_model.params, encoder_model.config)
            for img in labeled.images
        ]
    )
    labels = np.asarray(labeled.labels)
    mid = len(labeled.images) // 2
    return knn_accuracy(embs[:mid], labels[:mid], embs[mid:], labels[mid:], k)


def _shift_image(image: Tensor, dx: int, dy: int) -> Tensor:
    padded = np.pad(image.data, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w, _ = image.shape
    return Tensor(padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w, :])


def augmentation_consistency(encoder_model, images, rng: RngStream, max_shift: int = 1) -> float:
    """Mean cosine between embeddings of two jittered variants per image."""
    total = 0.0
    for i, image in enumerate(images):
        jrng = rng.split("jitter", i)
        shifts = [jrng.integers(-max_shift, max_shift) for _ in range(4)] if max_shift else [0, 0, 0, 0]
        ea = global_embedding_array(
            _shift_image(image, shifts[0], shifts[1]), encoder_model.params, encoder_model.config
        )
        eb = global_embedding_array(
            _shift_image(image, shifts[2], shifts[3]), encoder_model.params, encoder_model.config
        )
        total += float(ea @ eb)
    return total / len(images)
