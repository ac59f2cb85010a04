"""Synthetic corpus generation, vocabulary, tokenizer, and manifests.

Scenes are 32x32 images with 1-4 colored shapes placed in distinct
quadrants over varied dark backgrounds. Captions come from a closed
grammar ("a red circle in the top left and ..."); each shape also yields a
region-description pair with its bounding box. Everything is fully
determined by the seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .imageio import write_u8_ppm


class DataError(ValueError):
    pass


COLORS = {
    "red": (230, 30, 30),
    "green": (30, 200, 60),
    "blue": (40, 80, 230),
    "yellow": (235, 220, 40),
}
SHAPES = ("circle", "square", "triangle")
QUADRANT_PHRASES = ("the top left", "the top right",
                    "the bottom left", "the bottom right")

N_PROMPT_SLOTS = 64  # reserved [CAP_i] id block, fixed independent of config

RESERVED = (["<pad>", "<bos>", "<eos>", "<unk>", "[EMB]", "[CAP]"]
            + [f"[CAP_{i}]" for i in range(1, N_PROMPT_SLOTS + 1)])

GRAMMAR_WORDS = sorted(
    {"a", "and", "in", "the", "top", "bottom", "left", "right"}
    | set(COLORS) | set(SHAPES))


class Vocabulary:
    """Contiguous id space: reserved specials first, then word tokens."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:len(RESERVED)] != RESERVED:
            raise DataError("vocabulary must start with the reserved block")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.n_reserved = len(RESERVED)
        self._word_ids = {t: i for i, t in enumerate(tokens)
                          if i >= self.n_reserved}

    @classmethod
    def default(cls):
        return cls(RESERVED + GRAMMAR_WORDS)

    def __len__(self):
        return len(self.tokens)

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)
    emb = property(lambda self: 4)
    cap = property(lambda self: 5)

    def encode(self, text, max_len=None):
        """Lowercased whitespace tokens -> ids (unknown -> UNK), truncated."""
        ids = [self._word_ids.get(w, self.unk) for w in text.lower().split()]
        if max_len is not None:
            ids = ids[:max_len]
        return ids

    def decode(self, ids):
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.tokens, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(json.load(fh))


# ---------------------------------------------------------------------------
# grammar

def region_text(color, shape):
    return f"a {color} {shape}"


def scene_caption(shapes):
    """shapes: [(color, shape, quadrant)] in quadrant order."""
    parts = [f"a {c} {s} in {QUADRANT_PHRASES[q]}" for c, s, q in shapes]
    return " and ".join(parts)


def parse_region_caption(text):
    """'a COLOR SHAPE' -> (color, shape) or None."""
    toks = text.lower().split()
    if len(toks) == 3 and toks[0] == "a" and toks[1] in COLORS \
            and toks[2] in SHAPES:
        return toks[1], toks[2]
    return None


def parse_scene_caption(text):
    """Validate a full scene caption; returns [(color, shape, quadrant)] or None."""
    toks = text.lower().split()
    out = []
    i = 0
    vert = {"top": 0, "bottom": 1}
    horiz = {"left": 0, "right": 1}
    while i < len(toks):
        if out:
            if toks[i] != "and":
                return None
            i += 1
        part = toks[i:i + 7]
        if len(part) != 7:
            return None
        a, color, shape, in_, the, v, hz = part
        if (a != "a" or color not in COLORS or shape not in SHAPES
                or in_ != "in" or the != "the" or v not in vert
                or hz not in horiz):
            return None
        out.append((color, shape, vert[v] * 2 + horiz[hz]))
        i += 7
    return out if out else None


# ---------------------------------------------------------------------------
# records and manifests

@dataclass
class SampleRecord:
    image: str                       # path relative to the corpus dir
    caption: str
    regions: list                    # [(box (x0,y0,x1,y1), text)]

    def to_json(self):
        return json.dumps({
            "image": self.image,
            "caption": self.caption,
            "regions": [{"box": [round(v, 6) for v in box], "text": text}
                        for box, text in self.regions],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        try:
            regions = [(tuple(r["box"]), r["text"]) for r in d["regions"]]
            return cls(image=d["image"], caption=d["caption"], regions=regions)
        except KeyError as exc:
            raise DataError(f"manifest record missing field {exc}") from exc


def save_manifest(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_manifest(path):
    records = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(SampleRecord.from_json(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{ln}: bad JSON ({exc})") from exc
    return records


# ---------------------------------------------------------------------------
# rendering

def _draw_shape(img, shape, cx, cy, r, rgb):
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif shape == "square":
        s = r - 1
        mask = (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
    else:  # triangle, apex up
        dy = yy - (cy - r)
        mask = (dy >= 0) & (dy <= 2 * r) & (np.abs(xx - cx) * 2 <= dy)
    img[mask] = rgb
    ys, xs = np.nonzero(mask)
    return xs.min(), ys.min(), xs.max(), ys.max()


def _render_scene(rng, size, shapes_spec):
    """shapes_spec: [(color, shape, quadrant)] -> (u8 image, boxes)."""
    bg = rng.integers(25, 90, size=3)
    img = np.ones((size, size, 3), dtype=np.uint8) * bg.astype(np.uint8)
    half = size // 2
    boxes = []
    for color, shape, q in shapes_spec:
        qx0 = (q % 2) * half
        qy0 = (q // 2) * half
        r = int(rng.integers(4, 7))
        cx = qx0 + int(rng.integers(r + 1, half - r))
        cy = qy0 + int(rng.integers(r + 1, half - r))
        x0, y0, x1, y1 = _draw_shape(img, shape, cx, cy, r, COLORS[color])
        boxes.append((x0 / size, y0 / size, (x1 + 1) / size, (y1 + 1) / size))
    return img, boxes


def _sample_scene(rng):
    k = int(rng.integers(1, 5))
    quads = sorted(rng.choice(4, size=k, replace=False).tolist())
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(combos), size=k, replace=False)
    return [(combos[i][0], combos[i][1], q) for i, q in zip(picks, quads)]


def gen_synthetic_corpus(n, seed, out_dir, size=32, max_tries=1000):
    """Write n images + manifest.jsonl + vocab.json; returns the records.

    Captions are unique across the corpus and each image uses distinct
    (color, shape) pairs so region descriptions are unambiguous.
    """
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    if size < 24:
        raise DataError(f"image size {size} too small for shape placement")
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    seen = set()
    records = []
    for i in range(n):
        for _ in range(max_tries):
            spec = _sample_scene(rng)
            caption = scene_caption(spec)
            if caption not in seen:
                break
        else:
            raise DataError(f"could not find a fresh scene after {max_tries} "
                            f"tries (n={n} too large for the grammar)")
        seen.add(caption)
        img, boxes = _render_scene(rng, size, spec)
        rel = f"images/{i:05d}.ppm"
        write_u8_ppm(os.path.join(out_dir, rel), img)
        regions = [(box, region_text(c, s))
                   for box, (c, s, _) in zip(boxes, spec)]
        records.append(SampleRecord(image=rel, caption=caption, regions=regions))
    save_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    Vocabulary.default().save(os.path.join(out_dir, "vocab.json"))
    return records


# ---------------------------------------------------------------------------
# loading

class Corpus:
    """Manifest records with images preloaded as f32 (N, 3, S, S)."""

    def __init__(self, root, records, images, vocab):
        self.root = root
        self.records = records
        self.images = images
        self.vocab = vocab

    def __len__(self):
        return len(self.records)

    @classmethod
    def load(cls, root):
        from .imageio import read_image

        records = load_manifest(os.path.join(root, "manifest.jsonl"))
        if not records:
            raise DataError(f"empty manifest in {root}")
        vocab = Vocabulary.load(os.path.join(root, "vocab.json"))
        images = np.stack([read_image(os.path.join(root, r.image))
                           for r in records])
        return cls(root, records, images, vocab)
