"""Evaluation protocols: retrieval, zero-shot classification, captioning,
similarity heatmaps, and quadrant-localization statistics."""

from __future__ import annotations

import csv

import numpy as np

from .data import parse_region_caption, parse_scene_caption
from .heads import Region
from .imageio import write_heatmap_pgm
from .metrics import MetricError, bleu4, build_cider_stats, cider_d, recall_at_k
from .objectives import token_accuracy
from .lm import build_caption_batch


class EvalError(ValueError):
    pass


def _batched(n, batch):
    for i in range(0, n, batch):
        yield slice(i, min(i + batch, n))


def embed_corpus(model, corpus, long_text=False, batch=64):
    """(image embeddings, text embeddings) as unit-norm numpy (N, E)."""
    max_len = model.cfg.max_text_long if long_text else model.cfg.max_text
    v_rows, t_rows = [], []
    for sl in _batched(len(corpus), batch):
        v_rows.append(model.embed_images(corpus.images[sl]).numpy())
        ids = [corpus.vocab.encode(r.caption) for r in corpus.records[sl]]
        t_rows.append(model.encode_texts(ids, max_len=max_len).numpy())
    return np.concatenate(v_rows), np.concatenate(t_rows)


def retrieval_eval(model, corpus, ks=(1, 5, 10), long_text=False, batch=64):
    """Recall@K in both directions over the full pairwise similarity matrix."""
    v, t = embed_corpus(model, corpus, long_text=long_text, batch=batch)
    sims = v @ t.T
    return {
        "i2t": recall_at_k(sims, ks),
        "t2i": recall_at_k(sims.T, ks),
        "n": len(corpus),
        "long_text": bool(long_text),
    }


def zero_shot_classify(model, image, class_names, templates, vocab):
    """Argmax cosine between the image embedding and template-averaged
    class-name text embeddings; ties go to the lower class index."""
    if not class_names:
        raise EvalError("empty class list")
    if not templates:
        raise EvalError("empty template list")
    for tpl in templates:
        if tpl.count("{}") != 1:
            raise EvalError(f"template {tpl!r} needs exactly one placeholder")
    img_emb = model.embed_images(np.asarray(image)[None]).numpy()[0]
    proto = []
    for name in class_names:
        ids = [vocab.encode(tpl.format(name)) for tpl in templates]
        embs = model.encode_texts(ids).numpy()
        m = embs.mean(axis=0)
        n = np.linalg.norm(m)
        if n == 0.0:
            raise EvalError(f"zero-norm class prototype for {name!r}")
        proto.append(m / n)
    sims = np.stack(proto) @ img_emb
    return int(np.argmax(sims))


ZERO_SHOT_TEMPLATES = ("a {}", "the {}")


def zero_shot_eval(model, corpus, templates=ZERO_SHOT_TEMPLATES):
    """Accuracy on single-shape images, classes = region texts seen in data."""
    classes = sorted({text for r in corpus.records for _, text in r.regions})
    singles = [(i, r) for i, r in enumerate(corpus.records)
               if len(r.regions) == 1]
    if not singles:
        raise EvalError("no single-shape images to classify")
    # class names drop the leading article for template insertion
    names = [c[2:] if c.startswith("a ") else c for c in classes]
    hits = 0
    for i, rec in singles:
        pred = zero_shot_classify(model, corpus.images[i], names, templates,
                                  corpus.vocab)
        hits += classes[pred] == rec.regions[0][1]
    return {"accuracy": hits / len(singles), "n": len(singles),
            "classes": len(classes)}


# ---------------------------------------------------------------------------
# heatmaps

def similarity_heatmap(model, image, text_ids, stage):
    heat = model.heatmap(image, text_ids, stage)
    if np.max(np.abs(heat)) > 1.0 + 1e-5:
        raise EvalError("heatmap entries outside [-1, 1]")
    return heat


def save_heatmap(heat, out_base):
    """Writes <base>.pgm (affine [-1,1] -> [0,255]) and <base>.csv (raw)."""
    write_heatmap_pgm(out_base + ".pgm", np.clip(heat, -1.0, 1.0))
    with open(out_base + ".csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(heat):
            writer.writerow([f"{v:.8f}" for v in row])


def _quadrant_of_cell(y, x, grid):
    return (2 if y >= grid / 2 else 0) + (1 if x >= grid / 2 else 0)


def _quadrant_of_box(box):
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    return (2 if cy >= 0.5 else 0) + (1 if cx >= 0.5 else 0)


def heatmap_quadrant_accuracy(model, corpus, record_idxs, stage):
    """Fraction of region queries whose heatmap argmax lands in the
    ground-truth quadrant."""
    grid = model.cfg.grid
    hits = total = 0
    for i in record_idxs:
        rec = corpus.records[i]
        for box, text in rec.regions:
            heat = model.heatmap(corpus.images[i], corpus.vocab.encode(text),
                                 stage)
            y, x = np.unravel_index(int(np.argmax(heat)), heat.shape)
            hits += _quadrant_of_cell(y, x, grid) == _quadrant_of_box(box)
            total += 1
    if total == 0:
        raise EvalError("no region queries")
    return {"accuracy": hits / total, "n": total}


# ---------------------------------------------------------------------------
# captioning

def caption_eval(model, corpus, stage, mode="greedy", beam_k=5, max_new=40):
    """Sentence-level BLEU@4 / CIDEr-D of generated whole-image captions."""
    vocab = corpus.vocab
    refs_tokens = [[r.caption.split()] for r in corpus.records]
    stats = build_cider_stats(refs_tokens)
    bleus, ciders, cands = [], [], []
    for i, rec in enumerate(corpus.records):
        ids = model.generate(corpus.images[i], stage, mode=mode,
                             beam_k=beam_k, max_new=max_new)
        cand = vocab.decode(ids).split() if ids else []
        cands.append(" ".join(cand))
        if not cand:
            bleus.append(0.0)
            ciders.append(0.0)
            continue
        bleus.append(bleu4(cand, refs_tokens[i]))
        ciders.append(cider_d(cand, refs_tokens[i], stats))
    return {
        "bleu4": float(np.mean(bleus)),
        "cider_d": float(np.mean(ciders)),
        "meteor": "unsupported",
        "rouge": "unsupported",
        "n": len(corpus.records),
        "samples": cands[:8],
    }


def caption_token_accuracy(model, corpus, idxs=None, stage=1, batch=32):
    """Teacher-forced next-token accuracy over caption positions."""
    idxs = list(range(len(corpus))) if idxs is None else list(idxs)
    vocab, cfg = corpus.vocab, model.cfg
    hits = total = 0
    for start in range(0, len(idxs), batch):
        part = idxs[start:start + batch]
        images = corpus.images[part]
        ids = [vocab.encode(corpus.records[i].caption) for i in part]
        fm = model.feature_maps(images)
        prefix = model.caption_prefix(fm, stage)
        toks, mask = build_caption_batch(vocab, ids, cfg.max_text)
        logits = model.caption_logits(prefix, toks)
        acc = token_accuracy(logits, toks, mask)
        n = int(mask.sum())
        hits += acc * n
        total += n
    return hits / total if total else 0.0


def region_caption_accuracy(model, corpus, record_idxs, mode="greedy",
                            beam_k=5, max_new=8):
    """Fraction of regions whose generated caption names the right color
    AND shape (stage-2 captioning path)."""
    vocab = corpus.vocab
    hits = total = 0
    samples = []
    for i in record_idxs:
        rec = corpus.records[i]
        for box, text in rec.regions:
            want = parse_region_caption(text)
            ids = model.generate(corpus.images[i], 2, region=Region(*box),
                                 mode=mode, beam_k=beam_k, max_new=max_new)
            got = vocab.decode(ids) if ids else ""
            words = set(got.split())
            ok = want is not None and want[0] in words and want[1] in words
            hits += ok
            total += 1
            if len(samples) < 8:
                samples.append({"want": text, "got": got})
    if total == 0:
        raise EvalError("no regions to caption")
    return {"accuracy": hits / total, "n": total, "samples": samples}


def whole_caption_grammar_rate(model, corpus, record_idxs, stage,
                               mode="greedy", beam_k=5, max_new=40):
    """Fraction of generated whole-image captions the grammar parser accepts."""
    vocab = corpus.vocab
    ok = 0
    samples = []
    for i in record_idxs:
        ids = model.generate(corpus.images[i], stage, mode=mode,
                             beam_k=beam_k, max_new=max_new)
        text = vocab.decode(ids) if ids else ""
        good = parse_scene_caption(text) is not None
        ok += good
        if len(samples) < 8:
            samples.append(text)
    return {"rate": ok / len(record_idxs), "n": len(record_idxs),
            "samples": samples}
