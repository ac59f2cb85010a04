"""Stage orchestration: freezing contracts, batch streams, training loops."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .heads import WHOLE, Region, embed_visual
from .lm import build_caption_batch
from .objectives import (caption_loss, clamp_tau, combined_loss, info_nce)
from .optim import Optimizer, lr_schedule

STAGES = ("one", "two_caption", "two_retrieval")
OBJECTIVES = ("both", "emb", "gen")

TRAINABLE = {
    "one": ("vision.", "lm.", "heads.h1.", "heads.h2.", "heads.h3.", "tau"),
    "two_caption": ("heads.h3.", "soft_prompts"),
    "two_retrieval": ("heads.h4.",),
}
BACKBONE = ("vision.", "lm.")

CSV_HEADER = "step,lr,loss_emb,loss_gen,loss_total,tau"


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "one"
    batch_size: int = 32
    steps: int = 800
    warmup: int = 80
    lr_backbone: float = 1.5e-3
    lr_projection: float = 1.5e-2
    weight_decay: float = 0.05
    seed: int = 0
    max_text: int = 50
    optimizer: str = "adamw"
    objective: str = "both"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainError(f"unknown stage {self.stage!r}")
        if self.objective not in OBJECTIVES:
            raise TrainError(f"unknown objective {self.objective!r}")
        if self.optimizer not in ("adamw", "lamb"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")
        if self.warmup > self.steps:
            raise TrainError(f"warmup {self.warmup} > steps {self.steps}")
        if self.lr_backbone <= 0 or self.lr_projection <= 0:
            raise TrainError("learning rates must be positive")
        if self.batch_size < 1:
            raise TrainError("batch size must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise TrainError(f"unknown train config keys {sorted(extra)}")
        return cls(**d)


def set_stage(model, stage):
    """Apply the freeze contract; returns (backbone, projection) groups."""
    prefixes = TRAINABLE[stage]
    backbone, projection = [], []
    for name, p in model.store.items():
        on = any(name == pre or name.startswith(pre) for pre in prefixes)
        p.set_trainable(on)
        if on:
            (backbone if name.startswith(BACKBONE) else projection).append(p)
    return backbone, projection


def init_soft_prompts(model, rng):
    """Warm-start prompts: trained [CAP] embedding replicated plus noise."""
    cap = model.store["lm.tok"].data[model.vocab.cap]
    n = model.cfg.n_prompts
    noise = rng.normal(0.0, 0.01, size=(n, cap.shape[0]))
    model.store["soft_prompts"].assign(np.tile(cap, (n, 1)) + noise)


# ---------------------------------------------------------------------------
# seeded batch streams

def stage1_batches(corpus, batch_size, seed):
    """Yields (images, caption_id_lists, n_duplicate_captions) forever."""
    rng = np.random.default_rng(seed)
    n = len(corpus)
    order = []
    while True:
        while len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        idx, order = order[:batch_size], order[batch_size:]
        captions = [corpus.records[i].caption for i in idx]
        ids = [corpus.vocab.encode(c) for c in captions]
        dups = len(captions) - len(set(captions))
        yield corpus.images[idx], ids, dups


def stage2_caption_batches(corpus, batch_size, seed):
    """1:1 alternating whole-image caption and region-description samples."""
    rng = np.random.default_rng(seed)
    counter = 0
    while True:
        imgs, regions, ids = [], [], []
        for _ in range(batch_size):
            rec_i = int(rng.integers(len(corpus)))
            rec = corpus.records[rec_i]
            if counter % 2 == 0 or not rec.regions:
                region, text = WHOLE, rec.caption
            else:
                box, text = rec.regions[int(rng.integers(len(rec.regions)))]
                region = Region(*box)
            imgs.append(corpus.images[rec_i])
            regions.append(region)
            ids.append(corpus.vocab.encode(text))
            counter += 1
        yield np.stack(imgs), regions, ids


def stage2_retrieval_batches(corpus, batch_size, seed):
    """Region pairs with distinct (color, shape) texts within each batch."""
    rng = np.random.default_rng(seed)
    by_text = {}
    for ri, rec in enumerate(corpus.records):
        for qi, (box, text) in enumerate(rec.regions):
            by_text.setdefault(text, []).append((ri, qi))
    classes = sorted(by_text)
    if not classes:
        raise TrainError("corpus has no region annotations")
    while True:
        picks = rng.permutation(len(classes))[:batch_size]
        imgs, regions, ids = [], [], []
        for ci in picks:
            text = classes[int(ci)]
            pool = by_text[text]
            ri, qi = pool[int(rng.integers(len(pool)))]
            box = corpus.records[ri].regions[qi][0]
            imgs.append(corpus.images[ri])
            regions.append(Region(*box))
            ids.append(corpus.vocab.encode(text))
        yield np.stack(imgs), regions, ids


# ---------------------------------------------------------------------------
# single steps

def train_step_stage1(model, images, ids_list, objective="both"):
    """Two forwards (embedding + captioning), one backward. Returns report."""
    store, vocab, cfg = model.store, model.vocab, model.cfg
    report = {"loss_emb": None, "loss_gen": None}
    with T.Tape():
        fm = model.feature_maps(images)
        l_emb = l_gen = None
        if objective in ("both", "emb"):
            v = embed_visual(store, fm, fine=False)
            t = model.encode_texts(ids_list)
            _, _, l_emb = info_nce(v, t, model.tau)
            report["loss_emb"] = l_emb.item()
        if objective in ("both", "gen"):
            prefix = model.caption_prefix(fm, 1)
            toks, mask = build_caption_batch(vocab, ids_list, cfg.max_text)
            logits = model.caption_logits(prefix, toks)
            l_gen = caption_loss(logits, toks, mask)
            report["loss_gen"] = l_gen.item()
        if objective == "both":
            total = combined_loss(l_emb, l_gen)
        else:
            total = l_emb if objective == "emb" else l_gen
        T.backward(total)
    report["loss_total"] = total.item()
    report["tau"] = float(model.tau.data)
    return report


def train_step_stage2_caption(model, images, regions, ids_list):
    store, vocab, cfg = model.store, model.vocab, model.cfg
    with T.Tape():
        fm = model.feature_maps(images)
        prefix = model.caption_prefix(fm, 2, regions)
        toks, mask = build_caption_batch(vocab, ids_list, cfg.max_text)
        logits = model.caption_logits(prefix, toks)
        l_gen = caption_loss(logits, toks, mask)
        T.backward(l_gen)
    return {"loss_emb": None, "loss_gen": l_gen.item(),
            "loss_total": l_gen.item(), "tau": float(model.tau.data)}


def train_step_stage2_retrieval(model, images, regions, ids_list):
    store = model.store
    with T.Tape():
        fm = model.feature_maps(images)
        v = embed_visual(store, fm, regions=regions, fine=True)
        t = model.encode_texts(ids_list)
        _, _, l_emb = info_nce(v, t, model.tau)
        T.backward(l_emb)
    return {"loss_emb": l_emb.item(), "loss_gen": None,
            "loss_total": l_emb.item(), "tau": float(model.tau.data)}


# ---------------------------------------------------------------------------
# full loop

def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def train(model, corpus, tcfg, log_path=None, progress=False):
    """Run one stage; returns a summary dict. Deterministic given seed."""
    backbone, projection = set_stage(model, tcfg.stage)
    seq = np.random.SeedSequence(tcfg.seed)
    data_seed, aux_seed = seq.spawn(2)
    if tcfg.stage == "two_caption":
        init_soft_prompts(model, np.random.default_rng(aux_seed))

    if tcfg.stage == "one":
        stream = stage1_batches(corpus, tcfg.batch_size, data_seed)
    elif tcfg.stage == "two_caption":
        stream = stage2_caption_batches(corpus, tcfg.batch_size, data_seed)
    else:
        stream = stage2_retrieval_batches(corpus, tcfg.batch_size, data_seed)

    opt = Optimizer(tcfg.optimizer, [(backbone, tcfg.lr_backbone),
                                     (projection, tcfg.lr_projection)],
                    weight_decay=tcfg.weight_decay)

    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write(CSV_HEADER + "\n")
    total_dups = 0
    last = {}
    try:
        for step in range(1, tcfg.steps + 1):
            for p in backbone + projection:
                p.zero_grad()
            if tcfg.stage == "one":
                images, ids, dups = next(stream)
                total_dups += dups
                report = train_step_stage1(model, images, ids, tcfg.objective)
            elif tcfg.stage == "two_caption":
                images, regions, ids = next(stream)
                report = train_step_stage2_caption(model, images, regions, ids)
            else:
                images, regions, ids = next(stream)
                report = train_step_stage2_retrieval(model, images, regions, ids)
            lr_b = lr_schedule(step, tcfg.steps, tcfg.warmup, tcfg.lr_backbone)
            lr_p = lr_schedule(step, tcfg.steps, tcfg.warmup, tcfg.lr_projection)
            opt.step([lr_b, lr_p])
            clamp_tau(model.tau)
            report["tau"] = float(model.tau.data)
            lr_log = lr_b if tcfg.stage == "one" else lr_p
            if log_fh:
                log_fh.write(",".join([str(step), f"{lr_log:.8g}",
                                       _fmt(report["loss_emb"]),
                                       _fmt(report["loss_gen"]),
                                       _fmt(report["loss_total"]),
                                       f"{report['tau']:.6f}"]) + "\n")
            last = report
            if progress and (step % 50 == 0 or step == tcfg.steps):
                print(f"  step {step}/{tcfg.steps} "
                      f"loss={report['loss_total']:.4f} tau={report['tau']:.4f}",
                      file=sys.stderr)
    finally:
        if log_fh:
            log_fh.close()
    if total_dups:
        print(f"warning: {total_dups} duplicate-caption pairings seen in "
              "contrastive batches (false-negative hazard)", file=sys.stderr)
    return {"config": tcfg.to_dict(), "final": last,
            "duplicate_pairings": total_dups}


def save_train_report(path, summary, extra=None):
    out = dict(summary)
    if extra:
        out.update(extra)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
