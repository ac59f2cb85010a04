"""Decoder-only language model shared by the embedding and caption paths.

One parameter set, one forward routine: text encoding reads the hidden state
at the [EMB] position, captioning reads next-token logits over a visual
prefix. Text tokens always occupy positions starting at a fixed base index
(the maximum prefix length), so every path sees the same text positions
regardless of prefix length; prefixes fill the positions immediately before
the base, right-aligned.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .heads import apply_head
from .transformer import block, init_block, init_ln, init_linear, linear, ln, trunc_normal


class SequenceError(ValueError):
    pass


class ContextLengthError(SequenceError):
    pass


class GenerationError(ValueError):
    pass


def init_lm(store, cfg, vocab_size, rng):
    store.add("lm.tok", trunc_normal(rng, (vocab_size, cfg.lm_dim)),
              no_decay=True)
    # zero init: positions a stage never exercises stay inert for later stages
    store.add("lm.pos", np.zeros((cfg.n_positions, cfg.lm_dim)), no_decay=True)
    for i in range(cfg.lm_depth):
        init_block(store, f"lm.blocks.{i}", cfg.lm_dim, cfg.lm_heads, rng)
    init_ln(store, "lm.ln_f", cfg.lm_dim)
    init_linear(store, "lm.head", cfg.lm_dim, vocab_size, rng)


def lm_hidden(store, cfg, prefix, token_ids):
    """Causal forward over [prefix || token embeddings] -> (B, P+T, M).

    ``prefix`` is a (B, P, M) Tensor in the LM input space or None.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise SequenceError(f"token ids must be (B, T), got {token_ids.shape}")
    p = 0 if prefix is None else prefix.shape[1]
    t = token_ids.shape[1]
    base = cfg.prefix_base
    if p > base:
        raise ContextLengthError(f"prefix length {p} exceeds base {base}")
    if base + t > cfg.n_positions:
        raise ContextLengthError(
            f"sequence of {t} tokens exceeds context {cfg.n_positions - base}")
    x = T.embedding(store["lm.tok"], token_ids)
    if prefix is not None:
        if prefix.shape[0] != token_ids.shape[0]:
            raise SequenceError("prefix/token batch mismatch")
        x = T.concat([prefix, x], axis=1)
    pos_ids = np.concatenate([np.arange(base - p, base),
                              np.arange(base, base + t)])
    x = T.add(x, T.embedding(store["lm.pos"], pos_ids))
    mask = T.attention_mask(p + t, dtype=store.dtype)
    for i in range(cfg.lm_depth):
        x = block(store, f"lm.blocks.{i}", x, cfg.lm_heads, mask)
    return ln(store, "lm.ln_f", x)


def caption_logits(store, cfg, prefix, token_ids):
    """Next-token logits aligned with the token axis: logits[:, k] predicts
    token_ids[:, k] (k=0 predicts BOS and is masked from every loss)."""
    if prefix is None or prefix.shape[1] < 1:
        raise SequenceError("captioning requires a non-empty prefix")
    p = prefix.shape[1]
    t = np.asarray(token_ids).shape[1]
    hidden = lm_hidden(store, cfg, prefix, token_ids)
    sl = T.slice_(hidden, (slice(None), slice(p - 1, p + t - 1), slice(None)))
    return linear(store, "lm.head", sl)


# ---------------------------------------------------------------------------
# sequence assembly (the builders own special-token placement)

def build_text_row(vocab, ids, max_len):
    """[BOS] + truncated ids + [EMB]; rejects reserved ids in the input."""
    ids = list(ids)
    if not ids:
        raise SequenceError("empty text after tokenization")
    if any(i < vocab.n_reserved for i in ids):
        raise SequenceError("reserved token id in raw text sequence")
    ids = ids[:max_len]
    return [vocab.bos] + ids + [vocab.emb]


def build_text_batch(vocab, ids_list, max_len):
    """Padded (B, T) ids plus the per-row [EMB] position."""
    rows = [build_text_row(vocab, ids, max_len) for ids in ids_list]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), vocab.pad, dtype=np.int64)
    emb_pos = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        emb_pos[i] = len(r) - 1
    return out, emb_pos


def build_caption_batch(vocab, ids_list, max_len):
    """Padded (B, T) rows [BOS] + ids + [EOS] + PAD and the loss mask.

    mask[:, k] marks scored positions: caption tokens and the terminating
    EOS; the BOS target (k = 0) and padding are excluded.
    """
    rows = []
    for ids in ids_list:
        ids = list(ids)
        if not ids:
            raise SequenceError("empty caption")
        if any(i < vocab.n_reserved for i in ids):
            raise SequenceError("reserved token id in raw caption")
        rows.append([vocab.bos] + ids[:max_len] + [vocab.eos])
    width = max(len(r) for r in rows)
    toks = np.full((len(rows), width), vocab.pad, dtype=np.int64)
    for i, r in enumerate(rows):
        toks[i, :len(r)] = r
    mask = toks != vocab.pad
    mask[:, 0] = False
    return toks, mask


def encode_text(store, cfg, vocab, ids_list, max_len=None):
    """Unit-norm text embeddings (B, E) read at the [EMB] position."""
    if max_len is None:
        max_len = cfg.max_text
    tokens, emb_pos = build_text_batch(vocab, ids_list, max_len)
    hidden = lm_hidden(store, cfg, None, tokens)
    at_emb = T.gather_rows(hidden, emb_pos)
    return T.l2_normalize(apply_head(store, "h2", at_emb))


# ---------------------------------------------------------------------------
# generation

def _next_logprobs(store, cfg, prefix, rows):
    toks = np.asarray(rows, dtype=np.int64)
    hidden = lm_hidden(store, cfg, prefix, toks)
    last = T.gather_rows(hidden, np.full(toks.shape[0], toks.shape[1] - 1,
                                         dtype=np.int64))
    logits = linear(store, "lm.head", last)
    return T.log_softmax(logits).numpy()


def _tile_prefix(prefix, n):
    return T.Tensor(np.repeat(prefix.data, n, axis=0))


def generate(store, cfg, vocab, prefix, mode="greedy", max_new=24, beam_k=5):
    """Decode caption token ids (BOS/EOS stripped) from a (1, P, M) prefix.

    Greedy takes the argmax each step; beam search keeps ``beam_k``
    hypotheses ranked by mean log-probability per generated token.
    """
    if max_new <= 0:
        raise GenerationError(f"max_new must be positive, got {max_new}")
    if mode == "greedy":
        beam_k = 1
    elif mode != "beam":
        raise GenerationError(f"unknown mode {mode!r}")
    if beam_k < 1:
        raise GenerationError(f"beam_k must be >= 1, got {beam_k}")

    # hypothesis: (ids after BOS, total logp, n tokens, finished)
    hyps = [([], 0.0, 0, False)]
    for _ in range(max_new):
        live = [h for h in hyps if not h[3]]
        if not live:
            break
        rows = [[vocab.bos] + h[0] for h in live]
        width = max(len(r) for r in rows)
        assert all(len(r) == width for r in rows)
        lp = _next_logprobs(store, cfg, _tile_prefix(prefix, len(rows)), rows)
        candidates = [h for h in hyps if h[3]]
        for i, (ids, total, n, _) in enumerate(live):
            order = np.argsort(-lp[i], kind="stable")[:max(beam_k, 1)]
            for tok in order:
                tok = int(tok)
                candidates.append((ids + [tok], total + float(lp[i][tok]),
                                   n + 1, tok == vocab.eos))
        candidates.sort(key=lambda h: (-(h[1] / max(h[2], 1)), h[2], h[0]))
        hyps = candidates[:beam_k]
    best = max(hyps, key=lambda h: (h[1] / max(h[2], 1), h[3]))
    ids = best[0]
    if ids and ids[-1] == vocab.eos:
        ids = ids[:-1]
    return ids
