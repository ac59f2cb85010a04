"""Model assembly: vision encoder + language model + heads + temperature."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import lm as L
from . import tensor as T
from .heads import cell_embeddings, embed_visual, init_heads, visual_prefix
from .objectives import TAU_INIT
from .transformer import ParamStore, trunc_normal
from .vision import init_vision, vision_forward


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    img_size: int = 32
    patch: int = 4
    vis_dim: int = 64
    vis_depth: int = 2
    vis_heads: int = 4
    lm_dim: int = 64
    lm_depth: int = 4
    lm_heads: int = 4
    embed_dim: int = 64
    n_prompts: int = 64
    max_text: int = 50
    max_text_long: int = 200

    def __post_init__(self):
        if self.img_size % self.patch:
            raise ConfigError(f"img_size {self.img_size} not divisible by "
                              f"patch {self.patch}")
        if self.vis_dim % self.vis_heads or self.lm_dim % self.lm_heads:
            raise ConfigError("feature dims must divide head counts")

    @property
    def grid(self):
        return self.img_size // self.patch

    @property
    def grid_cells(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return 3 * self.patch * self.patch

    @property
    def prefix_base(self):
        return self.grid_cells + self.n_prompts

    @property
    def n_positions(self):
        return self.prefix_base + self.max_text_long + 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)


class Model:
    """One parameter set serving contrastive encoding and caption decoding."""

    def __init__(self, cfg, vocab, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.vocab = vocab
        self.seed = int(seed)
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(self.seed)
        # build order is part of the seeded init contract
        init_vision(self.store, cfg, rng)
        L.init_lm(self.store, cfg, len(vocab), rng)
        init_heads(self.store, cfg, rng)
        self.store.add("tau", np.asarray(TAU_INIT), no_decay=True)
        self.store.add("soft_prompts",
                       trunc_normal(rng, (cfg.n_prompts, cfg.lm_dim)),
                       no_decay=True)

    @property
    def tau(self):
        return self.store["tau"]

    def params(self):
        return list(self.store)

    # ---- visual side -----------------------------------------------------

    def feature_maps(self, images):
        return vision_forward(self.store, self.cfg, images)

    def embed_images(self, images, regions=None, fine=False):
        return embed_visual(self.store, self.feature_maps(images),
                            regions=regions, fine=fine)

    def heatmap(self, image, text_ids, stage):
        """(H, W) cosine similarities between per-cell features and one text."""
        fm = self.feature_maps(np.asarray(image)[None])
        cells = cell_embeddings(self.store, fm, stage).numpy()[0]
        text = self.encode_texts([text_ids]).numpy()[0]
        g = self.cfg.grid
        return (cells @ text).reshape(g, g)

    # ---- text side ---------------------------------------------------------

    def encode_texts(self, ids_list, max_len=None):
        return L.encode_text(self.store, self.cfg, self.vocab, ids_list,
                             max_len=max_len)

    # ---- captioning --------------------------------------------------------

    def caption_prefix(self, fm, stage, regions=None):
        """Visual prefix plus [CAP] (stage 1) or the soft prompts (stage 2)."""
        vp = visual_prefix(self.store, fm, stage, regions)
        b = vp.shape[0]
        if stage == 1:
            cap_ids = np.full((b, 1), self.vocab.cap, dtype=np.int64)
            sep = T.embedding(self.store["lm.tok"], cap_ids)
        else:
            sep = T.tile0(self.store["soft_prompts"], b)
        return T.concat([vp, sep], axis=1)

    def caption_logits(self, prefix, tokens):
        return L.caption_logits(self.store, self.cfg, prefix, tokens)

    def generate(self, image, stage, region=None, mode="greedy", max_new=24,
                 beam_k=5):
        fm = self.feature_maps(np.asarray(image)[None])
        regions = None if region is None else [region]
        prefix = self.caption_prefix(fm, stage, regions)
        return L.generate(self.store, self.cfg, self.vocab, prefix,
                          mode=mode, max_new=max_new, beam_k=beam_k)
