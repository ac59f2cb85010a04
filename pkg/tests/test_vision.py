"""Vision encoder: patchify contracts, determinism, gradients, symmetry."""

import numpy as np
import pytest

from mmgem import tensor as T
from mmgem.data import Vocabulary
from mmgem.gradcheck import finite_difference_check
from mmgem.model import Model, ModelConfig
from mmgem.vision import ImageError, patchify

TINY = dict(img_size=8, patch=4, vis_dim=16, vis_depth=1, vis_heads=2,
            lm_dim=16, lm_depth=1, lm_heads=2, embed_dim=16, n_prompts=4,
            max_text=12, max_text_long=16)


def tiny_model(seed=0, dtype=np.float32):
    return Model(ModelConfig(**TINY), Vocabulary.default(), seed=seed,
                 dtype=dtype)


class TestPatchify:
    def test_shape_arithmetic(self):
        img = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
        out = patchify(img, 4)
        assert out.shape == (64, 48)

    def test_constant_image(self):
        out = patchify(np.full((3, 32, 32), 0.5, dtype=np.float32), 4)
        assert np.all(out == out[0])

    def test_full_patch_is_flat_image(self):
        img = np.random.default_rng(1).random((3, 16, 16)).astype(np.float32)
        out = patchify(img, 16)
        assert out.shape == (1, 3 * 16 * 16)
        assert np.array_equal(out[0], img.reshape(-1))

    def test_lossless(self):
        img = np.random.default_rng(2).random((2, 3, 32, 32)).astype(np.float32)
        p = patchify(img, 4)
        back = (p.reshape(2, 8, 8, 3, 4, 4).transpose(0, 3, 1, 4, 2, 5)
                 .reshape(2, 3, 32, 32))
        assert np.array_equal(back, img)

    def test_indivisible(self):
        with pytest.raises(ImageError):
            patchify(np.zeros((3, 30, 30), dtype=np.float32), 4)


class TestForward:
    def test_shape_contract(self):
        m = Model(ModelConfig(), Vocabulary.default(), seed=0)
        img = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
        fm = m.feature_maps(img)
        assert fm.tensor.shape == (2, 64, 8, 8)

    def test_determinism_bitwise(self):
        m = tiny_model()
        img = np.random.default_rng(3).random((2, 3, 8, 8)).astype(np.float32)
        a = m.feature_maps(img).tensor.numpy()
        b = m.feature_maps(img.copy()).tensor.numpy()
        assert np.array_equal(a, b)

    def test_range_guard(self):
        m = tiny_model()
        with pytest.raises(ImageError):
            m.feature_maps(np.full((1, 3, 8, 8), 1.5, dtype=np.float32))

    def test_constant_image_zero_pos_embeddings(self):
        # permutation symmetry: identical tokens -> identical positions
        m = tiny_model()
        m.store["vision.pos"].assign(np.zeros_like(m.store["vision.pos"].data))
        fm = m.feature_maps(np.full((1, 3, 8, 8), 0.25, dtype=np.float32))
        cells = fm.tensor.numpy().reshape(m.cfg.vis_dim, -1)
        assert np.allclose(cells, cells[:, :1], atol=1e-6)

    def test_gradients_pass_fd(self):
        # mean(FeatureMap) is shift-invariant through the final LayerNorm, so
        # bias gradients sit at ~1e-9 where f64 roundoff (~1e-12/eps) meets
        # the 1e-8 relative-error floor; eps=1e-4 keeps the probe above the
        # noise. Loss-scale functionals are checked at eps=1e-5 elsewhere.
        m = tiny_model(dtype=np.float64)
        img = np.random.default_rng(5).random((1, 3, 8, 8))
        params = [p for p in m.params() if p.name.startswith("vision.")]

        def fn():
            return T.mean(m.feature_maps(img).tensor)

        report = finite_difference_check(fn, params, eps=1e-4,
                                         max_entries=6, seed=0)
        assert report.max_rel < 1e-4, report.max_rel
