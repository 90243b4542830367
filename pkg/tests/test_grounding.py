"""Tests for conditional mask decoding, mask-grounded embeddings, and the
pairwise similarity tables.

The decoder starts with an identity conditioning path (scale 1, shift 0
for every condition), which gives an exact handle on "conditioning is the
only way the condition vector can matter": at init, swapping conditions
must not change the mask at all.
"""

import numpy as np
import pytest

from soundloc import autodiff as ad
from soundloc.autodiff import ContractViolation
from soundloc.encoders import EncoderConfig, ImageEncoder, SpatialFeatures
from soundloc.grounding import (
    MaskDecoder,
    decode_mask,
    grounded_embedding_feature,
    grounded_embedding_image,
    masked_pool_batch,
)
from soundloc.model import SoundLocalizer
from soundloc.prompting import PromptConfig

from _oracles import bilinear_loops


def _feats(g, d, seed):
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(g, g, d))
    return SpatialFeatures(grid=ad.constant(grid),
                           global_feat=ad.constant(grid.mean(axis=(0, 1))))


class TestMaskDecoder:
    def test_identity_init_ignores_condition(self):
        # scale_w/shift_w start at zero, so gamma == 1 and beta == 0 for
        # any condition: two different conditions give identical logits.
        dec = MaskDecoder(8, 2, np.random.default_rng(0))
        grid = ad.constant(np.random.default_rng(1).normal(size=(1, 4, 8)))
        rng = np.random.default_rng(2)
        a = dec.decode_logits(grid, ad.constant(rng.normal(size=(1, 8)))).data
        b = dec.decode_logits(grid, ad.constant(rng.normal(size=(1, 8)))).data
        assert np.array_equal(a, b)

    def test_trained_conditioning_differentiates(self):
        dec = MaskDecoder(8, 2, np.random.default_rng(3))
        dec.scale_w.data[:] = np.random.default_rng(4).normal(size=(8, 8))
        dec.shift_w.data[:] = np.random.default_rng(5).normal(size=(8, 8))
        grid = ad.constant(np.random.default_rng(6).normal(size=(1, 4, 8)))
        rng = np.random.default_rng(7)
        a = dec.decode_logits(grid, ad.constant(rng.normal(size=(1, 8)))).data
        b = dec.decode_logits(grid, ad.constant(rng.normal(size=(1, 8)))).data
        assert np.abs(a - b).max() > 1e-6

    def test_decode_count_tracks_batch(self):
        dec = MaskDecoder(8, 2, np.random.default_rng(8))
        grid = ad.constant(np.zeros((5, 4, 8)))
        cond = ad.constant(np.zeros((5, 8)))
        dec.decode_logits(grid, cond)
        assert dec.decode_count == 5
        dec.decode_logits(grid, cond)
        assert dec.decode_count == 10

    @pytest.mark.parametrize("grid_shape,cond_shape", [
        ((4, 8), (1, 8)),        # grid not batched
        ((1, 4, 8), (8,)),       # condition not batched
        ((2, 4, 8), (3, 8)),     # batch mismatch
    ])
    def test_shape_contract(self, grid_shape, cond_shape):
        dec = MaskDecoder(8, 2, np.random.default_rng(9))
        with pytest.raises(ContractViolation):
            dec.decode_logits(ad.constant(np.zeros(grid_shape)),
                              ad.constant(np.zeros(cond_shape)))


class TestDecodeMask:
    def test_output_ranges_and_shapes(self):
        dec = MaskDecoder(8, 2, np.random.default_rng(10))
        feats = _feats(2, 8, 11)
        mask = decode_mask(feats, ad.constant(np.zeros(8)), dec, image_size=4)
        assert mask.feature_mask.shape == (2, 2)
        assert mask.image_mask.shape == (4, 4)
        for arr in (mask.feature_mask.data, mask.image_mask.data):
            assert np.all(arr > 0) and np.all(arr < 1)

    def test_upsample_then_sigmoid_order(self):
        """The image mask is sigmoid(upsample(logits)), not
        upsample(sigmoid(logits)); verified against the loop-based
        bilinear oracle on the decoder's actual 2x2 logits.
        """
        dec = MaskDecoder(8, 2, np.random.default_rng(12))
        feats = _feats(2, 8, 13)
        cond = ad.constant(np.random.default_rng(14).normal(size=8))
        mask = decode_mask(feats, cond, dec, image_size=4)

        logits = dec.decode_logits(feats.grid.reshape(1, 4, 8),
                                   cond.reshape(1, 8)).data.reshape(2, 2)
        expected = 1.0 / (1.0 + np.exp(-bilinear_loops(logits, 4, 4)))
        np.testing.assert_allclose(mask.image_mask.data, expected,
                                   atol=1e-12, rtol=0)
        # The other composition order gives a genuinely different mask.
        other = bilinear_loops(1.0 / (1.0 + np.exp(-logits)), 4, 4)
        assert np.abs(mask.image_mask.data - other).max() > 1e-9


@pytest.fixture(scope="module")
def encoder():
    return ImageEncoder(EncoderConfig(), np.random.default_rng(20))


@pytest.fixture(scope="module")
def model():
    return SoundLocalizer(EncoderConfig(), PromptConfig(), seed=7)


class TestGroundedEmbeddingImage:
    def _image(self, seed=21):
        return ad.constant(np.random.default_rng(seed).uniform(size=(32, 32, 3)))

    def test_full_mask_is_plain_embedding(self, encoder):
        img = self._image()
        v = grounded_embedding_image(img, ad.constant(np.ones((32, 32))), encoder)
        plain = ad.l2_normalize(encoder.encode(img).global_feat, axis=-1)
        np.testing.assert_allclose(v.data, plain.data, atol=1e-12, rtol=0)

    def test_zero_mask_is_blank_image_embedding(self, encoder):
        v = grounded_embedding_image(self._image(), ad.constant(np.zeros((32, 32))),
                                     encoder)
        blank = ad.l2_normalize(
            encoder.encode(ad.constant(np.zeros((32, 32, 3)))).global_feat, axis=-1)
        np.testing.assert_allclose(v.data, blank.data, atol=1e-12, rtol=0)

    def test_unit_norm(self, encoder):
        mask = ad.constant(np.random.default_rng(22).uniform(size=(32, 32)))
        v = grounded_embedding_image(self._image(23), mask, encoder)
        assert abs(np.linalg.norm(v.data) - 1.0) < 1e-9

    def test_misaligned_mask_rejected(self, encoder):
        with pytest.raises(ContractViolation):
            grounded_embedding_image(self._image(), ad.constant(np.ones((16, 16))),
                                     encoder)


class TestGroundedEmbeddingFeature:
    def test_one_hot_mask_selects_cell(self):
        feats = _feats(4, 8, 30)
        mask = np.zeros((4, 4))
        mask[1, 2] = 1.0
        v = grounded_embedding_feature(feats, ad.constant(mask)).data
        cell = feats.grid.data[1, 2]
        np.testing.assert_allclose(v, cell / np.linalg.norm(cell),
                                   atol=1e-12, rtol=0)

    def test_uniform_mask_is_mean_direction(self):
        feats = _feats(4, 8, 31)
        v = grounded_embedding_feature(feats, ad.constant(np.ones((4, 4)))).data
        mean = feats.grid.data.reshape(16, 8).mean(axis=0)
        np.testing.assert_allclose(v, mean / np.linalg.norm(mean),
                                   atol=1e-12, rtol=0)

    @pytest.mark.parametrize("k", [1e-2, 0.5, 3.0, 1e3])
    def test_positive_scaling_invariance(self, k):
        feats = _feats(4, 8, 32)
        mask = np.random.default_rng(33).uniform(0.1, 1.0, size=(4, 4))
        base = grounded_embedding_feature(feats, ad.constant(mask)).data
        scaled = grounded_embedding_feature(feats, ad.constant(k * mask)).data
        np.testing.assert_allclose(scaled, base, atol=1e-9, rtol=0)

    def test_zero_mass_degenerates_to_mean(self):
        feats = _feats(4, 8, 34)
        v = grounded_embedding_feature(feats, ad.constant(np.zeros((4, 4)))).data
        mean = feats.grid.data.reshape(16, 8).mean(axis=0)
        np.testing.assert_allclose(v, mean / np.linalg.norm(mean),
                                   atol=1e-12, rtol=0)

    def test_mask_shape_checked(self):
        with pytest.raises(ContractViolation):
            grounded_embedding_feature(_feats(4, 8, 35),
                                       ad.constant(np.ones((3, 3))))


class TestMaskedPoolBatch:
    def test_matches_scalar_path(self):
        rng = np.random.default_rng(40)
        grids = rng.normal(size=(5, 16, 8))
        masks = rng.uniform(0.05, 0.95, size=(5, 16))
        batch = masked_pool_batch(ad.constant(grids), ad.constant(masks)).data
        for i in range(5):
            feats = SpatialFeatures(grid=ad.constant(grids[i].reshape(4, 4, 8)),
                                    global_feat=ad.constant(np.zeros(8)))
            single = grounded_embedding_feature(
                feats, ad.constant(masks[i].reshape(4, 4))).data
            np.testing.assert_allclose(batch[i], single, atol=1e-12, rtol=0)

    def test_rows_unit_norm(self):
        rng = np.random.default_rng(41)
        out = masked_pool_batch(ad.constant(rng.normal(size=(3, 9, 4))),
                                ad.constant(rng.uniform(0.1, 1, size=(3, 9)))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0,
                                   atol=1e-9, rtol=0)


class TestSimilarityTables:
    def _batch(self, b, seed=50):
        rng = np.random.default_rng(seed)
        images = rng.uniform(size=(b, 32, 32, 3))
        audios = rng.normal(size=(b, 8000))
        return images, audios

    def test_all_pairs_decoded_exactly_once(self, model):
        images, audios = self._batch(3)
        percept = model.perceive(images, audios)
        before = model.decoder.decode_count
        s_img, s_feat, stats, _ = model.similarity_tables(percept)
        assert model.decoder.decode_count - before == 9
        assert s_img.shape == (3, 3) and s_feat.shape == (3, 3)
        assert stats.pair_mean_mask.shape == (3, 3)

    def test_entries_are_cosines(self, model):
        images, audios = self._batch(4, seed=51)
        percept = model.perceive(images, audios)
        s_img, s_feat, stats, _ = model.similarity_tables(percept)
        for table in (s_img.data, s_feat.data):
            assert np.all(table >= -1.0 - 1e-9)
            assert np.all(table <= 1.0 + 1e-9)
        assert np.all(stats.pair_mean_mask.data > 0)
        assert np.all(stats.pair_mean_mask.data < 1)

    def test_single_sample_table(self, model):
        images, audios = self._batch(1, seed=52)
        s_img, s_feat, _, _ = model.similarity_tables(model.perceive(images, audios))
        assert s_img.shape == (1, 1)
        assert -1.0 - 1e-9 <= float(s_img.data[0, 0]) <= 1.0 + 1e-9

    def test_duplicated_sample_duplicates_rows_and_columns(self, model):
        images, audios = self._batch(2, seed=53)
        images = np.stack([images[0], images[0], images[1]])
        audios = np.stack([audios[0], audios[0], audios[1]])
        s_img, s_feat, _, _ = model.similarity_tables(model.perceive(images, audios))
        for table in (s_img.data, s_feat.data):
            assert np.array_equal(table[0], table[1])
            assert np.array_equal(table[:, 0], table[:, 1])

    def test_predict_masks_diagonal_only(self, model):
        images, audios = self._batch(3, seed=54)
        before = model.decoder.decode_count
        masks = model.predict_masks(images, audios)
        assert model.decoder.decode_count - before == 3
        assert masks.shape == (3, 32, 32)
        assert np.all(masks > 0) and np.all(masks < 1)


class TestFusionModes:
    def _batch(self, b, seed=60):
        rng = np.random.default_rng(seed)
        return rng.uniform(size=(b, 32, 32, 3)), rng.normal(size=(b, 8000))

    def test_fused_prompt_has_no_audio_token(self):
        # Fused mode conditions the meta-net on image+audio and drops the
        # audio token, so the text encoder sees M tokens, not M+1.
        model = SoundLocalizer(EncoderConfig(),
                               PromptConfig(fusion_mode="fused"), seed=8)
        seen = []
        orig = model.text_encoder.forward_batch

        def spy(tokens, **kw):
            seen.append(tokens.shape)
            return orig(tokens, **kw)

        model.text_encoder.forward_batch = spy
        images, audios = self._batch(2)
        model.similarity_tables(model.perceive(images, audios))
        assert all(shape[1] == 4 for shape in seen)

    def test_fused_mode_excludes_pooling_parameters(self):
        model = SoundLocalizer(EncoderConfig(),
                               PromptConfig(fusion_mode="fused"), seed=8)
        names = model.trainable_parameters()
        assert "tokenizer.query" not in names
        assert "tokenizer.w1" in names

    def test_fused_without_context_rejected(self):
        with pytest.raises(ContractViolation):
            SoundLocalizer(EncoderConfig(),
                           PromptConfig(context_length=0, fusion_mode="fused"))

    def test_ensemble_averages_positions(self):
        # Ensemble mode runs one text-encoder pass per insertion point:
        # M+1 passes per pair batch instead of one.
        model = SoundLocalizer(EncoderConfig(),
                               PromptConfig(fusion_mode="ensemble"), seed=9)
        seen = []
        orig = model.text_encoder.forward_batch

        def spy(tokens, **kw):
            seen.append(tokens.shape)
            return orig(tokens, **kw)

        model.text_encoder.forward_batch = spy
        images, audios = self._batch(2, seed=61)
        s_img, _, _, _ = model.similarity_tables(model.perceive(images, audios))
        assert len(seen) == 5
        assert all(shape[1] == 5 for shape in seen)
        assert np.all(np.abs(s_img.data) <= 1.0 + 1e-9)
