"""Synthetic corpus: determinism, grammar round-trip, augmentation, masking."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from vlcontrast.common import ConfigurationError
from vlcontrast import synthdata as sd


def test_vocab_is_forty_tokens():
    assert sd.VOCAB_SIZE == 40
    assert len(set(sd.TOKENS)) == 40


def test_caption_round_trips_to_scene():
    pair = sd.generate_dataset(count=1, seed=7, grid=2)[0]
    assert sd.decode_caption(pair.caption, grid=2) == pair.scene


def test_caption_round_trips_with_synonyms():
    for pair in sd.generate_dataset(count=32, seed=11, grid=3, synonyms=True):
        assert sd.decode_caption(pair.caption, grid=3) == pair.scene


def test_generation_is_deterministic():
    a = sd.generate_dataset(count=512, seed=3, grid=2)
    b = sd.generate_dataset(count=512, seed=3, grid=2)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.image, pb.image)
        assert np.array_equal(pa.caption, pb.caption)
        assert pa.scene == pb.scene


def test_captions_unique_across_distinct_scenes():
    pairs = sd.generate_dataset(count=512, seed=3, grid=2)
    captions = [tuple(p.caption) for p in pairs]
    # exhaustive pairwise check: distinct scenes never share a caption
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            if pairs[i].scene != pairs[j].scene:
                assert captions[i] != captions[j]
    assert len(set(captions)) == len(captions)  # scenes are de-duplicated too


def test_caption_shape_contract():
    for pair in sd.generate_dataset(count=64, seed=1, grid=4):
        assert pair.caption.shape == (sd.N_MAX,)
        assert pair.caption[0] == sd.CLS_ID
        assert np.all(pair.caption < sd.VOCAB_SIZE)
        used = pair.caption[pair.caption != sd.PAD_ID]
        assert len(used) <= 12


def test_images_render_in_bounds():
    for pair in sd.generate_dataset(count=16, seed=5, grid=3):
        assert pair.image.shape == (3, 64, 64)
        assert pair.image.min() >= 0.0 and pair.image.max() <= 1.0
        # both objects actually painted: some non-background pixels
        assert np.any(np.abs(pair.image - sd._BACKGROUND) > 1e-3)


def test_grid_out_of_range_rejected():
    with pytest.raises(ConfigurationError):
        sd.generate_dataset(count=1, seed=0, grid=5)
    with pytest.raises(ConfigurationError):
        sd.generate_dataset(count=0, seed=0, grid=2)


# -- augmentation --------------------------------------------------------------


@pytest.fixture(scope="module")
def sample_image():
    return sd.generate_dataset(count=1, seed=42, grid=2)[0].image


def test_strong_views_differ(sample_image):
    views = sd.augment(sample_image, seed=3, strength="strong")
    assert not np.array_equal(views.view_a, views.view_b)


def test_disabled_transforms_are_identity(sample_image):
    views = sd.augment(sample_image, seed=3, strength="none")
    np.testing.assert_array_equal(views.view_a, sample_image)
    np.testing.assert_array_equal(views.view_b, sample_image)


def test_augment_deterministic(sample_image):
    v1 = sd.augment(sample_image, seed=5, strength="strong")
    v2 = sd.augment(sample_image, seed=5, strength="strong")
    np.testing.assert_array_equal(v1.view_a, v2.view_a)
    np.testing.assert_array_equal(v1.view_b, v2.view_b)


def test_shared_weak_views_coincide(sample_image):
    views = sd.augment(sample_image, seed=9, strength="weak", shared=True)
    np.testing.assert_array_equal(views.view_a, views.view_b)


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31 - 1))
def test_augment_preserves_shape_and_bounds(seed):
    image = test_augment_preserves_shape_and_bounds.image
    views = sd.augment(image, seed=seed, strength="strong")
    for v in (views.view_a, views.view_b):
        assert v.shape == image.shape
        assert v.min() >= 0.0 and v.max() <= 1.0


test_augment_preserves_shape_and_bounds.image = sd.generate_dataset(count=1, seed=8, grid=2)[0].image


# -- masking ----------------------------------------------------------------------


def test_zero_rate_masks_nothing():
    caption = sd.generate_dataset(count=1, seed=1, grid=2)[0].caption
    masked = sd.mlm_mask(caption, seed=0, rate=0.0)
    assert masked.mask_positions.size == 0
    assert np.all(masked.labels == sd.IGNORE_ID)
    np.testing.assert_array_equal(masked.input_ids, caption)


def test_full_rate_saturates():
    caption = sd.generate_dataset(count=1, seed=1, grid=2)[0].caption
    masked = sd.mlm_mask(caption, seed=0, rate=1.0, split=(1.0, 0.0, 0.0))
    eligible = caption > sd.UNK_ID
    assert np.array_equal(masked.mask_positions, np.flatnonzero(eligible))
    assert np.all(masked.input_ids[eligible] == sd.MASK_ID)


def test_specials_never_selected():
    caption = sd.generate_dataset(count=1, seed=2, grid=2)[0].caption
    for seed in range(50):
        masked = sd.mlm_mask(caption, seed=seed, rate=0.9)
        assert 0 not in masked.mask_positions  # [CLS] slot
        assert np.all(caption[masked.mask_positions] > sd.UNK_ID)
        changed = masked.input_ids != caption
        assert set(np.flatnonzero(changed)) <= set(masked.mask_positions)


def _masking_counts(n_captions=10000, rate=0.15, split=(0.8, 0.1, 0.1)):
    rng = np.random.default_rng(123)
    grid = 2
    n_eligible = n_selected = n_masked = n_random = n_kept = 0
    for i in range(n_captions):
        scene = sd._sample_scene(rng, grid)
        caption = sd.caption_for_scene(scene, grid)
        masked = sd.mlm_mask(caption, seed=i, rate=rate, split=split)
        eligible = caption > sd.UNK_ID
        n_eligible += int(eligible.sum())
        sel = masked.mask_positions
        n_selected += sel.size
        n_masked += int((masked.input_ids[sel] == sd.MASK_ID).sum())
        n_kept += int((masked.input_ids[sel] == caption[sel]).sum())
    # a random replacement can coincide with the original; count it as kept here
    n_random = n_selected - n_masked - n_kept
    return n_eligible, n_selected, n_masked, n_random, n_kept


def test_masking_statistics_match_configuration():
    n_eligible, n_selected, n_masked, n_random, n_kept = _masking_counts()
    assert n_eligible >= 10**5
    assert abs(n_selected / n_eligible - 0.15) <= 0.01
    assert abs(n_masked / n_selected - 0.8) <= 0.02
    # 1/36 of random draws coincide with the original and are counted as kept
    assert abs(n_random / n_selected - 0.1) <= 0.02
    assert abs(n_kept / n_selected - 0.1) <= 0.02


def test_masking_selection_chi_square():
    n_eligible, n_selected, *_ = _masking_counts(n_captions=10000)
    expected = np.array([0.15, 0.85]) * n_eligible
    observed = np.array([n_selected, n_eligible - n_selected])
    assert stats.chisquare(observed, expected).pvalue > 0.001


def test_mask_invalid_config_rejected():
    caption = sd.caption_for_scene(((0, 0, 0, 0), (1, 1, 1, 1)), 2)
    with pytest.raises(ConfigurationError):
        sd.mlm_mask(caption, seed=0, rate=1.5)
    with pytest.raises(ConfigurationError):
        sd.mlm_mask(caption, seed=0, split=(0.5, 0.2, 0.2))


# -- file format ---------------------------------------------------------------


def test_dataset_file_round_trip(tmp_path):
    pairs = sd.generate_dataset(count=8, seed=13, grid=3)
    path = tmp_path / "corpus.tcld"
    sd.save_dataset(str(path), pairs, grid=3)
    loaded, grid = sd.load_dataset(str(path))
    assert grid == 3
    assert len(loaded) == len(pairs)
    for orig, back in zip(pairs, loaded):
        assert back.pair_id == orig.pair_id
        assert back.scene == orig.scene
        np.testing.assert_array_equal(back.caption, orig.caption)
        np.testing.assert_array_equal(back.image, orig.image)  # values sit on the f32 grid


def test_dataset_file_header(tmp_path):
    pairs = sd.generate_dataset(count=2, seed=13, grid=2)
    path = tmp_path / "corpus.tcld"
    sd.save_dataset(str(path), pairs, grid=2)
    raw = path.read_bytes()
    assert raw[:4] == b"TCLD"
    with pytest.raises(ConfigurationError):
        bad = tmp_path / "bad.tcld"
        bad.write_bytes(b"XXXX" + raw[4:])
        sd.load_dataset(str(bad))
