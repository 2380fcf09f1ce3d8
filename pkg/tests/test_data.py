import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siglab.data import (
    CHANNELS,
    CorruptionSpec,
    PairDataset,
    SyntheticPairSpec,
    corrupt,
    generate,
    load_dataset,
    save_dataset,
    train_eval,
    world,
)
from siglab.errors import ConfigError
from siglab.model import PAD

SPEC = SyntheticPairSpec()


def same(a: PairDataset, b: PairDataset):
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.tokens.ids, b.tokens.ids)
    np.testing.assert_array_equal(a.tokens.lengths, b.tokens.lengths)
    np.testing.assert_array_equal(a.classes, b.classes)


class TestGenerate:
    def test_deterministic(self):
        same(generate(SPEC, 50), generate(SPEC, 50))

    def test_seed_matters(self):
        other = generate(SyntheticPairSpec(seed=1), 50)
        assert not np.array_equal(generate(SPEC, 50).images, other.images)

    def test_splits_disjoint(self):
        tr, ev = train_eval(SPEC, 500, 100)
        train_rows = {r.tobytes() for r in tr.images}
        assert not any(r.tobytes() in train_rows for r in ev.images)

    def test_noise_free_images_are_the_linear_map(self):
        spec = SyntheticPairSpec(noise_sigma=0.0)
        ds = generate(spec, 40)
        np.testing.assert_array_equal(ds.images, ds.latents @ world(spec).image_map)
        dup = ds.take([3, 3])
        np.testing.assert_array_equal(dup.images[0], dup.images[1])

    def test_latent_nearest_neighbour_recall(self):
        ds = generate(SPEC, 64, stream=2)
        z = ds.latents
        # brute force: each latent's nearest neighbour among the 64 is itself
        hits = 0
        for i in range(64):
            dist = [float(np.sum((z[i] - z[j]) ** 2)) for j in range(64)]
            hits += int(np.argmin(dist) == i)
        assert hits == 64

    def test_tokens_in_vocab(self):
        ds = generate(SPEC, 200)
        assert ds.tokens.ids.min() >= 0 and ds.tokens.ids.max() < SPEC.text_vocab
        assert ds.tokens.ids.shape == (200, SPEC.text_len)

    def test_class_tokens_come_from_class_slice(self):
        ds = generate(SPEC, 100)
        lead = ds.tokens.ids[:, : SPEC.class_positions] // SPEC.class_tokens
        np.testing.assert_array_equal(lead, np.repeat(ds.classes[:, None], SPEC.class_positions, 1))

    def test_bad_size(self):
        with pytest.raises(ConfigError):
            generate(SPEC, 0)


class TestCorrupt:
    def test_all_zero_is_identity(self):
        ds = generate(SPEC, 30)
        out, rep = corrupt(ds, CorruptionSpec(), SPEC.text_vocab)
        same(out, ds)
        assert (rep.images_replaced, rep.texts_scrambled, rep.pairs_shuffled) == (0, 0, 0)

    def test_full_image_noise(self):
        ds = generate(SPEC, 30)
        out, rep = corrupt(ds, CorruptionSpec(image_noise_p=1.0), SPEC.text_vocab)
        assert rep.images_replaced == 30
        assert not np.any(np.all(out.images == ds.images, axis=1))
        assert out.images.min() >= ds.images.min() and out.images.max() <= ds.images.max()

    def test_binomial_count(self):
        ds = generate(SPEC, 1000)
        counts = [
            corrupt(ds, CorruptionSpec(image_noise_p=0.4, seed=s), SPEC.text_vocab)[1].images_replaced
            for s in range(100)
        ]
        sigma = math.sqrt(1000 * 0.4 * 0.6)
        assert abs(np.mean(counts) - 400) <= 3 * sigma
        assert all(abs(c - 400) <= 5 * sigma for c in counts)

    def test_scrambled_length_range(self):
        ds = generate(SPEC, 400)
        out, rep = corrupt(ds, CorruptionSpec(text_scramble_p=1.0), SPEC.text_vocab)
        assert rep.texts_scrambled == 400
        assert out.tokens.lengths.min() >= 1 and out.tokens.lengths.max() <= SPEC.text_len
        assert len(set(out.tokens.lengths.tolist())) == SPEC.text_len
        for ids, n in zip(out.tokens.ids, out.tokens.lengths):
            assert np.all(ids[n:] == PAD) and np.all(ids[:n] >= 0)

    @settings(max_examples=25, deadline=None)
    @given(pi=st.floats(0, 1), pt=st.floats(0, 1), seed=st.integers(0, 1000))
    def test_untouched_items_bit_identical(self, pi, pt, seed):
        ds = generate(SPEC, 40)
        out, rep = corrupt(ds, CorruptionSpec(pi, pt, 0.0, seed), SPEC.text_vocab)
        # a replaced image is a fresh continuous draw, so exactly the reported
        # rows differ and every other row is the untouched input
        changed = ~np.all(out.images == ds.images, axis=1)
        assert int(changed.sum()) == rep.images_replaced
        changed_txt = ~np.all(out.tokens.ids == ds.tokens.ids, axis=1)
        assert int(changed_txt.sum()) <= rep.texts_scrambled
        np.testing.assert_array_equal(out.tokens.lengths[~changed_txt], ds.tokens.lengths[~changed_txt])
        np.testing.assert_array_equal(out.classes, ds.classes)

    def test_misalign_counts_and_multiset(self):
        ds = generate(SPEC, 50)
        out, rep = corrupt(ds, CorruptionSpec(misalign_p=0.5, seed=2), SPEC.text_vocab)
        assert rep.pairs_shuffled == 25
        moved = np.any(out.tokens.ids != ds.tokens.ids, axis=1)
        assert moved.sum() <= 25
        np.testing.assert_array_equal(out.images, ds.images)
        key = lambda b: sorted(r.tobytes() for r in b.tokens.ids)  # noqa: E731
        assert key(out) == key(ds)

    def test_full_misalignment_breaks_pairs(self):
        n = 64
        ds = generate(SPEC, n)
        # texts are unique per item, so a kept pair means a fixed point
        fixed = []
        for s in range(200):
            out, _ = corrupt(ds, CorruptionSpec(misalign_p=1.0, seed=s), SPEC.text_vocab)
            fixed.append(np.mean(np.all(out.tokens.ids == ds.tokens.ids, axis=1)))
        assert 1.0 - np.mean(fixed) >= 1.0 - 1.0 / n - 3 * math.sqrt(1.0 / n / 200)

    @pytest.mark.parametrize("name", CHANNELS)
    def test_channels(self, name):
        cs = CorruptionSpec.channel(name, 0.3)
        assert (cs.image_noise_p > 0) == ("image" in name)
        assert (cs.text_scramble_p > 0) == ("text" in name)
        assert (cs.misalign_p > 0) == ("batch" in name)

    def test_probability_range(self):
        with pytest.raises(ConfigError):
            CorruptionSpec(image_noise_p=1.5)
        with pytest.raises(ConfigError):
            CorruptionSpec.channel("audio", 0.1)


def test_export_import_round_trip(tmp_path):
    ds = generate(SPEC, 37)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    same(back, ds)
    header = 4 + 4 + 8 + 4 + 4
    assert path.stat().st_size == header + 37 * (8 * SPEC.image_dim + 4 * SPEC.text_len + 4)


def test_import_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"nope" + bytes(40))
    with pytest.raises(ConfigError):
        load_dataset(path)
