import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal
from scipy import ndimage

from mammnet.datagen import (PhantomConfig, augment, flip_pair, generate_case, generate_cases,
                             generate_dataset, load_dataset, rle_decode, rle_encode)
from mammnet.errors import ConfigError, DatasetError, MalformedMaskError
from mammnet.rng import seeded_rng

ALL_OFF = {"flip": False, "rotation": False, "brightness_contrast": False, "random_scale": False}


class TestPhantomConfig:
    @pytest.mark.parametrize("kwargs", [
        {"paired_fraction": 1.5}, {"malignant_fraction": -0.1}, {"image_size": 100},
        {"lesion_radius": (6.0, 3.0)}, {"distractor_labels": "maybe"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PhantomConfig(**kwargs)

    def test_lists_become_tuples(self):
        assert PhantomConfig(lesions_per_case=[0, 3]).lesions_per_case == (0, 3)


class TestGenerateCase:
    def test_deterministic(self, small_phantom):
        a = generate_case(seeded_rng(11), small_phantom, "x")
        b = generate_case(seeded_rng(11), small_phantom, "x")
        assert a[0] == b[0] and a[1] == b[1]

    def test_empty_case(self):
        cfg = PhantomConfig(image_size=64, lesions_per_case=(0, 0), distractors_per_case=(0, 0))
        pair, ann = generate_case(seeded_rng(0), cfg)
        assert ann.num_instances == 0 and not ann.pair_map
        assert pair.cc_image.max() > 0

    def test_images_in_unit_range(self, small_cases):
        for pair, _ in small_cases:
            for v in ("cc", "mlo"):
                assert 0.0 <= pair.view(v).min() and pair.view(v).max() <= 1.0

    def test_shared_axis_without_jitter(self):
        cfg = PhantomConfig(lesions_per_case=(1, 1), distractors_per_case=(0, 0), jitter_sigma=0.0,
                            malignant_fraction=0.0, texture_amplitude=0.0)
        for seed in range(5):
            _, ann = generate_case(seeded_rng(seed), cfg)
            (i, j), = ann.pair_map
            xs = [ndimage.center_of_mass(inst.mask)[1] for inst in (ann.cc[i], ann.mlo[j])]
            assert xs[0] == pytest.approx(xs[1], abs=0.5)

    def test_pairs_share_malignancy(self):
        cfg = PhantomConfig(lesions_per_case=(2, 3))
        for pair, ann in generate_cases(1, cfg, 5):
            for i, j in ann.pair_map:
                assert ann.cc[i].malignant == ann.mlo[j].malignant

    def test_distractors_are_unpaired_instances_when_labelled(self):
        cfg = PhantomConfig(lesions_per_case=(1, 1), paired_fraction=1.0,
                            distractors_per_case=(2, 2), distractor_labels="instance")
        for _, ann in generate_cases(2, cfg, 4):
            assert ann.num_instances == 4
            assert len(ann.pair_map) == 1

    def test_background_distractors_not_annotated(self):
        cfg = PhantomConfig(lesions_per_case=(1, 1), distractors_per_case=(2, 2))
        for _, ann in generate_cases(2, cfg, 4):
            assert ann.num_instances == 2

    def test_masks_brighter_than_surroundings(self):
        diffs = []
        for pair, ann in generate_cases(4, PhantomConfig(), 6):
            for v in ("cc", "mlo"):
                img = pair.view(v)
                for inst in ann.view(v):
                    ring = ndimage.binary_dilation(inst.mask, iterations=4) & ~ndimage.binary_dilation(inst.mask)
                    diffs.append(img[inst.mask].mean() - img[ring].mean())
        assert np.mean(diffs) > 0.1
        assert min(diffs) > 0


class TestRle:
    def test_hand_example(self):
        m = np.array([[0, 1, 1], [0, 0, 1]], bool)
        assert rle_encode(m) == [1, 2, 2, 1]
        assert rle_encode(np.array([[1, 0]], bool)) == [0, 1, 1]

    def test_random_mask_identity(self, rng):
        m = rng.random((64, 64)) > 0.6
        back = rle_decode(rle_encode(m), (64, 64))
        for y in range(64):
            for x in range(64):
                assert back[y, x] == m[y, x]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.data())
    def test_round_trip_property(self, h, w, data):
        bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
        m = np.array(bits, bool).reshape(h, w)
        counts = rle_encode(m)
        assert sum(counts) == h * w
        assert_array_equal(rle_decode(counts, (h, w)), m)

    def test_wrong_sum(self):
        with pytest.raises(MalformedMaskError, match="sum"):
            rle_decode([3, 4], (3, 3))

    @pytest.mark.parametrize("counts", [[-1, 10], [1.5, 7.5], "9"])
    def test_bad_counts(self, counts):
        with pytest.raises(MalformedMaskError):
            rle_decode(counts, (3, 3))


class TestDatasetIO:
    @pytest.fixture
    def written(self, tmp_path, small_phantom):
        manifest = generate_dataset(5, small_phantom, 3, tmp_path / "ds")
        return tmp_path / "ds", manifest

    def test_layout(self, written):
        root, manifest = written
        assert len(manifest["cases"]) == 3
        assert len(list((root / "images").glob("*.png"))) == 6
        inst = manifest["cases"][0]["instances"][0]
        assert set(inst) == {"view", "rle", "malignant", "pair_id"}

    def test_round_trip_exact(self, written, small_phantom):
        root, _ = written
        loaded = load_dataset(root)
        original = generate_cases(5, small_phantom, 3)
        for (p1, a1), (p2, a2) in zip(loaded, original):
            assert p1 == p2
            assert a1 == a2

    def test_pngs_are_16_bit(self, written):
        from PIL import Image
        with Image.open(next((written[0] / "images").glob("*.png"))) as im:
            assert im.mode in ("I;16", "I;16B", "I")

    def test_byte_identical_regeneration(self, tmp_path, small_phantom):
        generate_dataset(2, small_phantom, 2, tmp_path / "a")
        generate_dataset(2, small_phantom, 2, tmp_path / "b")
        for rel in ["manifest.json"] + [f"images/{p.name}" for p in (tmp_path / "a" / "images").iterdir()]:
            assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False)

    def test_missing_png_named(self, written):
        root, _ = written
        (root / "images" / "case_0001_mlo.png").unlink()
        with pytest.raises(DatasetError, match="case_0001_mlo.png"):
            load_dataset(root)

    def _edit(self, root, fn):
        path = root / "manifest.json"
        doc = json.loads(path.read_text())
        fn(doc)
        path.write_text(json.dumps(doc))

    def test_bad_rle_length(self, written):
        root, _ = written
        self._edit(root, lambda d: d["cases"][0]["instances"][0]["rle"].append(5))
        with pytest.raises(MalformedMaskError):
            load_dataset(root)

    def test_pair_id_in_one_view(self, written):
        root, _ = written

        def orphan(doc):
            for case in doc["cases"]:
                for inst in case["instances"]:
                    if inst["view"] == "mlo":
                        inst["pair_id"] = None
        self._edit(root, orphan)
        with pytest.raises(DatasetError, match="only in the cc view"):
            load_dataset(root)

    def test_missing_field_named(self, written):
        root, _ = written
        self._edit(root, lambda d: d["cases"][1].pop("laterality"))
        with pytest.raises(DatasetError, match=r"cases\[1\]\.laterality"):
            load_dataset(root)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)

    def test_empty_dataset(self, tmp_path, small_phantom):
        manifest = generate_dataset(0, small_phantom, 0, tmp_path / "e")
        assert manifest["cases"] == []
        assert load_dataset(tmp_path / "e") == []


class TestAugment:
    def test_all_off_is_identity(self, small_cases):
        pair, ann = small_cases[0]
        p2, a2 = augment(pair, ann, seeded_rng(0), ALL_OFF)
        assert p2 == pair and a2 == ann

    def test_horizontal_flip_involution(self, small_cases):
        pair, ann = small_cases[0]
        p2, a2 = flip_pair(*flip_pair(pair, ann, axis=1), axis=1)
        assert p2 == pair and a2 == ann

    def test_vertical_flip_keeps_laterality(self, small_cases):
        pair, ann = small_cases[1]
        p2, _ = flip_pair(pair, ann, axis=0)
        assert p2.laterality == pair.laterality
        assert_array_equal(p2.cc_image, pair.cc_image[::-1])

    def test_rotation_preserves_mask_area(self):
        pair, ann = generate_case(seeded_rng(3), PhantomConfig(lesion_radius=(8.0, 10.0)))
        flags = dict(ALL_OFF, rotation=True)
        for seed in range(5):
            _, a2 = augment(pair, ann, seeded_rng(seed), flags)
            for v in ("cc", "mlo"):
                for before, after in zip(ann.view(v), a2.view(v)):
                    assert after.mask.sum() == pytest.approx(before.mask.sum(), rel=0.02)

    def test_labels_unchanged(self, small_cases):
        flags = {k: True for k in ALL_OFF}
        for seed, (pair, ann) in enumerate(small_cases):
            p2, a2 = augment(pair, ann, seeded_rng(seed), flags)
            assert a2.pair_map == ann.pair_map
            assert [i.malignant for i in a2.cc] == [i.malignant for i in ann.cc]
            assert p2.shape == pair.shape
            assert 0.0 <= p2.cc_image.min() and p2.cc_image.max() <= 1.0
