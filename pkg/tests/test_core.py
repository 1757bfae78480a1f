import dataclasses

import numpy as np
import pytest
import torch
from numpy.testing import assert_array_equal

from mammnet.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from mammnet.config import (LossWeights, ModelConfig, TrainConfig, dump_config, load_config,
                            model_config_from_dict, train_config_from_dict, config_to_dict)
from mammnet.datagen import PhantomConfig
from mammnet.errors import CheckpointError, ConfigError, ConfigMismatchError, ShapeError
from mammnet.model import build_model
from mammnet.rng import case_rngs, seeded_rng, split_rng, torch_seeded
from mammnet.types import CaseAnnotation, ImagePair, InstanceGT


def _blank(h=64, w=64):
    return np.zeros((h, w), dtype=np.float32)


class TestImagePair:
    def test_views_are_frozen_float32(self):
        pair = ImagePair(_blank(), _blank())
        assert pair.cc_image.dtype == np.float32
        with pytest.raises(ValueError):
            pair.cc_image[0, 0] = 1.0

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ShapeError):
            ImagePair(_blank(64, 64), _blank(64, 96))

    @pytest.mark.parametrize("h,w,axis", [(100, 64, "height"), (64, 70, "width")])
    def test_size_not_divisible_names_dimension(self, h, w, axis):
        with pytest.raises(ShapeError, match=axis):
            ImagePair(_blank(h, w), _blank(h, w))

    def test_copy_isolated_from_caller(self):
        src = _blank()
        pair = ImagePair(src, src)
        src[0, 0] = 1.0
        assert pair.cc_image[0, 0] == 0.0

    def test_bad_laterality(self):
        with pytest.raises(ConfigError):
            ImagePair(_blank(), _blank(), laterality="middle")


class TestCaseAnnotation:
    def _inst(self):
        return InstanceGT(np.ones((4, 4), bool), False)

    def test_out_of_range_pair(self):
        with pytest.raises(ConfigError):
            CaseAnnotation((self._inst(),), (self._inst(),), frozenset({(0, 1)}))

    def test_instance_in_two_pairs(self):
        two = (self._inst(), self._inst())
        with pytest.raises(ConfigError, match="more than one pair"):
            CaseAnnotation(two, two, frozenset({(0, 0), (0, 1)}))

    def test_counts_and_sorted_pairs(self):
        two = (self._inst(), self._inst())
        ann = CaseAnnotation(two, two, {(1, 0), (0, 1)})
        assert ann.num_instances == 4
        assert ann.sorted_pairs() == [(0, 1), (1, 0)]

    def test_empty_annotation_is_valid(self):
        assert CaseAnnotation().num_instances == 0


class TestConfig:
    def test_defaults_match_training_recipe(self):
        t = TrainConfig()
        assert (t.batch_size, t.learning_rate, t.weight_decay) == (5, 1e-4, 1e-5)
        m = ModelConfig()
        assert m.num_vitd_blocks == 10
        assert m.fusion_downsample == 4

    @pytest.mark.parametrize("kwargs", [
        {"embed_dim": 60, "num_heads": 8},
        {"image_size": 100},
        {"ablation": "nope"},
        {"backbone_channels": (8, 16, 32)},
        {"num_object_queries": 0},
    ])
    def test_invalid_model_config(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_negative_loss_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(dice_weight=-1)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="embed"):
            model_config_from_dict({"embed": 3})

    def test_dict_round_trip(self):
        t = TrainConfig(loss=LossWeights(no_object=0.2), max_steps=7)
        assert train_config_from_dict(config_to_dict(t)) == t

    def test_yaml_round_trip(self, tmp_path):
        m, t, p = ModelConfig(embed_dim=32, num_heads=4), TrainConfig(seed=3), PhantomConfig(jitter_sigma=0.0)
        dump_config(tmp_path / "c.yaml", m, t, p)
        assert load_config(tmp_path / "c.yaml") == (m, t, p)

    def test_unknown_section(self, tmp_path):
        (tmp_path / "c.yaml").write_text("optim: {}\n")
        with pytest.raises(ConfigError, match="optim"):
            load_config(tmp_path / "c.yaml")


class TestRng:
    def test_same_seed_same_stream(self):
        assert_array_equal(seeded_rng(5).random(8), seeded_rng(5).random(8))

    @pytest.mark.parametrize("seed", [-1, 1.5, True])
    def test_invalid_seed(self, seed):
        with pytest.raises(ValueError):
            seeded_rng(seed)

    def test_split_streams_differ(self):
        a, b = split_rng(seeded_rng(0), 2)
        assert not np.array_equal(a.random(4), b.random(4))

    def test_case_stream_independent_of_count(self):
        assert_array_equal(case_rngs(9, 3)[1].random(5), case_rngs(9, 10)[1].random(5))

    def test_torch_seeded_restores_global_state(self):
        torch.manual_seed(1)
        before = torch.rand(3)
        torch.manual_seed(1)
        with torch_seeded(99):
            torch.rand(10)
        assert torch.equal(torch.rand(3), before)


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path, tiny_config):
        model = build_model(tiny_config, seed=1)
        path = save_checkpoint(tmp_path / "m.ckpt", model, 17, tiny_config, TrainConfig(max_steps=5))
        return path, model

    def test_round_trip(self, saved, tiny_config):
        path, model = saved
        ckpt = load_checkpoint(path, tiny_config)
        assert ckpt.step == 17
        assert ckpt.train_config.max_steps == 5
        for k, v in model.state_dict().items():
            assert torch.equal(ckpt.state_dict[k], v)

    def test_header_layout(self, saved):
        raw = saved[0].read_bytes()
        assert raw[:12] == MAGIC
        assert int.from_bytes(raw[12:16], "little") == FORMAT_VERSION

    def test_truncated_file_reports_offset(self, saved):
        path, _ = saved
        raw = path.read_bytes()
        path.write_bytes(raw[:200])
        with pytest.raises(CheckpointError, match="offset 200"):
            load_checkpoint(path)

    def test_flipped_byte_fails_checksum(self, saved):
        path, _ = saved
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_version_mismatch_names_both(self, saved):
        path, _ = saved
        raw = bytearray(path.read_bytes())
        raw[12:16] = (FORMAT_VERSION + 1).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match=f"version {FORMAT_VERSION + 1}.*version {FORMAT_VERSION}"):
            load_checkpoint(path)

    def test_config_mismatch_names_field(self, saved, tiny_config):
        other = dataclasses.replace(tiny_config, num_object_queries=7)
        with pytest.raises(ConfigMismatchError, match="num_object_queries"):
            load_checkpoint(saved[0], other)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"\x00" * 80)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")
