"""Toy classifier training loop."""

import numpy as np
import pytest

from regconv.group import CyclicGroup
from regconv.layers import load_checkpoint
from regconv.train import (ToyClassifier, TrainConfig, TrainingDiverged, batch_indices,
                           crop_around_object, make_split, tie_aware_hits, train_step, train_toy)
from regconv.synth import rotate_scene

TINY = dict(train_size=12, test_size=8, width=2, output_size=3, eval_every=2)


class TestConfig:
    def test_alias_and_validation(self):
        assert TrainConfig(variant="equivariant").variant == "equi"
        with pytest.raises(ValueError):
            TrainConfig(variant="dropout")
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(group_order=0)

    def test_plain_has_matched_budget(self):
        plain = TrainConfig(variant="plain", group_order=4).backbone_config()
        assert plain.group_order == 1 and plain.stem_width == 16


class TestPieces:
    def test_tie_aware_hits(self):
        logits = np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 2.0, 2.0, 0.0], [3.0, 0.0, 0.0, 0.0]])
        np.testing.assert_allclose(tie_aware_hits(logits, [2, 1, 1]), [0.25, 0.5, 0.0])

    def test_batches_pure_in_step(self):
        cfg = TrainConfig(**TINY)
        np.testing.assert_array_equal(batch_indices(cfg, 5), batch_indices(cfg, 5))
        assert not np.array_equal(batch_indices(cfg, 5), batch_indices(cfg, 6))

    def test_crop_commutes_with_quarter_turns(self):
        cfg = TrainConfig(**TINY)
        scene = make_split(cfg, "train")[0]
        window, _, _ = crop_around_object(scene, 24)
        turned, _, _ = crop_around_object(rotate_scene(scene, 1, CyclicGroup(4)), 24)
        np.testing.assert_array_equal(turned, np.rot90(window, 1, axes=(1, 2)))


class TestTraining:
    @pytest.mark.parametrize("variant", ["plain", "rotaug", "equi"])
    def test_zero_steps_is_chance(self, variant):
        res = train_toy(TrainConfig(variant=variant, steps=0, **TINY))
        assert res.final["test_upright_acc"] == 0.25
        assert res.final["test_rotated_acc"] == 0.25

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = TrainConfig(steps=4, **TINY)
        train_toy(full, out_dir=tmp_path / "full")
        train_toy(TrainConfig(steps=2, **TINY), out_dir=tmp_path / "half")
        train_toy(full, out_dir=tmp_path / "resumed", resume=tmp_path / "half" / "checkpoint")
        a, b = ToyClassifier(full), ToyClassifier(full)
        load_checkpoint(tmp_path / "full" / "checkpoint", a)
        load_checkpoint(tmp_path / "resumed" / "checkpoint", b)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.value, pb.value)
        assert (tmp_path / "resumed" / "metrics.csv").read_text() == (tmp_path / "full" / "metrics.csv").read_text()

    def test_nan_aborts(self):
        cfg = TrainConfig(**TINY)
        model = ToyClassifier(cfg)
        model.head_b.value = np.full(4, np.nan, dtype=model.head_b.value.dtype)
        with pytest.raises(TrainingDiverged, match="step 3"):
            train_step(model, cfg, make_split(cfg, "train"), 3)

    def test_loss_decreases(self):
        cfg = TrainConfig(steps=0, **TINY)
        model = ToyClassifier(cfg)
        train = make_split(cfg, "train")
        first, _ = train_step(model, cfg, train, 0)
        for _ in range(5):
            train_step(model, cfg, train, 0)
        last, _ = train_step(model, cfg, train, 0)
        assert last < first
