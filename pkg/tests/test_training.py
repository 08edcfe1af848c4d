import csv
import struct

import numpy as np
import pytest

from repforge import layers
from repforge.dataset import RepRecord, SetRecord, split_by_set
from repforge.model import ModelConfig, build_model, forward_batch
from repforge.optimizer import AdamState
from repforge.training import (
    CheckpointError, TrainConfig, load_checkpoint, run_training, save_checkpoint, stage_images,
)

SMALL = dict(variant="rect", depth=2, conv_feature_maps=(4, 6), fc_widths=(16, 8), num_classes=3)


def tiny_sets(n_sets=9, reps=2, seed=0):
    rng = np.random.default_rng(seed)
    return [
        SetRecord(f"s{i}", i % 3, [RepRecord(rng.standard_normal((int(rng.integers(50, 120)), 9)) + i % 3) for _ in range(reps)])
        for i in range(n_sets)
    ]


def test_single_rep_single_batch_takes_one_adam_step():
    sets = [SetRecord("a", 1, [RepRecord(np.ones((40, 9)))]), SetRecord("b", 0, [RepRecord(np.zeros((30, 9)))])]
    split = split_by_set(sets, 0.5, 0)
    model = build_model(ModelConfig(**SMALL))
    before = [p.copy() for p in model.params]
    x, y = stage_images(split.train_sets, split.standardizer, model.config)
    assert len(y) == 1
    logits, _ = forward_batch(model, x, training=True, rng=np.random.default_rng([7, 1, 0, 1]))
    expected_loss = layers.softmax_cross_entropy(logits[0], int(y[0]))[0]
    opt = AdamState()
    _, log = run_training(model, split, TrainConfig(batch_size=100, epochs=1, shuffle_seed=7), opt)
    assert opt.step_count == 1
    assert log.records[0].loss == expected_loss
    assert any(not np.array_equal(a, b) for a, b in zip(before, model.params))


def test_identical_seeds_give_identical_runs(tmp_path):
    def run(path):
        split = split_by_set(tiny_sets(), 0.3, 1)
        model = build_model(ModelConfig(**SMALL, seed=4))
        opt = AdamState()
        _, log = run_training(model, split, TrainConfig(batch_size=4, epochs=3, shuffle_seed=2), opt)
        save_checkpoint(model, opt, path)
        return log.losses

    a, b = run(tmp_path / "a.ck"), run(tmp_path / "b.ck")
    assert a == b
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_log_records_and_csv(tmp_path):
    split = split_by_set(tiny_sets(), 0.3, 1)
    _, log = run_training(build_model(ModelConfig(**SMALL)), split, TrainConfig(batch_size=5, epochs=2))
    assert [r.epoch for r in log.records] == [1, 2]
    assert all(r.test_acc is not None and 0 <= r.train_acc <= 1 for r in log.records)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epoch", "loss", "train_acc", "test_acc", "seconds"]
    assert float(rows[2][1]) == log.records[1].loss


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    split = split_by_set(tiny_sets(), 0.3, 1)
    model = build_model(ModelConfig(**SMALL))
    opt = AdamState()
    run_training(model, split, TrainConfig(batch_size=5, epochs=1), opt)
    path = tmp_path / "m.ck"
    save_checkpoint(model, opt, path)
    loaded, opt2 = load_checkpoint(path, expected_config=model.config)
    x = np.random.default_rng(0).standard_normal((4, 9, 784, 1))
    assert forward_batch(model, x)[0].tobytes() == forward_batch(loaded, x)[0].tobytes()
    assert opt2.step_count == opt.step_count
    assert all(np.array_equal(a, b) for a, b in zip(opt.first_moment, opt2.first_moment))
    assert np.array_equal(loaded.standardizer.std, split.standardizer.std)
    save_checkpoint(loaded, opt2, tmp_path / "again.ck")
    assert (tmp_path / "again.ck").read_bytes() == path.read_bytes()


def test_checkpoint_header_is_little_endian(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(build_model(ModelConfig(**SMALL)), AdamState(), path)
    raw = path.read_bytes()
    assert raw[:4] == b"RFCK" and struct.unpack("<I", raw[4:8])[0] == 1


def test_corrupted_magic(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(build_model(ModelConfig(**SMALL)), AdamState(), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(build_model(ModelConfig(**SMALL)), AdamState(), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_mismatched_config(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(build_model(ModelConfig(**SMALL)), AdamState(), path)
    other = ModelConfig(**{**SMALL, "num_classes": 4})
    with pytest.raises(CheckpointError, match="incompatible"):
        load_checkpoint(path, expected_config=other)


def test_label_beyond_model_classes():
    sets = [SetRecord(f"s{i}", 5, [RepRecord(np.ones((10, 9)))]) for i in range(3)]
    with pytest.raises(ValueError, match="exceeds"):
        run_training(build_model(ModelConfig(**SMALL)), split_by_set(sets, 0.3, 0), TrainConfig(epochs=1))


def test_train_config_guards():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
