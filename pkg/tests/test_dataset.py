import numpy as np
import pytest

from constants import (
    BACKGROUND_SUBTRACTION,
    FRAME_DIFFERENCE,
    KEY_FRAME,
    MANIFEST_NAME,
    TDL_OUTPUT,
)
from dataset import (
    DsaTrainingDataset,
    ManifestEntry,
    dataset_hash,
    holdout_bucket,
    load_mask,
    load_sample,
    read_manifest,
    split_validation,
)
from utils import dump_json, load_json


def test_test_entries_carry_no_augmentation():
    with pytest.raises(ValueError):
        ManifestEntry(id="s", split="test", key_frame_index=12, aug_frame_indices=(13, 14))
    with pytest.raises(ValueError):
        ManifestEntry(id="s", split="validation", key_frame_index=12)


def test_training_frames():
    entry = ManifestEntry(id="s", split="train", key_frame_index=12, aug_frame_indices=(13, 14))
    assert entry.training_frames == (12, 13, 14)


def test_read_manifest_round_trip(tiny_dataset):
    again = read_manifest(tiny_dataset.root)
    assert again.samples == tiny_dataset.samples
    assert again.root == tiny_dataset.root
    assert dataset_hash(again) == dataset_hash(tiny_dataset)


def test_read_manifest_rejects_unknown_schema(tmp_path, tiny_dataset):
    data = load_json(tiny_dataset.root / MANIFEST_NAME)
    data["schema_version"] = 99
    dump_json(data, tmp_path / MANIFEST_NAME)
    with pytest.raises(ValueError):
        read_manifest(tmp_path)


def test_read_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)


def test_load_sample_unknown_id(tiny_dataset):
    with pytest.raises(KeyError):
        load_sample(tiny_dataset, "sample_9999")


def test_masks_are_binary_on_disk(tiny_dataset):
    entry = tiny_dataset.samples[0]
    mask = load_mask(tiny_dataset.sample_dir(entry.id) / "tumor_mask.png")
    assert set(np.unique(mask)) <= {0, 1}


def test_validation_split_is_stable():
    entries = [ManifestEntry(id=f"sample_{i:04d}", split="train", key_frame_index=12) for i in range(50)]
    fit, held_out = split_validation(entries, 0.2)
    assert len(fit) + len(held_out) == 50
    assert all(holdout_bucket(e.id) < 20 for e in held_out)
    assert split_validation(entries, 0.2) == (fit, held_out)
    assert split_validation(entries, 0.0) == (entries, [])
    with pytest.raises(ValueError):
        split_validation(entries, 1.0)


def test_training_items_with_augmentation(tiny_dataset):
    entries = tiny_dataset.entries("train")
    data = DsaTrainingDataset(tiny_dataset, entries)
    assert len(data) == 3 * len(entries)
    item = data[0]
    assert item[KEY_FRAME].shape == (1, 32, 32)
    assert item["stack"].shape == (10, 32, 32)
    assert item["fd_target"].shape == (1, 32, 32)
    assert item["tumor_mask"].shape == (1, 32, 32)
    assert item["frame_index"] == entries[0].key_frame_index
    # the last stack frame is the frame being segmented
    assert item["stack"][-1].equal(item[KEY_FRAME][0])


def test_training_items_without_augmentation(tiny_dataset):
    entries = tiny_dataset.entries("train")
    assert len(DsaTrainingDataset(tiny_dataset, entries, augment=False)) == len(entries)


def test_raw_motion_inputs_are_attached(tiny_dataset):
    entries = tiny_dataset.entries("train")[:1]
    data = DsaTrainingDataset(tiny_dataset, entries, ffs_inputs=(KEY_FRAME, FRAME_DIFFERENCE, BACKGROUND_SUBTRACTION))
    item = data[0]
    assert item[FRAME_DIFFERENCE].equal(item["fd_target"])
    assert item[BACKGROUND_SUBTRACTION].shape == (1, 32, 32)
    assert TDL_OUTPUT not in item


def test_offset_beyond_history_is_rejected(tiny_dataset):
    entries = tiny_dataset.entries("train")[:1]
    with pytest.raises(ValueError):
        DsaTrainingDataset(tiny_dataset, entries, ffs_inputs=(KEY_FRAME, FRAME_DIFFERENCE), fd_offset=15)
