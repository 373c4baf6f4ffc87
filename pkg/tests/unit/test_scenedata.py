"""
Unit tests for the scene generator, tokenizer, subset sampling and dataset storage.
"""
import numpy as np
import pytest

from prompt_decoupler.errors import ContractError, DataError, FormatError, ResolutionError, VocabularyError
from prompt_decoupler.scenedata import (
    BACKGROUND_NAMES,
    DatasetSpec,
    SceneGenerator,
    Tokenizer,
    class_names,
    few_shot,
    generate,
    load_dataset,
    render_background,
    render_foreground,
    restrict_to_classes,
    save_dataset,
    split_base_novel,
    subset_fraction,
)
from prompt_decoupler.scenedata.generator import MAX_FOREGROUND_FRACTION, MIN_FOREGROUND_FRACTION, rasterize_shape
from prompt_decoupler.scenedata.storage import MASK_MAGIC, decode_mask, encode_mask, read_mask_file, write_mask_file


def test_tokenizer_vocabulary_layout():
    """Test special ids and the closed vocabulary size."""
    tokenizer = Tokenizer()
    assert tokenizer.vocab_size == 63
    assert tokenizer.pad_id == 0
    assert tokenizer.eot_id == 2
    assert len(BACKGROUND_NAMES) == 25


def test_tokenizer_round_trip_of_rendered_captions():
    """Test that rendering and decoding are stable."""
    tokenizer = Tokenizer(8)
    for name in class_names(10):
        caption = render_foreground(name)
        assert tokenizer.decode(tokenizer.encode(caption)) == caption
    caption = render_background("sky")
    ids = tokenizer.encode(caption)
    assert ids.shape == (8,)
    assert ids[0] == 1
    assert list(ids[6:]) == [0, 0]
    assert tokenizer.decode(ids) == "a clean origami sky"


def test_tokenizer_errors():
    """Test unknown words and overlong texts."""
    tokenizer = Tokenizer(8)
    with pytest.raises(VocabularyError):
        tokenizer.encode("a photo of purple-disk")
    with pytest.raises(ContractError):
        tokenizer.encode("a photo of a photo of sky")
    with pytest.raises(ContractError):
        Tokenizer(2)
    assert tokenizer.encode_batch([]).shape == (0, 8)


def test_class_names_mix_shapes_and_colors():
    """Test the class catalog prefix."""
    assert class_names(4) == ["red-disk", "blue-square", "yellow-triangle", "red-diamond"]
    assert len(set(class_names(30))) == 30
    with pytest.raises(ContractError):
        class_names(31)


def test_dataset_spec_validation():
    """Test dataset parameter checks."""
    with pytest.raises(ContractError):
        DatasetSpec(num_classes=1).validate()
    with pytest.raises(ContractError):
        DatasetSpec(image_size=4).validate()
    with pytest.raises(ContractError):
        DatasetSpec(num_background_classes=26).validate()
    with pytest.raises(ContractError):
        DatasetSpec(multi_object=True, max_objects=4).validate()


def test_generated_samples_satisfy_mask_and_label_invariants(dataset, data_spec):
    """Test counts, foreground fractions, background ids and value ranges."""
    assert len(dataset.train) == data_spec.num_classes * data_spec.train_per_class
    assert len(dataset.test) == data_spec.num_classes * data_spec.test_per_class
    ids = [s.sample_id for s in dataset.samples()]
    assert len(set(ids)) == len(ids)
    for sample in dataset.samples():
        assert sample.image.shape == (3, 16, 16)
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert set(np.unique(sample.gt_mask)) <= {0, 1}
        assert MIN_FOREGROUND_FRACTION <= sample.gt_mask.mean() <= MAX_FOREGROUND_FRACTION
        assert 0 <= sample.bg_class < len(BACKGROUND_NAMES)
        assert len(sample.labels) == 1


def test_generation_is_deterministic(data_spec):
    """Test byte-identical regeneration from the same seed."""
    first = generate(data_spec, seed=5)
    second = generate(data_spec, seed=5)
    other = generate(data_spec, seed=6)
    for a, b in zip(first.samples(), second.samples()):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.gt_mask.tobytes() == b.gt_mask.tobytes()
    assert any(a.image.tobytes() != c.image.tobytes() for a, c in zip(first.samples(), other.samples()))


def test_multi_object_samples_have_distinct_labels(multi_dataset):
    """Test multi-object scenes."""
    for sample in multi_dataset.samples():
        assert 1 <= len(sample.labels) <= 2
        assert len(set(sample.labels)) == len(sample.labels)
    assert any(len(s.labels) == 2 for s in multi_dataset.samples())


def test_background_sample_has_empty_mask(data_spec):
    """Test texture-only scenes."""
    sample = SceneGenerator(data_spec).background_sample(0, 3, 6, 99)
    assert sample.labels == ()
    assert sample.label == -1
    assert sample.gt_mask.sum() == 0
    assert sample.bg_class == 6


def test_rasterize_shape_fills_inside():
    """Test shape rasterization and unknown shapes."""
    mask = rasterize_shape("disk", 16, (8.0, 8.0), 4.0, 0.0)
    assert mask[8, 8] == 1
    assert mask[0, 0] == 0
    with pytest.raises(ValueError):
        rasterize_shape("blob", 16, (8.0, 8.0), 4.0, 0.0)


def test_few_shot_draws_exact_shots_from_training_pool(dataset):
    """Test few-shot sampling."""
    picked = few_shot(dataset, 2, seed=1)
    assert len(picked) == 2 * dataset.spec.num_classes
    assert all(s.split == "train" for s in picked)
    counts = np.bincount([s.label for s in picked])
    assert list(counts) == [2] * dataset.spec.num_classes
    assert [s.sample_id for s in picked] == [s.sample_id for s in few_shot(dataset, 2, seed=1)]
    assert {s.label for s in few_shot(dataset, 1, seed=1, classes=[1, 3])} == {1, 3}


def test_few_shot_errors(dataset):
    """Test shot count checks."""
    with pytest.raises(ContractError):
        few_shot(dataset, 0, seed=1)
    with pytest.raises(DataError):
        few_shot(dataset, dataset.spec.train_per_class + 1, seed=1)


def test_split_base_novel_partitions_classes():
    """Test the equal base/novel halves."""
    base, novel = split_base_novel(10, seed=0)
    assert len(base) == len(novel) == 5
    assert sorted(base + novel) == list(range(10))
    assert split_base_novel(10, seed=0) == (base, novel)
    with pytest.raises(ContractError):
        split_base_novel(5, seed=0)


def test_subset_fraction_is_stratified(dataset):
    """Test fraction subsets."""
    half = subset_fraction(dataset.train, 0.5, seed=2)
    assert len(half) == len(dataset.train) // 2
    assert list(np.bincount([s.label for s in half])) == [2, 2, 2, 2]
    assert len(subset_fraction(dataset.train, 1.0, seed=2)) == len(dataset.train)
    with pytest.raises(ContractError):
        subset_fraction(dataset.train, 0.0, seed=2)


def test_restrict_to_classes(dataset):
    """Test filtering by primary label."""
    kept = restrict_to_classes(dataset.test, [0, 2])
    assert {s.label for s in kept} == {0, 2}
    assert len(kept) == 2 * dataset.spec.test_per_class


def test_dataset_store_round_trip(tmp_path, dataset):
    """Test save then load reproduces every sample."""
    save_dataset(dataset, tmp_path / "scenes")
    loaded = load_dataset(tmp_path / "scenes")
    assert loaded.spec == dataset.spec
    for a, b in zip(dataset.samples(), loaded.samples()):
        assert a.sample_id == b.sample_id
        assert a.labels == b.labels
        assert a.bg_class == b.bg_class
        np.testing.assert_array_equal(a.gt_mask, b.gt_mask)
        np.testing.assert_allclose(a.image, b.image, atol=1e-12)


def test_dataset_store_errors(tmp_path, dataset):
    """Test missing manifests and corrupt files."""
    with pytest.raises(ResolutionError):
        load_dataset(tmp_path / "nowhere")
    root = save_dataset(dataset, tmp_path / "scenes")
    (root / "images" / "000000.rgb").write_bytes(b"\x00" * 5)
    with pytest.raises(FormatError):
        load_dataset(root)


def test_mask_codec_layout():
    """Test the mask file header and body."""
    mask = np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    payload = encode_mask(mask)
    assert payload[:4] == MASK_MAGIC
    assert payload[12:] == bytes([0, 255, 255, 255, 0, 0])
    np.testing.assert_array_equal(decode_mask(payload), mask)


def test_decode_mask_reports_offset_of_invalid_byte():
    """Test that corrupt mask bytes are located."""
    payload = bytearray(encode_mask(np.zeros((2, 3), dtype=np.uint8)))
    payload[12 + 4] = 7
    with pytest.raises(FormatError, match="offset 16 \\(row 1, col 1\\)"):
        decode_mask(bytes(payload))
    with pytest.raises(FormatError, match="bad magic"):
        decode_mask(b"NOPE" + bytes(payload[4:]))
    with pytest.raises(FormatError):
        decode_mask(bytes(payload[:-1]))


def test_mask_file_helpers(tmp_path):
    """Test mask files on disk."""
    mask = np.eye(4, dtype=np.uint8)
    write_mask_file(tmp_path / "m" / "eye.msk", mask)
    np.testing.assert_array_equal(read_mask_file(tmp_path / "m" / "eye.msk"), mask)
    with pytest.raises(ResolutionError):
        read_mask_file(tmp_path / "missing.msk")
