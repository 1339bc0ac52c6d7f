# pylint: disable=missing-module-docstring
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from kiss_ocr.dataset import (
    LABELS_FILE,
    META_FILE,
    DatasetError,
    Sample,
    read_dataset,
    read_meta,
    read_pgm,
    write_dataset,
    write_pgm,
)
from kiss_ocr.synth import generate_samples


def test_pgm_round_trip(rng, tmp_path):
    image = rng.integers(0, 256, (7, 11), dtype=np.uint8)
    write_pgm(tmp_path / "image.pgm", image)
    assert (tmp_path / "image.pgm").read_bytes().startswith(b"P5\n11 7\n255\n")
    assert_array_equal(read_pgm(tmp_path / "image.pgm"), image)


def test_pgm_header_with_comments(tmp_path):
    (tmp_path / "image.pgm").write_bytes(b"P5\n# scanner output\n3 2\n# depth\n255\n" + bytes(range(6)))
    assert_array_equal(read_pgm(tmp_path / "image.pgm"), [[0, 1, 2], [3, 4, 5]])


@pytest.mark.parametrize(
    "content",
    [b"P2\n3 2\n255\n0 1 2 3 4 5", b"P5\n3 2\n255\n\x00\x01", b"P5\n3 2\n65535\n" + bytes(12), b""],
)
def test_malformed_pgm(tmp_path, content):
    (tmp_path / "image.pgm").write_bytes(content)
    with pytest.raises(DatasetError):
        read_pgm(tmp_path / "image.pgm")


def test_missing_pgm(tmp_path):
    with pytest.raises(DatasetError, match="missing.pgm"):
        read_pgm(tmp_path / "missing.pgm")


@pytest.mark.parametrize("image", [np.zeros((2, 2), dtype=np.float32), np.zeros((2, 2, 3), dtype=np.uint8)])
def test_unsupported_images_are_not_written(tmp_path, image):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "image.pgm", image)


def test_dataset_round_trip(tmp_path):
    samples = generate_samples(5, seed=3, max_len=6)
    directory = write_dataset(tmp_path / "data", samples, {"seed": 3})
    assert sorted(path.name for path in directory.iterdir())[:2] == ["000000.pgm", "000001.pgm"]
    meta = read_meta(directory / META_FILE)
    assert meta == {"count": "5", "seed": "3"}
    assert list(meta)[0] == "count"
    loaded = read_dataset(directory)
    assert [sample.label for sample in loaded] == [sample.label for sample in samples]
    for a, b in zip(loaded, samples):
        assert_array_equal(a.image, b.image)


def test_dataset_files_are_reproducible(tmp_path):
    samples = generate_samples(3, seed=11)
    first = write_dataset(tmp_path / "a", samples, {"seed": 11})
    second = write_dataset(tmp_path / "b", samples, {"seed": 11})
    for path in first.iterdir():
        assert path.read_bytes() == (second / path.name).read_bytes()


def test_missing_labels(tmp_path):
    with pytest.raises(DatasetError, match=LABELS_FILE):
        read_dataset(tmp_path)


@pytest.mark.parametrize("line", ["000000.pgm", "000000.pgm\t", "000000.pgm\t" + "A" * 24, "000000.pgm\tA B"])
def test_invalid_labels(tmp_path, line):
    write_dataset(tmp_path, [Sample(np.zeros((4, 4), dtype=np.uint8), "A")])
    (tmp_path / LABELS_FILE).write_text(line + "\n", encoding="utf-8")
    with pytest.raises(DatasetError, match=":1:"):
        read_dataset(tmp_path)


def test_meta_comments_and_errors(tmp_path):
    path = tmp_path / META_FILE
    path.write_text("# generated\n\ncount = 2\nname = a = b\n", encoding="utf-8")
    assert read_meta(path) == {"count": "2", "name": "a = b"}
    path.write_text("count 2\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_meta(path)
