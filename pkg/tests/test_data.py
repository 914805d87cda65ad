import struct

import numpy as np
import pytest

from mcasim import data


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.zeros((2, 28, 28), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[1, 27, 27] = 51
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    data.write_idx(ip, imgs)
    data.write_idx(lp, np.array([3, 7]))
    return ip, lp


def test_load_crafted_pair(idx_pair):
    b = data.load_mnist_idx(*idx_pair)
    assert b.train_x.shape == (2, 784) and b.train_y.tolist() == [3, 7]
    assert b.train_x[0, 0] == 1.0 and b.train_x[1, -1] == pytest.approx(0.2)
    assert b.test_x.shape == (0, 784)
    assert len(b.meta["digests"]) == 2


def test_bad_magic_names_offset(idx_pair, tmp_path):
    ip, lp = idx_pair
    with pytest.raises(data.DataError, match="offset 0"):
        data.load_mnist_idx(lp, lp)
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">I", 0x1234) + ip.read_bytes()[4:])
    with pytest.raises(data.DataError, match="0x00001234"):
        data.load_mnist_idx(bad, lp)


def test_truncated_payload(idx_pair, tmp_path):
    ip, lp = idx_pair
    t = tmp_path / "trunc"
    t.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(data.DataError, match="truncated payload"):
        data.load_mnist_idx(t, lp)
    t.write_bytes(b"\x00\x00")
    with pytest.raises(data.DataError, match="truncated header"):
        data.load_mnist_idx(t, lp)


def test_count_mismatch(idx_pair, tmp_path):
    ip, _ = idx_pair
    lp = tmp_path / "three"
    data.write_idx(lp, np.array([1, 2, 3]))
    with pytest.raises(data.DataError, match="count mismatch"):
        data.load_mnist_idx(ip, lp)


def test_missing_file(tmp_path):
    with pytest.raises(data.DataError, match="cannot read"):
        data.load_mnist_idx(tmp_path / "a", tmp_path / "b")


def test_bundle_validation_and_subset():
    x = np.zeros((4, 3))
    y = np.array([0, 1, 2, 3])
    b = data.DatasetBundle(x, y, x[:2], y[:2])
    assert b.subset(3, 1).train_x.shape[0] == 3
    with pytest.raises(data.DataError):
        data.DatasetBundle(x + 2, y, x, y)
    with pytest.raises(data.DataError):
        data.DatasetBundle(x, y + 9, x, y)
    with pytest.raises(data.DataError):
        data.DatasetBundle(x, y[:3], x, y)


def test_write_idx_rejects_2d(tmp_path):
    with pytest.raises(data.DataError):
        data.write_idx(tmp_path / "x", np.zeros((2, 2)))
