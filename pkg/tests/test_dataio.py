import numpy as np
import pytest

from distqn.dataio import (
    DatasetFormatError,
    dataset_from_bytes,
    dataset_to_bytes,
    load_csv,
    load_dataset,
    save_csv,
    save_dataset,
)
from distqn.models import gen_example2


def test_binary_round_trip(tmp_path):
    ds = gen_example2(40, 3, seed=1)
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.kind is ds.kind
    assert back.X.tobytes() == ds.X.tobytes() and back.Y.tobytes() == ds.Y.tobytes()


def test_csv_round_trip(tmp_path):
    ds = gen_example2(15, 2, seed=2)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", "poisson")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.Y, ds.Y)


def test_corrupt_containers_rejected():
    buf = dataset_to_bytes(gen_example2(10, 2, seed=0))
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(buf[:-3])
