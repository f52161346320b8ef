import pytest

from matselect import datagen as dg


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small shared dataset: 4 train + 1 thin + 2 holdout scenes at 64 px."""
    root = tmp_path_factory.mktemp("data") / "tiny"
    dg.gen_dataset(dg.DatasetConfig(train_standard=4, train_thin=1, holdout_standard=2,
                                    holdout_thin=0, illuminations=2, size=64, seed=123),
                   root)
    return root
