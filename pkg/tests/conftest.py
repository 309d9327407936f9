import numpy as np
import pytest


@pytest.fixture(scope="session")
def iris_csv(tmp_path_factory):
    """Canonical 150-row iris CSV written from sklearn's bundled copy."""
    from sklearn.datasets import load_iris

    d = load_iris()
    path = tmp_path_factory.mktemp("data") / "iris.csv"
    with open(path, "w") as fh:
        fh.write("sepal_length,sepal_width,petal_length,petal_width,species\n")
        for row, lab in zip(d.data, d.target):
            fh.write(",".join(str(v) for v in row) + f",{int(lab)}\n")
    return path


@pytest.fixture(scope="session")
def digits():
    """Bundled 8x8 digits, brightness-normalized to [0, 1]."""
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    return X / 16.0, y


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
