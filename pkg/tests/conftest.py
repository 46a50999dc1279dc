import numpy as np
import pytest

from landrec.cli import main as cli_main


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit_rows(rng, count, dim):
    rows = rng.standard_normal((count, dim))
    return rows / np.linalg.norm(rows, axis=1)[:, np.newaxis]


@pytest.fixture(scope="session")
def default_fixture(tmp_path_factory):
    """The seed-42 default synthetic fixture with its distractor map built."""
    out = tmp_path_factory.mktemp("fixture42")
    assert cli_main(["gen", "--out", str(out)]) == 0
    assert cli_main([
        "distractors", "--manifest", str(out / "manifest.json"),
        "--out", str(out / "dmap.tsv"),
    ]) == 0
    return out
