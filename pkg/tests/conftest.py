import numpy as np
import pytest

from config import HpmConfig
from data import generate_corpus, load_dataset, write_corpus
from hpm import generate_masks
from tinynn import init_params


def ellipse(shape, center, a, b, angle=0.0):
    """Fylld ellips i displaykoordinater; center=(x, y) i kolumn/rad, angle moturs."""
    rows, cols = np.indices(shape, dtype=np.float64)
    x = cols - center[0]
    y = center[1] - rows
    t = np.deg2rad(angle)
    u = x * np.cos(t) + y * np.sin(t)
    v = -x * np.sin(t) + y * np.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@pytest.fixture
def make_ellipse():
    return ellipse


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    return init_params([4, 8], in_channels=1, decoder_channels=4, seed=0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """40 syntetiska utsnitt i fyra klasser, skrivna som en datamängdskatalog."""
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(generate_corpus(40, 4, seed=3), out)
    return out


@pytest.fixture(scope="session")
def masks_dir(corpus_dir, tmp_path_factory):
    """Pseudomasker för de första tolv utsnitten i korpusen."""
    out = tmp_path_factory.mktemp("masks")
    crops = load_dataset(corpus_dir)[:12]
    generate_masks(crops, HpmConfig(), out, seed=0, truth_dir=corpus_dir / "truth")
    return out
