import numpy as np
import pytest

from mvda.manifest import auto_holdout, split_by_container, strip_labels
from mvda.synthetic import SynthConfig, generate_synthetic
from mvda.trainer import TrainData, load_images


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 48-record two-domain dataset rendered once per session."""
    root = tmp_path_factory.mktemp("smallds")
    cfg = SynthConfig(
        class_count=3,
        containers_per_class_per_domain=2,
        dates=1,
        views_per_container_per_date=4,
        image_size=16,
        seed=11,
    )
    manifest = generate_synthetic(cfg, root)
    return cfg, manifest, root


@pytest.fixture(scope="session")
def small_train_data(small_dataset):
    _, manifest, root = small_dataset
    train_m, test_m = split_by_container(manifest, auto_holdout(manifest))
    images = load_images(manifest, root)
    return TrainData(
        source_train=train_m.by_domain("source"),
        target_train=strip_labels(train_m.by_domain("target")),
        images=images,
        target_test=test_m.by_domain("target"),
    )


class ScriptedRng:
    """Deterministic stand-in for a Generator with pre-scripted draws."""

    def __init__(self, randoms=(), integers=()):
        self.randoms = list(randoms)
        self.ints = list(integers)
        self.random_calls = 0

    def random(self):
        self.random_calls += 1
        return self.randoms.pop(0)

    def integers(self, low, high=None):
        return self.ints.pop(0)


@pytest.fixture
def scripted_rng():
    return ScriptedRng


def random_image(rng, h=16, w=16):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))


@pytest.fixture
def make_image():
    return random_image
