import numpy as np
import pytest
import torch

from rpcodec.controller import (
    CONTENT_DIM,
    Controller,
    ControllerNet,
    ControlSignal,
    Feature,
    control,
    extract_features,
    train_controller,
)
from rpcodec.degrade import KINDS
from rpcodec.errors import ConfigurationError, TrainingError, ValidationError
from rpcodec.images import array_digest, synthetic_set
from rpcodec.trainer import controller_dataset

GOLDEN_EMBEDDING = "05941f532ad77cf975bd67fced777a7b97fbd6f4b3cc04d6f47aa4b0ae8f50c4"


@pytest.fixture(scope="module")
def seeded():
    torch.manual_seed(0)
    return Controller(ControllerNet())


def test_golden_embedding(seeded, fixture_images):
    s = seeded.signal(fixture_images[0])
    assert s.content_embedding.shape == (CONTENT_DIM,)
    assert array_digest(s.content_embedding, 5) == GOLDEN_EMBEDDING


def test_features_are_deterministic(seeded, fixture_images):
    a = extract_features(fixture_images[1], seeded)
    b = extract_features(fixture_images[1], seeded)
    assert a.dim == seeded.embedding_dim and np.array_equal(a.vector, b.vector)


def test_distinct_inputs_give_distinct_features(seeded):
    zeros = extract_features(np.zeros((32, 32, 3), np.float32), seeded).vector
    ones = extract_features(np.ones((32, 32, 3), np.float32), seeded).vector
    assert not np.allclose(zeros, ones)


def test_signal_probabilities(seeded, fixture_images):
    s = control(extract_features(fixture_images[2], seeded), seeded)
    assert s.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(s.probabilities > 0)
    assert s.task == KINDS[s.phi]


def test_tie_goes_to_lowest_index():
    s = ControlSignal(np.array([0.1, 2.0, 2.0, 2.0, 0.0, -1.0, 2.0]), np.zeros(CONTENT_DIM))
    assert s.phi == 1 and s.task == KINDS[1]


def test_dimension_mismatch(seeded):
    with pytest.raises(ConfigurationError):
        seeded.control(np.zeros(seeded.embedding_dim + 1, np.float32))
    with pytest.raises(ValidationError):
        Feature(np.array([0.0, np.nan]))
    with pytest.raises(ConfigurationError):
        Controller(ControllerNet(num_classes=3), class_names=KINDS)


def _toy_set(n=64, seed=0):
    rng = np.random.default_rng(seed)
    imgs = synthetic_set(n, 16, seed=seed)
    labels = rng.integers(0, 2, n)
    imgs[labels == 1] = np.clip(imgs[labels == 1] + rng.normal(0, 0.2, imgs[labels == 1].shape), 0, 1)
    return imgs.astype(np.float32), labels


def test_single_class_rejected():
    imgs, _ = _toy_set(8)
    with pytest.raises(TrainingError):
        train_controller(imgs, np.zeros(8, dtype=int), epochs=1)
    with pytest.raises(TrainingError):
        train_controller(imgs, np.full(8, 9), epochs=1)
    with pytest.raises(TrainingError):
        train_controller(imgs[:0], np.zeros(0, dtype=int), epochs=1)


def test_training_reduces_loss_and_is_seeded(tmp_path):
    imgs, labels = _toy_set()
    ctrl, hist = train_controller(imgs, labels, epochs=4, seed=3, out_dir=tmp_path / "c")
    assert len(hist) == 5 and hist[-1] < hist[0]
    _, again = train_controller(imgs, labels, epochs=4, seed=3)
    assert hist == again
    loaded = Controller.load(tmp_path / "c")
    x = imgs[0]
    assert np.array_equal(loaded.signal(x).task_logits, ctrl.signal(x).task_logits)
    meta = (tmp_path / "c" / "meta.json").read_text()
    assert '"embedding_dim"' in meta and '"class_names"' in meta


def test_controller_is_frozen(seeded):
    assert not seeded.net.training
    assert not any(p.requires_grad for p in seeded.net.parameters())
    assert seeded.conditioning_dim == len(KINDS) + CONTENT_DIM


def test_held_out_accuracy(trained):
    ideals = synthetic_set(200, 64, seed=9000)
    x, y, _ = controller_dataset(trained.ladder, ideals, per_class=100, seed=4242)
    assert len(x) >= 500
    pred = trained.controller.predict(torch.from_numpy(x.transpose(0, 3, 1, 2).copy())).numpy()
    assert np.mean(pred == y) >= 0.80
