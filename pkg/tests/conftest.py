import logging

import pytest

from floodtweets.data import Split, SyntheticCorpusSpec, generate_synthetic_corpus
from floodtweets.protocol import TrainingProtocol
from floodtweets.vision import BackboneSpec

# Randomly initialised tiny models train from scratch, so they need far larger
# steps than the fine-tuning rates used on pretrained weights. Everything else
# (10 epochs, 10 seeds, batch 32, Adam) is the default protocol.
TINY_PROTOCOL = TrainingProtocol(learning_rate=3e-3, head_learning_rate=1e-2)

TINY_OBJECT = BackboneSpec("tiny_vgg", "object")
TINY_SCENE = BackboneSpec("tiny_vgg", "scene")
TINY_RESIDUAL = BackboneSpec("tiny_resnet", "object")

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.append((name, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def make_corpus(root, text_sep=1.0, image_sep=1.0, seed=7, n_train=(32, 32), n_dev=(16, 16)):
    train = generate_synthetic_corpus(SyntheticCorpusSpec(*n_train, text_sep, image_sep, seed), root, Split.TRAIN)
    dev = generate_synthetic_corpus(SyntheticCorpusSpec(*n_dev, text_sep, image_sep, seed), root, Split.DEV)
    return train, dev


@pytest.fixture(scope="session")
def separable_corpus(tmp_path_factory):
    """64 train / 32 dev, both modalities fully separable."""
    return make_corpus(tmp_path_factory.mktemp("separable"))


@pytest.fixture(scope="session")
def image_only_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("image_only"), text_sep=0.0, image_sep=1.0, seed=3)


@pytest.fixture(scope="session")
def text_only_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("text_only"), text_sep=1.0, image_sep=0.0, seed=3)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.INFO, logger="floodtweets")
