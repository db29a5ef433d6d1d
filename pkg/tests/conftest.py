import pytest

from attncap.data import build_vocabulary, generate_dataset
from attncap.train import TrainConfig

TINY = dict(embed_dim=8, hidden_dim=8, feature_dim=4, attention_dim=4, channels=(3, 3),
            grid_side=4, batch_size=16, epochs=2)


def tiny_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY, **overrides})


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_dataset(3, {"train": 12, "val": 4, "test": 6}, 16, root)
    return root


@pytest.fixture(scope="session")
def vocab(corpus):
    from attncap.data import load_manifest

    train = load_manifest(corpus, "train")
    return build_vocabulary([c for r in train.records for c in r.captions], 5000)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
