import pytest

from .utils import make_gtsrb_corpus, make_speech_corpus, synthetic_dataset


def pytest_addoption(parser: pytest.Parser):
    """Add options parser for custom plugins."""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Also run desk-scale training and full-size Monte-Carlo tests",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def speech_corpus(tmp_path_factory):
    """Six tone clips per command word; every third clip is 0.8 s long."""
    return make_speech_corpus(tmp_path_factory.mktemp("speech_commands"), per_class=6)


@pytest.fixture(scope="session")
def gtsrb_corpus(tmp_path_factory):
    return make_gtsrb_corpus(tmp_path_factory.mktemp("gtsrb"), per_class=12)


@pytest.fixture(scope="session")
def full_gtsrb_corpus(tmp_path_factory):
    """300 images per sign class, the full per-class quota."""
    return make_gtsrb_corpus(tmp_path_factory.mktemp("gtsrb_full"), per_class=300, size=32, annotate=False)


@pytest.fixture
def small_dataset():
    return synthetic_dataset(clips_per_class=10)


@pytest.fixture
def run_toml(tmp_path, speech_corpus, gtsrb_corpus):
    """A run configuration over the synthetic corpora with a workspace under ``tmp_path``."""
    path = tmp_path / "run.toml"
    path.write_text(
        f"""
[paths]
speech_commands = "{speech_corpus.as_posix()}"
gtsrb = "{gtsrb_corpus.as_posix()}"
workspace = "work"

[dataset]
seed = 3
folds = 3
images_per_class = 10

[model]
conv_channels = [4, 8, 8]
audio_hidden = [16, 8]
image_embed = 8
fusion_hidden = 8

[train]
batch_size = 16
epochs = 2

[evaluation]
perplexity = 3.0
tsne_iterations = 300
plot = false
"""
    )
    return path
