import pytest

from CLfD.synth_data import GeneratorConfig, generate_dataset, load_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY_CONFIG = dict(demos=12, frames_per_demo=10)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_dataset")
    generate_dataset(1, root, GeneratorConfig(**TINY_CONFIG))
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)
