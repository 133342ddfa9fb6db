import numpy as np
import pytest

from causal_probe.concept_ae import AETrainConfig, AugmentedNetwork, build_autoencoder, train_autoencoder
from causal_probe.data import synthetic_dataset
from causal_probe.nets import TrainConfig, bars_spec, build_network, train_classifier


@pytest.fixture(scope="session")
def bars_data():
    return synthetic_dataset("bars", 2000, 0), synthetic_dataset("bars", 300, 1, split="test")


@pytest.fixture(scope="session")
def bars_net(bars_data):
    train, _ = bars_data
    net, _ = train_classifier(build_network(bars_spec(), 0), train, TrainConfig(batch_size=50, epochs=3, seed=0))
    return net


@pytest.fixture(scope="session")
def bars_aug(bars_net, bars_data):
    train, _ = bars_data
    ae = build_autoencoder(bars_net, 2, 4, seed=0)
    ae, _ = train_autoencoder(AugmentedNetwork(bars_net, ae), train, AETrainConfig(epochs=3, batch_size=50))
    return AugmentedNetwork(bars_net, ae)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
