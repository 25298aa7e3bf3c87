import pytest
from hypothesis import HealthCheck, settings

from csolab.data import SynthConfig, draw_clean_set, gen_synthetic
from csolab.model import ModelConfig, TrainConfig, init_network, train

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_synth():
    return SynthConfig(num_classes=4, samples_per_class=60, seed=3)


@pytest.fixture(scope="session")
def small_data(small_synth):
    return gen_synthetic(small_synth, stream=0)


@pytest.fixture(scope="session")
def small_net(small_data):
    net = init_network(ModelConfig(small_data.X.shape[1], small_data.num_classes, (24, 16), seed=1))
    return train(net, small_data.X, small_data.y, TrainConfig(epochs=8, seed=1))


@pytest.fixture(scope="session")
def small_clean(small_synth):
    test = gen_synthetic(small_synth, stream=1, samples_per_class=20)
    clean, _ = draw_clean_set(test, 5, seed=0)
    return clean



def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
