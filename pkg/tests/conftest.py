import numpy as np
import pytest

from fusionfilter.datagen import GenConfig, generate
from fusionfilter.foslabeler import build_fos_dataset
from fusionfilter.fusionmodel import make_fusion_spec, train_server_fusion
from fusionfilter.nearsensor import near_sensor_spec, train_near_sensor, train_unimodal_filter
from fusionfilter.nncore import TrainConfig

# Small enough to train in a few seconds, large enough to be non-trivial.
SMALL_GEN = dict(n_frames=1500, foi_prevalence=0.3)
SMALL_TRAIN = TrainConfig(epochs=15, seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(GenConfig(seed=0, **SMALL_GEN))


@pytest.fixture(scope="session")
def small_system(small_dataset):
    """Server, FoS records, fusion-aware and uni-modal filters on the small dataset."""
    ds = small_dataset
    spec = make_fusion_spec([ds.config.feature_width] * ds.config.n_modalities, ds.config.n_labels)
    server = train_server_fusion(ds, spec, SMALL_TRAIN)
    fos = build_fos_dataset(server, ds)
    ns = near_sensor_spec(ds.config.feature_width)
    near = [train_near_sensor(fos, ds, m, ns, SMALL_TRAIN) for m in range(2)]
    uni = [train_unimodal_filter(ds, m, ns, SMALL_TRAIN) for m in range(2)]
    return {"dataset": ds, "spec": spec, "server": server, "fos": fos, "near": near, "uni": uni}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
