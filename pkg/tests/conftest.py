import numpy as np
import pytest

from cimadapt.config import MacroConfig


@pytest.fixture
def macro():
    return MacroConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def _quantized_toy():
    """Seed-trained, Phase-1 trained and calibrated toy CNN (built once per session)."""
    from cimadapt import qat
    from cimadapt.data import synthetic_dataset, train_test_split
    from cimadapt.model import build
    from cimadapt.training import evaluate, train_seed

    macro = MacroConfig()
    rng = np.random.default_rng(0)
    train, test = train_test_split(synthetic_dataset(per_class=150, seed=0))
    model = build("toy-cnn", rng)
    train_seed(model, macro, train, 6, 0.01, rng)
    float_model = model.copy()
    qat.phase1_train(model, macro, train, 2, 1e-3, rng)
    qat.calibrate_adc_step(model, macro, train.images[:256])
    accuracy = {"float": evaluate(float_model, macro, test), "phase1": evaluate(model, macro, test, "phase1")}
    return {"model": model, "float": float_model, "macro": macro, "train": train, "test": test,
            "accuracy": accuracy}


@pytest.fixture
def quantized_toy(_quantized_toy):
    out = dict(_quantized_toy)
    out["model"] = out["model"].copy()
    out["float"] = out["float"].copy()
    return out


# -- acceptance summary: one line per criterion ---------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[number] = (title, rep.passed and rep.when == "call", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line} - {detail}" if detail else line)
