import time
from collections import OrderedDict

import pytest

from astcomplete.corpus import flatten
from astcomplete.model import ModelConfig, save_checkpoint
from astcomplete.shards import build_shard
from astcomplete.synthetic import synthetic_corpus
from astcomplete.training import TrainConfig, train
from astcomplete.vocab import build_type_vocab, build_value_vocab

OVERFIT_PROGRAMS = 50
OVERFIT_EPOCHS = 200
OVERFIT_TARGET = (0.99, 0.95)


class ToyData:
    def __init__(self, trees, m):
        self.trees = trees
        flat = [flatten(t) for t in trees]
        self.type_vocab = build_type_vocab(flat)
        self.value_vocab = build_value_vocab(flat)
        self.shard = build_shard(trees, self.type_vocab, self.value_vocab, m)

    def config(self, **overrides):
        return ModelConfig.mini(self.type_vocab.size, self.value_vocab.size, **overrides)


@pytest.fixture(scope="session")
def toy():
    return ToyData(synthetic_corpus(12, seed=3), m=8)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The mini model trained to memorise 50 tagged synthetic programs."""
    data = ToyData(synthetic_corpus(OVERFIT_PROGRAMS, seed=1, tagged=True), m=8)
    tc = TrainConfig(epochs=OVERFIT_EPOCHS, batch_size=8, learning_rate=1e-3, eval_train=True,
                     target_train_accuracy=OVERFIT_TARGET)
    t0 = time.perf_counter()
    result = train(data.config(), tc, data.shard)
    seconds = time.perf_counter() - t0
    path = tmp_path_factory.mktemp("overfit") / "overfit.pt"
    save_checkpoint(path, result.model, data.type_vocab, data.value_vocab, train_config=tc.to_dict())
    return {"data": data, "result": result, "seconds": seconds, "checkpoint": path}


# One summary line per acceptance criterion.

_criteria: "OrderedDict[str, list[str]]" = OrderedDict()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    name = marker.args[0]
    outcomes = _criteria.setdefault(name, [])
    if report.when == "call" or report.outcome != "passed":
        outcomes.append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _criteria.items():
        ok = bool(outcomes) and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
