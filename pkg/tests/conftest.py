import pytest
import torch

from attncurriculum.corpus import ALPACA_TEMPLATE, encode_dataset, train_tokenizer
from attncurriculum.model import ModelConfig, init_model
from attncurriculum.synthetic import generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synthetic_small():
    return generate_corpus(n_train=48, n_heldout=12, seed=3)


@pytest.fixture(scope="session")
def small_tokenizer(synthetic_small):
    train, _ = synthetic_small
    return train_tokenizer(train, vocab_size=160, seed=0)


@pytest.fixture(scope="session")
def small_examples(synthetic_small, small_tokenizer):
    train, _ = synthetic_small
    return encode_dataset(train, ALPACA_TEMPLATE, small_tokenizer, 96)


@pytest.fixture
def tiny_config():
    # gradient-check configuration
    return ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=32, max_seq=16, vocab_size=32, precision="double")


@pytest.fixture
def small_model(small_tokenizer):
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq=96,
                      vocab_size=small_tokenizer.vocab_size, precision="double")
    return init_model(cfg, seed=11)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", None) != "call" and outcome != "error":
                continue
            if "test_acceptance.py" in rep.nodeid:
                lines.append((rep.nodeid, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for nodeid, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {nodeid.split('::')[-1]}")
