"""Shared fixtures and the acceptance report hook.

Heavy artifacts (trained restorer, pretrained generator/discriminator)
are session-scoped so the long-running behavioral tests share one copy.
Their recipes are deterministic; re-running the suite reproduces them
bit-for-bit on the same platform.
"""
import numpy as np
import pytest

from phantasmagoria import dataset, illusion, networks, training

# One line per behavioral criterion, printed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    line = f"ACCEPTANCE {name}: {status}{suffix}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def natural_corpus():
    return dataset.synthesize_natural_corpus(n=120, size=64, seed=7)


@pytest.fixture(scope="session")
def restorer(natural_corpus):
    return illusion.train_vts_restoration(
        natural_corpus, epochs=120, batch_size=16, patch_size=32, lr=2e-3,
        rng=np.random.default_rng(5))


@pytest.fixture(scope="session")
def texture_store():
    images = dataset.synthesize_texture_corpus(n=200, size=64, seed=11)
    gray = [dataset.to_grayscale(img) for img in images]
    return dataset.ImageStore(source="textures", channels=1, rng_seed=0,
                              images=gray)


@pytest.fixture(scope="session")
def pretrained(texture_store):
    """Generator/discriminator after a short adversarial warm-up, plus the
    diversity level the warm-up settled at (mean of the last 10 logged
    iterations)."""
    gen = networks.init_generator(1, rng=np.random.default_rng(1))
    disc = networks.init_discriminator(1, rng=np.random.default_rng(2))
    config = training.TrainingConfig(batch_size=8, pretrain_epochs=100,
                                     max_iterations=200, seed=3)
    log: list[dict] = []
    training.pretrain_gan(gen, disc, texture_store, config, log)
    pre_diversity = float(np.mean([r["diversity"] for r in log[-10:]]))
    return {"gen": gen, "disc": disc, "pre_diversity": pre_diversity,
            "log": log}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
