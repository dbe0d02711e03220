import numpy as np
import pytest

from hclmp import synthetic
from hclmp.composition import ElementTrio
from hclmp.curation import build_instance
from hclmp.transfer import CwganConfig, split_dos_corpus, train_cwgan

# criterion number -> (passed, detail); printed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
    assert passed, detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d}: {detail}")


SMALL_ELEMENTS = ("Ag", "Bi", "Fe", "Mn")
ABF = ElementTrio("Ag", "Bi", "Fe")
ABM = ElementTrio("Ag", "Bi", "Mn")


@pytest.fixture(scope="session")
def small_world():
    return synthetic.make_world(SMALL_ELEMENTS, seed=0)


@pytest.fixture(scope="session")
def small_table(small_world):
    return synthetic.make_spectra_table(small_world, [ABF, ABM])


@pytest.fixture(scope="session")
def small_instance(small_table):
    return build_instance(small_table, ABF, seed=0)


@pytest.fixture(scope="session")
def small_dos(small_world):
    return synthetic.make_dos_records(small_world, 200, seed=0)


@pytest.fixture(scope="session")
def tiny_generator(small_dos):
    """A barely trained generator: enough to exercise the transfer path quickly."""
    tr, va, _ = split_dos_corpus(small_dos)
    cfg = CwganConfig(epochs=2, generator_widths=(32, 32), critic_widths=(32, 32), sample_count=8,
                      critic_steps=2, noise_dim=8)
    gen, _ = train_cwgan(tr, va, cfg)
    return gen


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
