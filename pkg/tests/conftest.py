import random

import numpy as np
import pytest

from idface.ahe import PaillierBackend, keygen, keypair_from_primes

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_keypair():
    # n = 35: the textbook example
    return keypair_from_primes(5, 7)


@pytest.fixture(scope="session")
def kp512():
    return keygen(512, rng=512)


@pytest.fixture(scope="session")
def kp1024():
    return keygen(1024, rng=1024)


@pytest.fixture(scope="session")
def kp2048():
    return keygen(2048, rng=2048)


@pytest.fixture
def be512(kp512):
    return PaillierBackend.from_keypair(kp512, rng=random.Random(5))
