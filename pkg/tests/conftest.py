import pytest

from chainpas.identity import Registry, generate_identity


@pytest.fixture(scope="session")
def operator_key():
    return generate_identity("operator-1", "operator")


@pytest.fixture(scope="session")
def plc_key():
    return generate_identity("plc-1", "plc")


@pytest.fixture(scope="session")
def manager_key():
    return generate_identity("manager-1", "manager")


@pytest.fixture(scope="session")
def bench_key():
    return generate_identity("bench-plc", "plc")


@pytest.fixture(scope="session")
def registry(operator_key, plc_key, manager_key, bench_key):
    return Registry(
        [operator_key.public, plc_key.public, manager_key.public, bench_key.public]
    )
