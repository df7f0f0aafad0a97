import pytest

from memlpos.channel import EnvironmentSpec, build_environment, generate_dataset


def make_dataset(n=60, seed=0, env_seed=1, blockers=(), bs=(-1.0, -1.0, 3.0)):
    env = build_environment(EnvironmentSpec(bs_position=bs, blockers=blockers), env_seed)
    return generate_dataset(env, n, noise_std=0.01, seed=seed)


@pytest.fixture(scope="session")
def small_ds():
    return make_dataset()


@pytest.fixture(scope="session")
def second_ds():
    return make_dataset(n=60, seed=5, env_seed=2, bs=(11.0, 5.0, 3.0))


# acceptance criteria record one line each; printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture()
def acceptance():
    def record(n: int, ok: bool, detail: str):
        ACCEPTANCE[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
