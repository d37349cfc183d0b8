import time

import pytest

from canf.experiments import BenchmarkConfig, ToyConfig, run_benchmark, run_toy


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Default 10-seed toy experiment, run once per session."""
    out = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    report = run_toy(ToyConfig(), str(out))
    return report, out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    """Default 10-seed synthetic load benchmark, run once per session."""
    out = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    report = run_benchmark(BenchmarkConfig(), str(out))
    return report, out, time.perf_counter() - t0
