import pytest

from pipebroker.core import (
    PipelineConfig,
    SleepWorkloadSpec,
    StageTimes,
    SyntheticWorkloadSpec,
    TransportKind,
)

try:
    from hypothesis import HealthCheck, settings

    settings.register_profile(
        "pipebroker",
        deadline=None,
        suppress_health_check=[HealthCheck.too_slow],
    )
    settings.load_profile("pipebroker")
except ImportError:
    pass


# acceptance tests append their verdict lines here so they stay visible
# in the terminal summary even when stdout capture swallows the prints
acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


def make_config(tmp_path=None, **overrides):
    """Small fast default config; overrides win."""
    fields = dict(
        producers=2,
        consumers=2,
        total_data=8 * 1024,
        block_size=1024,
        transport=TransportKind.CHANNEL,
        workload=SyntheticWorkloadSpec(iters=1),
        seed=7,
    )
    fields.update(overrides)
    if fields["transport"] == TransportKind.FILE and not fields.get("data_dir"):
        assert tmp_path is not None, "file transport needs tmp_path"
        fields["data_dir"] = str(tmp_path)
    return PipelineConfig(**fields)


def sleep_config(t_comp, t_o, t_i, t_analy, **overrides):
    workload = SleepWorkloadSpec(times=StageTimes(t_comp, t_o, t_i, t_analy))
    return make_config(workload=workload, **overrides)


@pytest.fixture
def config_factory(tmp_path):
    def factory(**overrides):
        return make_config(tmp_path=tmp_path, **overrides)

    return factory
