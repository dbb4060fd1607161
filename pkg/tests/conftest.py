import numpy as np
import pytest

from outflowbc.fem import FluidProps, build_spaces, forward_solve, stokes_operators
from outflowbc.geometry import arch_mesh, channel_mesh
from outflowbc.measurements import MeasurementSet

R_TRUE = np.array([7000.0, 21000.0, 16000.0, 1700.0])  # ground-truth outlet resistances, dyn s/cm^5
Q_IN = 119.1
LSUB = 5  # outlet tag used as the cuff-pressure section


@pytest.fixture(scope="session")
def arch():
    return build_spaces(arch_mesh(h=0.3))


@pytest.fixture(scope="session")
def arch_ops(arch):
    return stokes_operators(arch, FluidProps())


@pytest.fixture(scope="session")
def arch_truth(arch, arch_ops):
    return forward_solve(arch, R_TRUE, Q_IN, ops=arch_ops)


def synthetic_measurements(state, pressure_tag=LSUB, inlet_flow=Q_IN, **kw):
    sp_ = state.spaces
    return MeasurementSet(inlet_flow=inlet_flow, outlet_flows=[state.flow(t) for t in sp_.outlet_tags],
                          outlet_tags=sp_.outlet_tags, target_pressure=state.mean_pressure(pressure_tag),
                          pressure_patch_tag=pressure_tag, **kw)


@pytest.fixture(scope="session")
def arch_data(arch_truth):
    return synthetic_measurements(arch_truth)


@pytest.fixture(scope="session")
def channel():
    return build_spaces(channel_mesh(length=4.0, height=1.0, nx=8, ny=2))


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
