import numpy as np
import pytest

from t1ballstick.acquisition import AcquisitionProtocol, hemisphere_directions, mudi_like_protocol


@pytest.fixture(scope="session")
def mudi_protocol():
    return mudi_like_protocol()


@pytest.fixture(scope="session")
def small_protocol():
    """12 measurements: two b=0 at different TIs, two shells, three TIs."""
    dirs = hemisphere_directions(5)
    b, g, ti = [0.0, 0.0], [(0, 0, 0), (0, 0, 0)], [0.3, 2.0]
    for k, (shell, t) in enumerate([(1.0, 0.3), (1.0, 1.0), (2.0, 2.0), (3.0, 0.6), (1.0, 1.5)] * 2):
        b.append(shell)
        g.append(tuple(dirs[k % 5]))
        ti.append(t)
    n = len(b)
    return AcquisitionProtocol(b, g, ti, [0.08] * n, [7.5] * n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, n, margin=0.02):
    """Parameters strictly inside the default bounds."""
    lo = np.array([0.0, 0.1, 0.1, 0.01, 0.01, 0.0, -np.pi])
    hi = np.array([1.0, 3.0, 3.0, 5.0, 5.0, np.pi, np.pi])
    span = hi - lo
    return rng.uniform(lo + margin * span, hi - margin * span, size=(n, 7))


def protocol_rows(protocol):
    return list(zip(protocol.b, protocol.g, protocol.ti, protocol.tr))


# ------------------------------------------------------------ acceptance support

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def record_criterion():
    """Append and print one pass/fail line; the lines are repeated in the terminal summary."""

    def record(number, name, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


ACCEPT_N_VOXELS = 10_000
ACCEPT_SIGMA = 0.02
ACCEPT_SEED = 1


@pytest.fixture(scope="session")
def acceptance_run(mudi_protocol):
    """One 10,000-voxel dataset fitted by both methods at their default settings."""
    import time

    from t1ballstick.ann import TrainConfig, infer, init_weights, reconstruction_loss, train
    from t1ballstick.evaluation import compare_fits
    from t1ballstick.nlls import fit_volume_nlls
    from t1ballstick.simulate import SimulationConfig, generate_dataset

    protocol = mudi_protocol
    ds = generate_dataset(protocol, SimulationConfig(ACCEPT_N_VOXELS, sigma=ACCEPT_SIGMA, seed=ACCEPT_SEED))
    X = ds.signals.values
    config = TrainConfig()
    w0 = init_weights(len(protocol), int(np.random.default_rng(config.seed).integers(2**63)))
    initial_loss = reconstruction_loss(w0, X, protocol)

    t0 = time.perf_counter()
    weights, history = train(ds.signals, protocol, config, weights=w0.copy())
    ann = infer(weights, ds.signals)
    ann_time = time.perf_counter() - t0
    final_loss = reconstruction_loss(weights, X, protocol)

    nlls = fit_volume_nlls(ds.signals, protocol)
    dataset = {"n_voxels": ACCEPT_N_VOXELS, "sigma": ACCEPT_SIGMA, "seed": ACCEPT_SEED, "n_meas": len(protocol)}
    ann_report, nlls_report = compare_fits(ds.truth, ann, nlls.params, (ann_time, nlls.wall_time), ("ann", "nlls"), dataset)
    return {
        "dataset": ds,
        "history": history,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "ann": ann_report,
        "nlls": nlls_report,
        "nlls_result": nlls,
    }
