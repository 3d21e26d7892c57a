import numpy as np
import pytest

from idrnet.config import RunConfig


def tiny_config(**changes) -> RunConfig:
    """A config small enough for a few training steps in well under a second."""
    base = dict(
        num_classes=6, height=16, width=32, train_size=16, val_size=4,
        channels=8, widths=(4, 8, 8), batch_size=2, iterations=6, eval_every=0,
    )
    base.update(changes)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def diversify(trainer, images, scale=50.0):
    """Turn the coarse head into a nearest-centroid classifier over this batch's features.

    Freshly initialised toy encoders predict one pseudo class everywhere, which
    would make every diagnostics step a skip.
    """
    from idrnet.autodiff import no_grad

    with no_grad():
        feats = trainer.model.backbone.encode(images).data
    cols = feats.transpose(1, 0, 2, 3).reshape(feats.shape[1], -1)
    k = trainer.config.num_classes
    centres = cols[:, np.linspace(0, cols.shape[1] - 1, k).astype(int)].T
    trainer.model.params["cls_c.w"].data[:, :, 0, 0] = scale * centres
    trainer.model.params["cls_c.b"].data[:] = -0.5 * scale * (centres ** 2).sum(axis=1)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns its pass flag so tests can assert on it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, passed: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
