import numpy as np
import pytest

from vqlattice.model import ModelConfig, Transducer, Vocabulary


def tiny_config(variant="lstm", num_labels=2, **kw):
    base = dict(
        variant=variant, num_labels=num_labels, feat_dim=4, enc_dim=8, pred_dim=6,
        joint_dim=5, vq_groups=2, vq_vars=3, vlc_embed=5,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(variant="lstm", num_labels=2, seed=0, **kw):
    vocab = Vocabulary([chr(ord("a") + k) for k in range(num_labels)])
    return Transducer.init(tiny_config(variant, num_labels, **kw), vocab, seed=seed)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
