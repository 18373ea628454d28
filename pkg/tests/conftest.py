import numpy as np
import pytest

from tasc import pipeline, synth
from tasc.metrics import ScenarioSplit


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def small_opda_session(seed=0, dims=256, split=(4, 2, 3), vocab=60,
                       per_class=15, spread=0.05, angle=0.2, noise=0.02):
    cfg = synth.SynthConfig(split=ScenarioSplit(*split), dims=dims,
                            vocab_size=vocab, samples_per_class=per_class,
                            cluster_spread=spread, shift_angle=angle,
                            shift_noise=noise, seed=seed)
    result = synth.generate(cfg)
    return pipeline.build_session(result.bundle), result


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
