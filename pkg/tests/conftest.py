from __future__ import annotations

import numpy as np
import pytest

from moskit.data import SynthSpec, stratified_split, synth_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small noiseless corpus shared by data/model/training tests."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = SynthSpec(
        n_systems=6,
        utts_per_system=5,
        encoder_dims=(5, 7),
        noise_std=0.0,
        seed=11,
        duration_range=(2.0, 6.0),
    )
    manifest, genmap = synth_corpus(spec, out)
    return {"dir": out, "manifest": manifest, "genmap": genmap, "spec": spec}


@pytest.fixture(scope="session")
def accept_corpus(tmp_path_factory):
    """The acceptance-scale corpus: 40 systems x 25 utterances, dims 16+24."""
    out = tmp_path_factory.mktemp("accept_corpus")
    spec = SynthSpec(
        n_systems=40,
        utts_per_system=25,
        encoder_dims=(16, 24),
        noise_std=0.0,
        seed=7,
    )
    manifest, genmap = synth_corpus(spec, out)
    train_m, dev_m = stratified_split(manifest, 0.8, seed=1)
    return {
        "dir": out,
        "manifest": manifest,
        "genmap": genmap,
        "spec": spec,
        "train": train_m,
        "dev": dev_m,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
