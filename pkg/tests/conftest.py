"""Shared fixtures: a tiny deterministic corpus and one trained run.

The trained run is deliberately short (quality does not matter for the
interface tests that reuse it); the end-to-end acceptance test trains its
own longer run.
"""

from __future__ import annotations

import contextlib

import pytest
import torch

from fticir.backbone import BackboneConfig, ToyBackbone
from fticir.captions import CaptionSource
from fticir.inversion import InversionConfig
from fticir.retrieval import build_index
from fticir.textgen import LexiconTagger
from fticir.toydata import generate_corpus
from fticir.training import TrainConfig, TrainingData, fit

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@contextlib.contextmanager
def criterion(name: str):
    """Record one acceptance pass/fail line for the terminal summary."""
    try:
        yield
    except BaseException:
        ACCEPTANCE_LINES.append(f"ACCEPTANCE {name}: FAIL")
        raise
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {name}: PASS")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_backbone():
    return ToyBackbone(BackboneConfig())


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    records = generate_corpus(root, count=20, seed=5)
    return root, records


@pytest.fixture(scope="session")
def corpus_captions(small_corpus):
    root, _ = small_corpus
    return CaptionSource.load(root / "captions.tsv")


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, toy_backbone, small_corpus, corpus_captions):
    """One short training run plus index, shared across interface tests."""
    root, _ = small_corpus
    out_dir = tmp_path_factory.mktemp("run")
    cfg = TrainConfig.from_flat({
        "train.lr": 1e-3,
        "train.batch_size": 8,
        "train.epochs": 1,
        "train.seed": 3,
        "inversion.n_attrs": 8,
        "inversion.layers": 2,
        "filter.k": 4,
        "filter.epsilon": 0.05,
    })
    inv_cfg = InversionConfig.from_flat(
        {"inversion.n_attrs": 8, "inversion.layers": 2},
        toy_backbone.config,
    )
    data = TrainingData(
        image_dir=root / "images",
        captions=corpus_captions,
        backbone=toy_backbone,
        tagger=LexiconTagger(),
    )
    network, history = fit(data, inv_cfg, cfg, out_dir)
    index = build_index(root / "images", toy_backbone)
    index_path = out_dir / "toy.fticir"
    index.save(index_path)
    return {
        "root": root,
        "out_dir": out_dir,
        "checkpoint": out_dir / "checkpoint_final.npz",
        "index_path": index_path,
        "index": index,
        "network": network,
        "history": history,
        "cfg": cfg,
    }
