import numpy as np
import pytest
import torch

from fticir.captions import CaptionSource
from fticir.errors import CaptionNotFoundError, ConfigError, DataError, FormatError
from fticir.inversion import InversionConfig
from fticir.textgen import LexiconTagger
from fticir.toydata import generate_corpus
from fticir.training import (
    TrainConfig,
    TrainingData,
    fit,
    learning_rate_for_epoch,
    load_checkpoint,
    load_inversion_runtime,
    save_checkpoint,
)

TINY = {
    "train.lr": 1e-3,
    "train.batch_size": 4,
    "train.epochs": 1,
    "train.seed": 1,
    "inversion.n_attrs": 6,
    "inversion.layers": 1,
    "filter.k": 3,
}


def tiny_corpus(tmp_path, count=8, seed=2):
    root = tmp_path / "corpus"
    generate_corpus(root, count=count, seed=seed)
    return root


def make_data(root, backbone):
    return TrainingData(
        image_dir=root / "images",
        captions=CaptionSource.load(root / "captions.tsv"),
        backbone=backbone,
        tagger=LexiconTagger(),
    )


def inv_cfg(backbone, flat=TINY):
    return InversionConfig.from_flat(flat, backbone.config)


def test_learning_rate_schedule():
    cfg = TrainConfig.from_flat({"train.lr": 4e-5})
    # Factor 0.1 kicks in at epoch 10 (1-based) and stays.
    assert learning_rate_for_epoch(cfg, 1) == 4e-5
    assert learning_rate_for_epoch(cfg, 9) == 4e-5
    assert learning_rate_for_epoch(cfg, 10) == pytest.approx(4e-6)
    assert learning_rate_for_epoch(cfg, 17) == pytest.approx(4e-6)


def test_fit_writes_metrics_and_checkpoints(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    out = tmp_path / "run"
    cfg = TrainConfig.from_flat(dict(TINY, **{"train.epochs": 2}))
    data = make_data(root, toy_backbone)
    network, history = fit(data, inv_cfg(toy_backbone), cfg, out)
    assert (out / "checkpoint_epoch_001.npz").exists()
    assert (out / "checkpoint_epoch_002.npz").exists()
    assert (out / "checkpoint_final.npz").exists()
    lines = (out / "metrics.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "step"
    assert len(lines) == 1 + len(history)
    assert all(len(line.split("\t")) == len(lines[0].split("\t"))
               for line in lines)
    r_lines = (out / "r_hist.tsv").read_text().splitlines()
    assert r_lines[0] == "epoch\tr\tcount"
    # Retained widths stay within [1, k].
    for line in r_lines[1:]:
        _, r, _ = line.split("\t")
        assert 1 <= int(r) <= 3


def test_fit_then_resume_matches_uninterrupted(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path, count=8)
    data = make_data(root, toy_backbone)

    straight = tmp_path / "straight"
    cfg2 = TrainConfig.from_flat(dict(TINY, **{"train.epochs": 2}))
    _, history_straight = fit(data, inv_cfg(toy_backbone), cfg2, straight)

    split_a = tmp_path / "part_one"
    cfg1 = TrainConfig.from_flat(dict(TINY, **{"train.epochs": 1}))
    fit(data, inv_cfg(toy_backbone), cfg1, split_a)
    split_b = tmp_path / "part_two"
    _, history_resumed = fit(
        data, inv_cfg(toy_backbone), cfg2, split_b,
        resume_from=split_a / "checkpoint_final.npz",
    )

    first_resumed = history_resumed[0]
    matching = history_straight[first_resumed.step - 1]
    assert matching.step == first_resumed.step
    assert matching.total == first_resumed.total


def test_missing_caption_aborts_before_update(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    captions = CaptionSource.load(root / "captions.tsv")
    broken = {iid: captions.get(iid) for iid in captions.ids()[:-1]}
    data = TrainingData(
        image_dir=root / "images",
        captions=CaptionSource(broken),
        backbone=toy_backbone,
        tagger=LexiconTagger(),
    )
    cfg = TrainConfig.from_flat(TINY)
    with pytest.raises(CaptionNotFoundError):
        fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")


def test_zero_lr_keeps_parameters_fixed(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    data = make_data(root, toy_backbone)
    cfg = TrainConfig.from_flat(dict(TINY, **{"train.lr": 0.0}))
    network, _ = fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")
    from fticir.inversion import InversionNetwork

    untouched = InversionNetwork(
        inv_cfg(toy_backbone), dtype=torch.float32, seed=cfg.seed
    )
    for trained, fresh in zip(network.parameters(), untouched.parameters()):
        assert torch.equal(trained, fresh)


def test_checkpoint_round_trip(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    data = make_data(root, toy_backbone)
    cfg = TrainConfig.from_flat(TINY)
    network, _ = fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")
    payload = load_checkpoint(tmp_path / "run" / "checkpoint_final.npz")
    for name, tensor in network.state_dict().items():
        assert torch.equal(payload.network.state_dict()[name], tensor)
    assert payload.epoch == 1

    backbone2, network2, _ = load_inversion_runtime(
        tmp_path / "run" / "checkpoint_final.npz"
    )
    assert backbone2.config == toy_backbone.config
    assert not network2.training


def test_checkpoint_version_gate(tmp_path, toy_backbone):
    import json

    root = tiny_corpus(tmp_path)
    data = make_data(root, toy_backbone)
    cfg = TrainConfig.from_flat(TINY)
    fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")
    path = tmp_path / "run" / "checkpoint_final.npz"
    blob = dict(np.load(path, allow_pickle=False))
    meta = json.loads(bytes(blob["meta/json"]).decode("utf-8"))
    meta["format_version"] = 999
    blob["meta/json"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8
    )
    np.savez(tmp_path / "future.npz", **blob)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "future.npz")
    with pytest.raises(FormatError):
        load_checkpoint(path.with_suffix(".missing"))


def test_no_ortho_ablation_zeroes_term(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    data = make_data(root, toy_backbone)
    cfg = TrainConfig.from_flat(
        dict(TINY, **{"train.ablations": "no_ortho"})
    )
    _, history = fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")
    assert all(step.l_ortho == 0.0 for step in history)
    assert all(step.total != 0.0 for step in history)


def test_no_filter_ablation_keeps_every_attribute(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    data = make_data(root, toy_backbone)
    cfg = TrainConfig.from_flat(
        dict(TINY, **{"train.ablations": "no_filter"})
    )
    _, history = fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")
    n_attrs = inv_cfg(toy_backbone).n_attrs
    assert all(step.mean_r == float(n_attrs) for step in history)


def test_tri_ablations_zero_their_terms(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    data = make_data(root, toy_backbone)
    cfg = TrainConfig.from_flat(
        dict(TINY, **{"train.ablations": "no_subject_reg,no_whole_reg"})
    )
    _, history = fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")
    assert all(step.l_subj == 0.0 for step in history)
    assert all(step.l_whole == 0.0 for step in history)
    assert any(step.l_attr != 0.0 for step in history)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"train.ablations": "bogus_flag"})
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"train.batch_size": "0"})
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"train.epochs": "0"})
    cfg = TrainConfig.from_flat({"filter.k": "12", "inversion.n_attrs": "8"})
    with pytest.raises(ConfigError):
        cfg.effective_filter(8)


def test_effective_filter_no_filter_keeps_all():
    cfg = TrainConfig.from_flat(
        {"train.ablations": "no_filter", "filter.k": "3"}
    )
    eff = cfg.effective_filter(24)
    assert eff.k == 24
    assert eff.epsilon == -1.0


def test_empty_image_dir_is_an_error(tmp_path, toy_backbone):
    images = tmp_path / "images"
    images.mkdir()
    with pytest.raises(DataError):
        TrainingData(
            image_dir=images,
            captions=CaptionSource({}),
            backbone=toy_backbone,
            tagger=LexiconTagger(),
        )


def test_max_steps_caps_the_run(tmp_path, toy_backbone):
    root = tiny_corpus(tmp_path)
    data = make_data(root, toy_backbone)
    cfg = TrainConfig.from_flat(
        dict(TINY, **{"train.epochs": 5, "train.max_steps": 3})
    )
    _, history = fit(data, inv_cfg(toy_backbone), cfg, tmp_path / "run")
    assert len(history) == 3
