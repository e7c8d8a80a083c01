import json

import pytest

from fticir.cli import main
from fticir.retrieval import RetrievalIndex
from fticir.toydata import generate_corpus


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def parse_search_output(out):
    rows = []
    for line in out.strip().splitlines():
        rank, image_id, score = line.split("\t")
        rows.append((int(rank), image_id, float(score)))
    return rows


def test_train_index_search_flow(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    generate_corpus(corpus, count=10, seed=6)
    run_dir = tmp_path / "run"

    code, out, err = run_cli(
        capsys, "train",
        "--images", str(corpus / "images"),
        "--captions", str(corpus / "captions.tsv"),
        "--out", str(run_dir),
        "--set", "train.epochs=1",
        "--set", "train.batch_size=4",
        "--set", "train.lr=1e-3",
        "--set", "inversion.n_attrs=6",
        "--set", "inversion.layers=1",
        "--set", "filter.k=3",
    )
    assert code == 0, err
    assert "trained" in out
    assert "checkpoint" in out

    index_path = tmp_path / "toy.fticir"
    code, out, err = run_cli(
        capsys, "index",
        "--images", str(corpus / "images"),
        "--out", str(index_path),
        "--set", "backbone.name=toy",
    )
    assert code == 0, err
    assert index_path.exists()

    code, out, err = run_cli(
        capsys, "search",
        "--index", str(index_path),
        "--checkpoint", str(run_dir / "checkpoint_final.npz"),
        "--reference", "img_001",
        "--images", str(corpus / "images"),
        "--modification", "make it red",
        "--top-k", "5",
    )
    assert code == 0, err
    rows = parse_search_output(out)
    assert [rank for rank, _, _ in rows] == [1, 2, 3, 4, 5]
    scores = [score for _, _, score in rows]
    assert scores == sorted(scores, reverse=True)


def test_search_by_image_file_matches_search_by_id(trained_run, capsys):
    run = trained_run
    common = [
        "--index", str(run["index_path"]),
        "--checkpoint", str(run["checkpoint"]),
        "--images", str(run["root"] / "images"),
        "--modification", "a bigger one",
        "--top-k", "4",
    ]
    code, by_id, err = run_cli(capsys, "search", "--reference", "img_004",
                               *common)
    assert code == 0, err
    code, by_file, err = run_cli(
        capsys, "search",
        "--reference-image", str(run["root"] / "images" / "img_004.png"),
        *common,
    )
    assert code == 0, err
    assert parse_search_output(by_id) == parse_search_output(by_file)


def test_search_unknown_reference_fails_cleanly(trained_run, capsys):
    run = trained_run
    code, out, err = run_cli(
        capsys, "search",
        "--index", str(run["index_path"]),
        "--checkpoint", str(run["checkpoint"]),
        "--images", str(run["root"] / "images"),
        "--reference", "nope_404",
        "--modification", "anything",
    )
    assert code == 1
    assert "error:" in err
    assert "nope_404" in err


def test_unknown_verb_exits_with_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_required_flag(trained_run, capsys):
    run = trained_run
    code, out, err = run_cli(
        capsys, "search",
        "--index", str(run["index_path"]),
        "--checkpoint", str(run["checkpoint"]),
        "--images", str(run["root"] / "images"),
        "--modification", "anything",
    )
    assert code == 1
    assert "error:" in err


def test_caption_verb(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    generate_corpus(corpus, count=3, seed=1)
    plugin = tmp_path / "cap.py"
    plugin.write_text(
        "from pathlib import Path\n"
        "def describe(path):\n"
        "    return f'a photo called {Path(path).stem}'\n"
    )
    out_path = tmp_path / "captions.tsv"
    code, out, err = run_cli(
        capsys, "caption",
        "--images", str(corpus / "images"),
        "--captioner", f"{plugin}:describe",
        "--out", str(out_path),
    )
    assert code == 0, err
    assert "img_000\ta photo called img_000" in out_path.read_text()


def test_index_timestamp_flag(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    generate_corpus(corpus, count=3, seed=1)
    a_path = tmp_path / "a.fticir"
    b_path = tmp_path / "b.fticir"
    for path, stamp in ((a_path, "0"), (b_path, "12345")):
        code, _, err = run_cli(
            capsys, "index",
            "--images", str(corpus / "images"),
            "--out", str(path),
            "--timestamp", stamp,
        )
        assert code == 0, err
    assert RetrievalIndex.load(a_path).created_at == 0
    assert RetrievalIndex.load(b_path).created_at == 12345
    # The timestamp is the only difference, so zeroing it makes rebuilds
    # byte-identical.
    assert a_path.read_bytes() != b_path.read_bytes()


def test_describe_verb(trained_run, capsys):
    run = trained_run
    code, out, err = run_cli(
        capsys, "describe",
        "--checkpoint", str(run["checkpoint"]),
        "--captions", str(run["root"] / "captions.tsv"),
        "--image", str(run["root"] / "images" / "img_005.png"),
        "--top-n", "2",
    )
    assert code == 0, err
    kinds = {line.split("\t")[0] for line in out.strip().splitlines()}
    assert kinds == {"subject", "attribute"}


def test_evaluate_verb_canonical(trained_run, tmp_path, capsys):
    run = trained_run
    ids = run["index"].ids
    rows = [
        {"reference": ids[0], "modification": "as a large one",
         "targets": [ids[1], ids[2]]},
        {"reference": ids[3], "modification": "in the corner",
         "targets": [ids[4]]},
    ]
    data = tmp_path / "triplets.jsonl"
    data.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
    report_path = tmp_path / "report.tsv"
    code, out, err = run_cli(
        capsys, "evaluate",
        "--index", str(run["index_path"]),
        "--checkpoint", str(run["checkpoint"]),
        "--images", str(run["root"] / "images"),
        "--data", str(data),
        "--format", "canonical",
        "--suite", "generic",
        "--out", str(report_path),
    )
    assert code == 0, err
    assert report_path.exists()
    assert out == report_path.read_text()
    lines = out.strip().splitlines()
    assert lines[0].startswith("dataset\t")
    assert any(line.startswith("queries\t2") for line in lines)
    for line in lines:
        if line.startswith("overall\t"):
            value = float(line.split("\t")[-1])
            assert 0.0 <= value <= 1.0


def test_config_file_and_set_precedence(tmp_path, capsys, monkeypatch):
    corpus = tmp_path / "corpus"
    generate_corpus(corpus, count=4, seed=3)
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "train.epochs = 2\n"
        "train.batch_size = 2\n"
        "train.lr = 1e-3\n"
        "inversion.n_attrs = 6\n"
        "inversion.layers = 1\n"
        "filter.k = 3\n"
        "# comment line\n"
    )
    run_dir = tmp_path / "run"
    monkeypatch.setenv("FTICIR_CONFIG", str(cfg_file))
    code, out, err = run_cli(
        capsys, "train",
        "--images", str(corpus / "images"),
        "--captions", str(corpus / "captions.tsv"),
        "--out", str(run_dir),
        "--set", "train.epochs=1",  # overrides the file
    )
    assert code == 0, err
    assert (run_dir / "checkpoint_epoch_001.npz").exists()
    assert not (run_dir / "checkpoint_epoch_002.npz").exists()


def test_unknown_config_key_rejected(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    generate_corpus(corpus, count=3, seed=3)
    code, out, err = run_cli(
        capsys, "train",
        "--images", str(corpus / "images"),
        "--captions", str(corpus / "captions.tsv"),
        "--out", str(tmp_path / "run"),
        "--set", "train.optimiser=sgd",
    )
    assert code == 1
    assert "error:" in err
