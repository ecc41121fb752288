"""Config parsing and end-to-end command behavior with exit codes."""

import json
import struct

import pytest

from ercmc.cli import main
from ercmc.config import (
    DEFAULTS,
    apply_overrides,
    effective_config,
    model_config_from,
    parse_config_text,
    train_config_from,
)
from ercmc.data import load_corpus, read_embeddings, write_corpus
from ercmc.errors import ConfigurationError, ParseError

from test_training import synthetic_corpus


# ---------------------------------------------------------------------------
# config parsing

def test_parse_config_basic_and_comments():
    cfg = parse_config_text("# comment\n\nmodel.d_m = 32\ntrain.lr=1e-3\n")
    assert cfg == {"model.d_m": "32", "train.lr": "1e-3"}


def test_parse_config_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigurationError):
        parse_config_text("model.bogus=1\n")
    with pytest.raises(ConfigurationError):
        parse_config_text("model.d_m=1\nmodel.d_m=2\n")
    with pytest.raises(ParseError):
        parse_config_text("just some words\n")


def test_overrides_apply_on_top_and_reject_unknown():
    cfg = apply_overrides({"model.d_m": "32"}, ["model.d_m=64", "train.seed=7"])
    assert cfg["model.d_m"] == "64" and cfg["train.seed"] == "7"
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["nope=1"])
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["model.d_m"])


def test_effective_config_fills_defaults():
    cfg = effective_config({"model.d_m": "32"})
    assert cfg["model.d_m"] == "32"
    assert cfg["model.n_h"] == DEFAULTS["model.n_h"]


def test_config_factories_build_typed_configs():
    cfg = effective_config({"model.d_m": "32", "model.n_h": "4",
                            "model.contexts": "c,pf", "train.epochs": "3"})
    mcfg = model_config_from(cfg, n_labels=4)
    assert (mcfg.d_m, mcfg.n_heads, mcfg.contexts) == (32, 4, ("c", "pf"))
    tcfg = train_config_from(cfg)
    assert tcfg.epochs == 3 and tcfg.neutral_label is None


def test_config_factories_reject_bad_values():
    with pytest.raises(ConfigurationError):
        model_config_from(effective_config({"model.d_m": "lots"}), 4)
    with pytest.raises(ConfigurationError):
        model_config_from(effective_config({"model.use_h": "maybe"}), 4)
    with pytest.raises(ConfigurationError):
        train_config_from(effective_config({"train.epochs": "x"}))


def test_raw_contexts_parse():
    cfg = effective_config({"model.contexts": "raw"})
    assert model_config_from(cfg, 4).is_raw


# ---------------------------------------------------------------------------
# command fixtures

@pytest.fixture
def workspace(tmp_path):
    """A small labeled corpus with mock embeddings/futures and a config."""
    corpus = synthetic_corpus(4, 3, seed=30, min_len=3, max_len=5)
    data = tmp_path / "train.jsonl"
    write_corpus(corpus, str(data))
    dev = synthetic_corpus(2, 3, seed=31, min_len=3, max_len=5)
    # force the dev corpus onto the training vocabulary
    dev = type(dev)(dev.conversations, list(corpus.labels))
    dev_path = tmp_path / "dev.jsonl"
    write_corpus(dev, str(dev_path))

    for name, path in (("train", data), ("dev", dev_path)):
        assert main(["mock-encode", "--data", str(path), "--dim", "16",
                     "--seed", "0", "--out", str(tmp_path / f"{name}.erce")]) == 0
        assert main(["mock-futures", "--data", str(path),
                     "--embeddings", str(tmp_path / f"{name}.erce"),
                     "--m", "3", "--k", "2",
                     "--out", str(tmp_path / f"{name}.fut.erce")]) == 0

    config = tmp_path / "run.cfg"
    config.write_text("\n".join([
        f"data.train={data}",
        f"data.dev={dev_path}",
        f"data.test={dev_path}",
        f"embeddings.train={tmp_path / 'train.erce'}",
        f"embeddings.dev={tmp_path / 'dev.erce'}",
        f"embeddings.test={tmp_path / 'dev.erce'}",
        f"futures.train={tmp_path / 'train.fut.erce'}",
        f"futures.dev={tmp_path / 'dev.fut.erce'}",
        f"futures.test={tmp_path / 'dev.fut.erce'}",
        "model.d_m=16", "model.n_h=2", "model.window=2", "model.m=3",
        "model.dropout=0.0", "train.epochs=2", "train.lr=1e-3",
    ]) + "\n")
    return tmp_path, config


# ---------------------------------------------------------------------------
# mock data commands

def test_mock_encode_is_deterministic(workspace, capsys):
    tmp_path, _config = workspace
    out1 = tmp_path / "a.erce"
    out2 = tmp_path / "b.erce"
    data = str(tmp_path / "train.jsonl")
    assert main(["mock-encode", "--data", data, "--dim", "16", "--out",
                 str(out1)]) == 0
    assert main(["mock-encode", "--data", data, "--dim", "16", "--out",
                 str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    capsys.readouterr()


def test_mock_futures_header_flag_byte_is_one(workspace):
    tmp_path, _config = workspace
    blob = (tmp_path / "train.fut.erce").read_bytes()
    assert blob[:4] == b"ERCE"
    assert blob[20] == 1
    assert struct.unpack("<I", blob[21:25])[0] == 3  # m


def test_mock_commands_write_meta_sidecars(workspace):
    tmp_path, _config = workspace
    meta = json.loads((tmp_path / "train.erce.meta.json").read_text())
    assert meta["command"] == "mock-encode" and meta["dim"] == "16"
    meta = json.loads((tmp_path / "train.fut.erce.meta.json").read_text())
    assert meta["command"] == "mock-futures" and meta["m"] == "3"


# ---------------------------------------------------------------------------
# train / eval round trip

def test_train_eval_round_trip(workspace, capsys):
    tmp_path, config = workspace
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run_dir)]) == 0
    trace = json.loads((run_dir / "trace.json").read_text())
    assert len(trace["trace"]) == 2
    assert trace["config"]["model.d_m"] == "16"  # effective config echoed
    assert trace["config"]["model.n_h"] == "2"
    assert (run_dir / "checkpoint.erck").exists()

    eval_dir = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.erck"),
                 "--split", "test", "--config", str(config),
                 "--out", str(eval_dir)]) == 0
    report = json.loads((eval_dir / "report.json").read_text())
    dev_corpus = load_corpus(str(tmp_path / "dev.jsonl"))
    assert report["n_utterances"] == dev_corpus.n_utterances
    lines = (eval_dir / "predictions.jsonl").read_text().strip().splitlines()
    assert len(lines) == dev_corpus.n_utterances
    assert report["config"]["train.epochs"] == "2"
    capsys.readouterr()

    # identical re-evaluation: deterministic artifacts
    eval_dir2 = tmp_path / "eval2"
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.erck"),
                 "--split", "test", "--config", str(config),
                 "--out", str(eval_dir2)]) == 0
    assert (eval_dir / "predictions.jsonl").read_text() == \
        (eval_dir2 / "predictions.jsonl").read_text()
    capsys.readouterr()


def test_train_set_override_changes_wiring(workspace, capsys):
    tmp_path, config = workspace
    run_dir = tmp_path / "cs_run"
    assert main(["train", "--config", str(config), "--out", str(run_dir),
                 "--set", "model.contexts=c,s", "--set", "train.epochs=1"]) == 0
    trace = json.loads((run_dir / "trace.json").read_text())
    assert trace["config"]["model.contexts"] == "c,s"
    assert len(trace["trace"]) == 1
    capsys.readouterr()


def test_exit_codes_for_config_and_data_errors(workspace, capsys):
    tmp_path, config = workspace
    # unknown config key -> 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("model.bogus=1\n")
    assert main(["train", "--config", str(bad_cfg),
                 "--out", str(tmp_path / "x")]) == 2
    # bad --set key -> 2
    assert main(["train", "--config", str(config), "--out",
                 str(tmp_path / "x"), "--set", "nope=1"]) == 2
    # missing config file -> 2
    assert main(["train", "--config", str(tmp_path / "absent.cfg"),
                 "--out", str(tmp_path / "x")]) == 2
    # missing futures path while pf enabled -> 3 with coverage message
    no_fut = tmp_path / "nofut.cfg"
    no_fut.write_text(
        (config.read_text()).replace(f"futures.train={tmp_path / 'train.fut.erce'}\n", ""))
    assert main(["train", "--config", str(no_fut),
                 "--out", str(tmp_path / "x")]) == 3
    err = capsys.readouterr().err
    assert "futures" in err
    # embeddings file that does not exist -> 3
    gone = tmp_path / "gone.cfg"
    gone.write_text(config.read_text().replace(
        f"embeddings.train={tmp_path / 'train.erce'}",
        f"embeddings.train={tmp_path / 'missing.erce'}"))
    assert main(["train", "--config", str(gone),
                 "--out", str(tmp_path / "x")]) == 3
    capsys.readouterr()


def test_eval_with_wrong_dim_embeddings_is_data_error(workspace, capsys):
    tmp_path, config = workspace
    run_dir = tmp_path / "run_dim"
    assert main(["train", "--config", str(config), "--out", str(run_dir),
                 "--set", "train.epochs=1"]) == 0
    assert main(["mock-encode", "--data", str(tmp_path / "dev.jsonl"),
                 "--dim", "8", "--out", str(tmp_path / "narrow.erce")]) == 0
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.erck"),
                 "--split", "test", "--config", str(config),
                 "--set", f"embeddings.test={tmp_path / 'narrow.erce'}",
                 "--out", str(tmp_path / "e")]) == 3
    capsys.readouterr()


# ---------------------------------------------------------------------------
# analyze-ec

def _write_predictions(path, corpus, label_of):
    lines = []
    for conv in corpus.conversations:
        for utt in conv.utterances:
            lines.append(json.dumps({
                "conversation": conv.conv_id, "index": utt.conv_index,
                "gold": corpus.labels[utt.label] if utt.label is not None else None,
                "pred": label_of(conv, utt),
                "distribution": [1.0],
            }))
    path.write_text("\n".join(lines) + "\n")


def test_analyze_ec_all_same_label_scores_100(tmp_path, capsys):
    from ercmc.data import Conversation, Corpus, Utterance
    corpus = Corpus([
        Conversation("c0", [Utterance("A", f"t{i}", 0) for i in range(7)]),
    ], ["only", "other"])
    data = tmp_path / "d.jsonl"
    write_corpus(corpus, str(data))
    preds = tmp_path / "p.jsonl"
    _write_predictions(preds, corpus, lambda conv, utt: "only")
    out = tmp_path / "ec.json"
    assert main(["analyze-ec", "--predictions", str(preds), "--data",
                 str(data), "--window", "5", "--weighting", "uniform",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["ec_predicted"] == pytest.approx(100.0)
    assert doc["ec_gold"] == pytest.approx(100.0)
    assert doc["qualifying_utterances"] == 2  # positions 0 and 1 have 5 followers
    capsys.readouterr()


def test_analyze_ec_two_match_construction_scores_40(tmp_path, capsys):
    from ercmc.data import Conversation, Corpus, Utterance
    gold = [0, 0, 1, 0, 1, 1]  # matches at offsets 1 and 3 from position 0
    corpus = Corpus([
        Conversation("c0", [Utterance("A", f"t{i}", g) for i, g in enumerate(gold)]),
    ], ["x", "y"])
    data = tmp_path / "d.jsonl"
    write_corpus(corpus, str(data))
    preds = tmp_path / "p.jsonl"
    _write_predictions(preds, corpus,
                       lambda conv, utt: corpus.labels[utt.label])
    out = tmp_path / "ec.json"
    assert main(["analyze-ec", "--predictions", str(preds), "--data",
                 str(data), "--window", "5", "--weighting", "uniform",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["ec_predicted"] == pytest.approx(40.0, abs=1e-12)
    capsys.readouterr()


def test_analyze_ec_oversized_window_warns_and_exits_zero(tmp_path, capsys):
    from ercmc.data import Conversation, Corpus, Utterance
    corpus = Corpus([
        Conversation("c0", [Utterance("A", "t", 0), Utterance("B", "u", 0)]),
    ], ["only"])
    data = tmp_path / "d.jsonl"
    write_corpus(corpus, str(data))
    preds = tmp_path / "p.jsonl"
    _write_predictions(preds, corpus, lambda conv, utt: "only")
    out = tmp_path / "ec.json"
    assert main(["analyze-ec", "--predictions", str(preds), "--data",
                 str(data), "--window", "9", "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err
    doc = json.loads(out.read_text())
    assert doc["ec_predicted"] is None
    assert doc["qualifying_utterances"] == 0


def test_analyze_ec_missing_prediction_is_data_error(tmp_path, capsys):
    from ercmc.data import Conversation, Corpus, Utterance
    corpus = Corpus([
        Conversation("c0", [Utterance("A", "t", 0), Utterance("B", "u", 0)]),
    ], ["only"])
    data = tmp_path / "d.jsonl"
    write_corpus(corpus, str(data))
    preds = tmp_path / "p.jsonl"
    preds.write_text(json.dumps({"conversation": "c0", "index": 0,
                                 "gold": "only", "pred": "only",
                                 "distribution": [1.0]}) + "\n")
    assert main(["analyze-ec", "--predictions", str(preds), "--data",
                 str(data), "--out", str(tmp_path / "ec.json")]) == 3
    capsys.readouterr()


# ---------------------------------------------------------------------------
# gradcheck command

def test_gradcheck_command_passes_on_primitives(capsys):
    assert main(["gradcheck", "--seed", "0", "--skip-model"]) == 0
    out = capsys.readouterr().out
    assert "checks ok" in out
    assert "FAIL" not in out


def test_mismatched_manifest_is_refused(workspace, capsys):
    tmp_path, config = workspace
    from ercmc.data import Conversation, Corpus, Utterance, corpus_checksum
    stranger = Corpus([Conversation("z", [Utterance("A", "???", 0)])], ["L0"])
    manifest = {"corpus_checksum": corpus_checksum(stranger)}
    (tmp_path / "train.fut.erce.manifest.json").write_text(json.dumps(manifest))
    assert main(["train", "--config", str(config),
                 "--out", str(tmp_path / "m")]) == 3
    assert "checksum" in capsys.readouterr().err
