"""Harness CLI: subcommand wiring, exit codes, and one full
generate / train / decode / eval / trace pass over the smoke preset."""

import json
from pathlib import Path

import numpy as np
import pytest

from crnt.cli import main
from crnt.data import load_manifest
from crnt.decoder import load_attention_trace

CONFIGS = Path(__file__).parent.parent / "configs"


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["generate", "--spec", "x", "--out", "y", "--frobnicate"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err
    assert "frobnicate" in err


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["transmogrify"]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_mode_is_usage_error(capsys):
    code = main(["train", "--config", "c", "--manifest", "m",
                 "--mode", "wild", "--out", "o"])
    assert code == 1


def test_missing_spec_file_is_data_error(tmp_path, capsys):
    code = main(["generate", "--spec", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "out")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_config_key_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    assert main(["generate", "--spec", str(bad),
                 "--out", str(tmp_path / "out")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_eval_missing_hypothesis_is_data_error(tmp_path, capsys):
    refs = tmp_path / "refs.jsonl"
    refs.write_text(json.dumps({
        "utterance_id": "u-0", "video_id": "v", "features_path": "x",
        "transcript": "a b", "entity_word_indices": [],
        "metadata_words": [],
    }) + "\n")
    hyps = tmp_path / "hyps.jsonl"
    hyps.write_text("")
    code = main(["eval", "--refs", str(refs), "--hyps", str(hyps),
                 "--report", str(tmp_path / "r.json")])
    assert code == 2
    assert "no hypothesis" in capsys.readouterr().err


@pytest.mark.slow
def test_smoke_pipeline(tmp_path, capsys):
    """The whole harness, smoke preset, one contextual mode."""
    corpus = tmp_path / "corpus"
    run = tmp_path / "run"
    results = tmp_path / "results.jsonl"
    report = tmp_path / "report.json"
    traces = tmp_path / "traces"

    assert main(["generate", "--spec", str(CONFIGS / "smoke.cfg"),
                 "--out", str(corpus)]) == 0
    train_manifest = corpus / "train.jsonl"
    test_manifest = corpus / "test.jsonl"
    assert train_manifest.exists() and test_manifest.exists()

    assert main(["train", "--config", str(CONFIGS / "smoke.cfg"),
                 "--manifest", str(train_manifest),
                 "--mode", "att_bias", "--out", str(run)]) == 0
    assert (run / "final.ckpt").exists()
    assert (run / "vocab.tsv").exists()
    losses = [json.loads(l) for l in (run / "losses.jsonl").read_text().splitlines()]
    assert losses[-1]["mean_nll"] < losses[0]["mean_nll"]

    assert main(["trace-attention", "--ckpt", str(run / "final.ckpt"),
                 "--manifest", str(test_manifest), "--beam", "4",
                 "--out", str(results), "--trace-dir", str(traces)]) == 0
    lines = [json.loads(l) for l in results.read_text().splitlines()]
    records = load_manifest(test_manifest)
    assert [l["utterance_id"] for l in lines] == [r.utterance_id for r in records]
    for line in lines:
        assert isinstance(line["hypothesis"], str)
        assert np.isfinite(line["log_score"])

    # every utterance got a trace; rows sum to one per emitted unit
    for rec in records:
        trace = load_attention_trace(traces / f"{rec.utterance_id}.csv")
        assert trace.weights.shape[1] == len(trace.surfaces)
        if trace.weights.size:
            np.testing.assert_allclose(trace.weights.sum(axis=1), 1.0,
                                       atol=2e-5)

    assert main(["eval", "--refs", str(test_manifest),
                 "--hyps", str(results), "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert set(data) == {"all", "common_nonzero", "common_zero"}
    assert data["all"]["n_samples"] == len(records)
    assert 0.0 <= data["all"]["wer"]
    n_zero = data["common_zero"]["n_samples"] if data["common_zero"] else 0
    n_nonzero = data["common_nonzero"]["n_samples"] if data["common_nonzero"] else 0
    assert n_zero + n_nonzero == len(records)

    out = capsys.readouterr().out
    assert "wer=" in out


def test_decode_rejects_wrong_vocab(tmp_path, capsys):
    """A checkpoint must be decoded with the vocabulary it was trained
    with; a rebuilt vocab from different data fails the checksum."""
    from crnt import tokenizer as tok
    from crnt.checkpoint import save_checkpoint
    from crnt.model import Model, ModelConfig
    from crnt.tokenizer import Vocabulary

    vocab = Vocabulary([tok.BLANK_PIECE, tok.CTX_END_PIECE, "ab", "c"],
                       [False, False, True, False])
    cfg = ModelConfig(mode="baseline", vocab_size=4, feat_dim=3,
                      enc_layers=1, enc_hidden=2,
                      enc_subsample_after=frozenset(), enc_proj=4,
                      pred_hidden=2, pred_proj=4, joint_dim=4)
    model = Model(cfg, np.random.default_rng(0))
    ckpt_path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt_path, model, "0" * 64)
    other = Vocabulary([tok.BLANK_PIECE, tok.CTX_END_PIECE, "zz"],
                       [False, False, True])
    other.save(tmp_path / "vocab.tsv")
    code = main(["decode", "--ckpt", str(ckpt_path),
                 "--manifest", str(tmp_path / "m.jsonl"),
                 "--out", str(tmp_path / "r.jsonl")])
    assert code == 2
    assert "checksum mismatch" in capsys.readouterr().err
