import hashlib
import json

import numpy as np
import pytest

from manuscriptor import cli, recognizer
from manuscriptor.config import ConfigError, RunConfig, load_config
from manuscriptor.synth import HEBREW_LETTERS


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


TINY_OCR = {"ocr": {"train": {"target_height": 8, "max_epochs": 1, "batch_size": 4,
                              "test_holdout": 2,
                              "net": {"conv_spec": [[4, 3, 1, 2]], "hidden_size": 6}}}}


# ------------------------------------------------------------------- config

def test_defaults_without_file():
    cfg = load_config(None, env={})
    assert cfg.seed is None and cfg.effective_seed() == 42
    assert cfg.layout.self_train.confidence_threshold == 0.70


def test_unknown_key_names_dotted_path(tmp_path):
    p = write_config(tmp_path / "c.json", {"ocr": {"train": {"lr": 0.01, "lrr": 1}}})
    with pytest.raises(ConfigError, match=r"'ocr\.train\.lrr'"):
        load_config(p, env={})


def test_relative_paths_resolve_against_config(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    p = write_config(sub / "c.json", {"ocr": {"manifest": "data/m.jsonl"},
                                      "synth": {"text_files": ["a.txt", "/abs/b.txt"]}})
    cfg = load_config(p, env={})
    assert cfg.ocr.manifest == str(sub / "data" / "m.jsonl")
    assert cfg.synth.text_files == [str(sub / "a.txt"), "/abs/b.txt"]


def test_nested_sections_and_tuples(tmp_path):
    p = write_config(tmp_path / "c.json", {
        "synth": {"composition": {"noise": {"octaves": 2}}},
        "layout": {"self_train": {"model": {"channels": [8, 8], "pools": 1}}}})
    cfg = load_config(p, env={})
    assert cfg.synth.composition.noise.octaves == 2
    assert cfg.layout.self_train.model.channels == (8, 8)


def test_invalid_values_raise_config_error(tmp_path):
    for data in ({"ocr": {"decode": "sideways"}}, {"synth": {"corpus": {"lines_per_page": 0}}},
                 {"ocr": []}, {"layout": {"self_train": {"pixel_threshold": 1.5}}}):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.json", data), env={})
    (tmp_path / "bad.json").write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json", env={})
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json", env={})


def test_env_seed_overrides_and_propagates(tmp_path):
    p = write_config(tmp_path / "c.json", {"seed": 3})
    cfg = load_config(p, env={"MANUSCRIPTOR_SEED": "11"})
    assert cfg.seed == 11 and cfg.ocr.train.seed == 11
    assert cfg.layout.self_train.model.seed == 11
    with pytest.raises(ConfigError):
        load_config(p, env={"MANUSCRIPTOR_SEED": "x"})


def test_digest_tracks_content():
    a, b = RunConfig(), RunConfig()
    assert a.digest() == b.digest()
    b.ocr.beam_width = 3
    assert a.digest() != b.digest()


# ---------------------------------------------------------------------- cli

def test_help_and_usage_errors(capsys):
    assert run(["--help"], capsys)[0] == 0
    assert run(["synth", "--help"], capsys)[0] == 0
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1 and "invalid choice" in err
    assert run([], capsys)[0] == 1


def test_missing_inputs_exit_one(capsys, tmp_path):
    code, _, err = run(["synth", "--out", tmp_path], capsys)
    assert code == 1 and "--text" in err
    code, _, err = run(["eval-layout", "--checkpoint", tmp_path / "none.ckpt",
                        "--data", tmp_path], capsys)
    assert code == 1


def test_unknown_config_key_exit_one(capsys, tmp_path):
    p = write_config(tmp_path / "c.json", {"layout": {"self_train": {"treshold": 0.5}}})
    code, _, err = run(["gradcheck", "--config", p], capsys)
    assert code == 1 and "layout.self_train.treshold" in err


def test_runtime_failure_exit_two(capsys, monkeypatch):
    monkeypatch.setattr(recognizer, "gradient_gate", lambda seed: {"fake": 1.0})
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 2 and json.loads(out)["passed"] is False

    def boom(seed):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(recognizer, "gradient_gate", boom)
    code, _, err = run(["gradcheck"], capsys)
    assert code == 2 and "disk on fire" in err


def test_gradcheck_passes(capsys):
    code, out, err = run(["gradcheck"], capsys)
    report = json.loads(out)
    assert code == 0 and report["passed"] and report["max_rel_error"] < 1e-5
    assert "config=" in err and "seed=42" in err


def test_transcribe_logit_dump(capsys, tmp_path):
    frames = np.full((5, 3), -5.0)
    for t, k in enumerate([1, 1, 0, 2, 2]):
        frames[t, k] = 5.0
    dump = tmp_path / "l.json"
    dump.write_text(json.dumps({"alphabet": ["a", "b"], "frames": frames.tolist()}))
    for mode in ("greedy", "beam"):
        code, out, _ = run(["transcribe", "--logits", dump, "--decode", mode], capsys)
        assert code == 0 and json.loads(out) == {"text": "ab"}
    dump.write_text(json.dumps({"alphabet": ["a"], "frames": frames.tolist()}))
    assert run(["transcribe", "--logits", dump], capsys)[0] == 1


def _texts(tmp_path):
    chars = HEBREW_LETTERS[:4]
    rng = np.random.default_rng(0)
    d = tmp_path / "texts"
    d.mkdir()
    for i in range(2):
        words = [''.join(rng.choice(list(chars), 3)) for _ in range(60)]
        (d / f"{i}.txt").write_text(" ".join(words) + "\n", encoding="utf-8")
    return d


def test_synth_train_eval_round(capsys, tmp_path):
    texts = _texts(tmp_path)
    cfg = write_config(tmp_path / "c.json", TINY_OCR)
    code, out, _ = run(["synth", "--text", texts, "--procedural", 4, "--out", tmp_path / "a",
                        "--seed", 5], capsys)
    assert code == 0 and json.loads(out)["pairs"] > 10
    run(["synth", "--text", texts, "--procedural", 4, "--out", tmp_path / "b", "--seed", 5], capsys)
    digest = {d: hashlib.sha256((tmp_path / d / "manifest.jsonl").read_bytes()).hexdigest()
              for d in "ab"}
    assert digest["a"] == digest["b"]

    manifest = tmp_path / "a" / "manifest.jsonl"
    code, out, _ = run(["train-ocr", "--config", cfg, "--manifest", manifest,
                        "--out", tmp_path / "r.ckpt"], capsys)
    assert code == 0 and json.loads(out)["epochs"] == 1
    code, out, _ = run(["eval-ocr", "--config", cfg, "--checkpoint", tmp_path / "r.ckpt",
                        "--manifest", manifest, "--subset", "test",
                        "--transcripts", tmp_path / "t.jsonl"], capsys)
    report = json.loads(out)
    assert code == 0 and set(report) == {"loss", "cer", "wer", "n", "decode"}
    assert report["n"] == 2 and len((tmp_path / "t.jsonl").read_text().splitlines()) == 2
    img = tmp_path / "a" / json.loads(manifest.read_text().splitlines()[0])["image"]
    code, out, _ = run(["transcribe", "--checkpoint", tmp_path / "r.ckpt", img], capsys)
    assert code == 0 and json.loads(out)[0]["image"] == str(img)


def test_bench_then_layout_commands(capsys, tmp_path):
    cfg = write_config(tmp_path / "c.json", {"layout": {"self_train": {
        "max_epochs": 1, "max_rounds": 1, "lr": 1e-3,
        "model": {"channels": [4, 4], "pools": 1}}}})
    code, _, _ = run(["bench", "--out", tmp_path / "b", "--labeled", 3, "--val", 2, "--test", 2,
                      "--pool", 3], capsys)
    assert code == 0
    assert not (tmp_path / "b" / "pool" / "masks").exists()
    assert len(list((tmp_path / "b" / "pool_truth" / "masks").glob("*.png"))) == 3
    b = tmp_path / "b"
    code, out, _ = run(["train-layout", "--config", cfg, "--labeled", b / "labeled", "--val",
                        b / "val", "--out", tmp_path / "s.ckpt"], capsys)
    assert code == 0 and json.loads(out)["best_epoch"] == 0
    code, out, _ = run(["eval-layout", "--checkpoint", tmp_path / "s.ckpt", "--data", b / "test"],
                       capsys)
    assert code == 0 and 0 <= json.loads(out)["miou"] <= 1
    code, out, _ = run(["self-train", "--config", cfg, "--labeled", b / "labeled", "--pool",
                        b / "pool", "--val", b / "val", "--test", b / "test",
                        "--out", tmp_path / "st.ckpt", "--report", tmp_path / "rep.json"], capsys)
    report = json.loads(out)
    assert code == 0 and {"baseline_test_miou", "test_miou", "rounds"} <= set(report)
    assert json.loads((tmp_path / "rep.json").read_text()) == report


def test_split_command(capsys, tmp_path):
    from manuscriptor.pagesplit import synthetic_double_page
    from manuscriptor.raster import save_png
    (tmp_path / "img").mkdir()
    img, gutter = synthetic_double_page(np.random.default_rng(1))
    save_png(img, tmp_path / "img" / "x.png")
    code, out, _ = run(["split", "--images", tmp_path / "img", "--out", tmp_path / "o"], capsys)
    assert code == 0 and json.loads(out) == {"x": gutter + 4}
