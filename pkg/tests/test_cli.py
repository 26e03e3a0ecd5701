import json
import subprocess
import sys

import pytest

from poet.cli import main

SMALL_SYNTH = "n_frames = 3\nn_parts = 2\nframe_dim = 5\npart_dim = 4\nmax_aspects = 3\n"
SMALL_TRAIN = "epochs = 2\nbatch_size = 4\nnode_dim = 6\naspect_dim = 4\nword_dim = 6\nlr = 0.05\n"


@pytest.fixture
def work(tmp_path):
    (tmp_path / "synth.cfg").write_text(SMALL_SYNTH)
    (tmp_path / "train.cfg").write_text(SMALL_TRAIN)
    assert main(["synth", "--config", str(tmp_path / "synth.cfg"), "--n", "8", "--seed", "1",
                 "--out", str(tmp_path / "train.jsonl")]) == 0
    assert main(["synth", "--config", str(tmp_path / "synth.cfg"), "--n", "4", "--seed", "2",
                 "--out", str(tmp_path / "test.jsonl")]) == 0
    return tmp_path


def test_synth_byte_identical(work):
    cfg = str(work / "synth.cfg")
    for name in ("a", "b"):
        assert main(["synth", "--config", cfg, "--n", "5", "--seed", "9", "--out", str(work / name)]) == 0
    assert (work / "a").read_bytes() == (work / "b").read_bytes()
    assert main(["synth", "--config", cfg, "--n", "5", "--seed", "10", "--out", str(work / "c")]) == 0
    assert (work / "a").read_bytes() != (work / "c").read_bytes()


def test_train_generate_eval(work, capsys):
    run = work / "run"
    train_file = work / "train.jsonl"
    before = train_file.read_bytes()
    assert main(["train", "--config", str(work / "train.cfg"), "--data", str(train_file),
                 "--val", str(work / "test.jsonl"), "--out", str(run)]) == 0
    assert train_file.read_bytes() == before
    lines = (run / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss" and len(lines) == 3
    assert (run / "best.ckpt").exists()

    cands = work / "cands.jsonl"
    assert main(["generate", "--checkpoint", str(run / "last.ckpt"), "--data", str(work / "test.jsonl"),
                 "--out", str(cands), "--beam", "2"]) == 0
    recs = [json.loads(x) for x in cands.read_text().splitlines()]
    assert len(recs) == 4 and all({"candidate", "reference", "video_id"} <= set(r) for r in recs)

    capsys.readouterr()
    report = work / "report.json"
    assert main(["eval", "--candidates", str(cands), "--out", str(report)]) == 0
    assert "bleu1" in capsys.readouterr().out
    assert 0.0 <= json.loads(report.read_text())["bleu1"] <= 1.0


def test_eval_identity_corpus(tmp_path):
    p = tmp_path / "c.jsonl"
    refs = [["this", part, "is", "red", "cotton"] for part in ("hem", "collar", "sleeve")]
    p.write_text("".join(json.dumps({"candidate": r, "reference": r, "aspects": ["red"]}) + "\n" for r in refs))
    out = tmp_path / "r.json"
    assert main(["eval", "--candidates", str(p), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["bleu1"] == 1.0 and rep["rouge_l"] == 1.0 and rep["cider"] == 10.0


def test_generate_is_deterministic(work):
    run = work / "run"
    assert main(["train", "--config", str(work / "train.cfg"), "--data", str(work / "train.jsonl"),
                 "--out", str(run)]) == 0
    outs = []
    for k in range(2):
        out = work / f"g{k}.jsonl"
        assert main(["generate", "--checkpoint", str(run / "last.ckpt"), "--data", str(work / "test.jsonl"),
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_ablate(work):
    out = work / "abl.json"
    assert main(["ablate", "--config", str(work / "train.cfg"), "--data", str(work / "train.jsonl"),
                 "--test", str(work / "test.jsonl"), "--out", str(out)]) == 0
    assert sorted(json.loads(out.read_text())) == ["gcn_minus_kl", "poet", "poet_minus_kl"]


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("max_rel_err=") == 5


def test_usage_errors_exit_one(work, capsys):
    assert main([]) == 1
    assert main(["train", "--data", str(work / "train.jsonl")]) == 1  # no --out
    assert main(["train", "--variant", "bogus", "--data", "x", "--out", "y"]) == 1
    bad = work / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    assert main(["train", "--config", str(bad), "--data", str(work / "train.jsonl"), "--out", str(work / "o")]) == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_data_errors_exit_two(work, capsys):
    assert main(["train", "--data", str(work / "missing.jsonl"), "--out", str(work / "o")]) == 2
    broken = work / "broken.jsonl"
    broken.write_text("{not json\n")
    assert main(["eval", "--candidates", str(broken)]) == 2
    assert main(["generate", "--checkpoint", str(broken), "--data", str(work / "test.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "poet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
