import json
from pathlib import Path

import pytest
from cli import main


@pytest.fixture
def config_path(tmp_path):
    cfg = {
        "seed": 3,
        "out_dir": str(tmp_path / "runs"),
        "corpus": {
            "paired_count": 60,
            "unpaired_count": 600,
            "frequent_per_domain": 2,
            "rare_per_domain": 2,
            "rare_unpaired_min": 10,
            "base_test_count": 6,
            "rare_test_count": 4,
            "heldout_text_count": 40,
            "feature_dim": 4,
        },
        "model": {
            "encoder_dim": 4,
            "label_decoder": {"width": 4, "embed_dim": 4},
            "blank_decoder_dim": 3,
            "joint_dim": 4,
        },
        "train": {
            "paired_batch_size": 2,
            "unpaired_batch_size": 4,
            "joist_batch_size": 2,
            "steps": 2,
            "eval_every": 2,
            "eval_utterances": 2,
            "log_every": 1,
            "ilma_steps": 2,
            "mhat_ilma_steps": 2,
        },
        "lm": {"layers": 1, "width": 4, "embed_dim": 4, "steps": 2, "batch_size": 4},
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def fake_scores(rate):
    return {
        name: {"rate": rate, "substitutions": round(100 * rate), "deletions": 0, "insertions": 0, "ref_len": 100}
        for name in ("vs", "maps", "play", "web", "yt")
    }


def test_gen_data_is_idempotent(tmp_path, config_path):
    assert main(["gen-data", "--config", str(config_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(config_path), "--out", str(tmp_path / "b")]) == 0
    for name in ("manifest.json", "vocab.json", "unpaired.txt", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_corpus(tmp_path, config_path):
    main(["gen-data", "--config", str(config_path), "--out", str(tmp_path / "a")])
    main(["gen-data", "--config", str(config_path), "--seed-override", "4", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "unpaired.txt").read_bytes() != (tmp_path / "b" / "unpaired.txt").read_bytes()


def test_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"stpes": 1}}))
    assert main(["gen-data", "--config", str(path)]) == 2
    assert "stpes" in capsys.readouterr().err


def test_missing_lm_for_fusion(tmp_path, config_path):
    main(["gen-data", "--config", str(config_path)])
    assert main(["decode", "--config", str(config_path), "--checkpoint", str(tmp_path / "model.ckpt")]) == 2


def test_tampered_corpus_exit_code(tmp_path, config_path):
    main(["gen-data", "--config", str(config_path)])
    with open(tmp_path / "runs" / "corpus" / "unpaired.txt", "a") as f:
        f.write("play zzz\n")
    assert main(["train", "--config", str(config_path), "--mode", "base"]) == 1


def test_train_then_decode(tmp_path, config_path):
    runs = tmp_path / "runs"
    assert main(["gen-data", "--config", str(config_path)]) == 0
    assert main(["train", "--config", str(config_path), "--mode", "jeit"]) == 0

    run = runs / "mhat" / "jeit"
    for name in ("config.json", "metrics.jsonl", "model.ckpt", "last.ckpt", "loss.svg"):
        assert (run / name).exists()

    args = ["--lambda-lm", "0", "--lambda-ilm", "0", "--beam", "1"]
    assert main(["decode", "--config", str(config_path), "--checkpoint", str(run / "model.ckpt"), *args]) == 0
    scores = json.loads((run / "decode" / "scores.json").read_text())
    assert set(scores) == {"vs", "maps", "play", "web", "yt"}
    assert all(0.0 <= s["rate"] for s in scores.values())

    # Rescoring the written n-best reproduces the decode scores.
    nbest = run / "decode" / "nbest.txt"
    assert main(["score", "--config", str(config_path), "--nbest", str(nbest), "--out", str(tmp_path / "rescored")]) == 0
    assert json.loads((tmp_path / "rescored" / "scores.json").read_text()) == scores


def test_adapt_writes_curve(tmp_path, config_path):
    runs = tmp_path / "runs"
    main(["gen-data", "--config", str(config_path)])
    assert main(["train", "--config", str(config_path), "--mode", "ilmt", "--variant", "hat"]) == 0
    checkpoint = runs / "hat" / "ilmt" / "model.ckpt"
    assert main(["adapt", "--config", str(config_path), "--checkpoint", str(checkpoint), "--kld-weight", "0"]) == 0

    run = runs / "hat" / "ilma"
    curve = json.loads((run / "curve.json").read_text())
    assert [step for step, _ in curve] == [2]
    assert (run / "curve.svg").exists()
    assert main(["adapt", "--config", str(config_path), "--checkpoint", str(checkpoint), "--resume"]) == 0


def test_resume_without_checkpoint(tmp_path, config_path):
    main(["gen-data", "--config", str(config_path)])
    assert main(["train", "--config", str(config_path), "--mode", "base", "--resume"]) == 2


def test_report_without_runs(tmp_path, config_path):
    runs = tmp_path / "runs"
    runs.mkdir()
    assert main(["report", "--config", str(config_path)]) == 0
    assert (runs / "report.txt").read_text().startswith("(no scored runs)")
    assert json.loads((runs / "claims.json").read_text()) == []


def test_report_failing_claim(tmp_path, config_path):
    runs = tmp_path / "runs"
    for mode, rate in (("base", 0.3), ("jeit", 0.4)):
        path = runs / "mhat" / mode / "decode" / "scores.json"
        path.parent.mkdir(parents=True)
        path.write_text(json.dumps(fake_scores(rate)))

    assert main(["report", "--config", str(config_path), "--runs", str(runs)]) == 1
    (claim,) = json.loads((runs / "claims.json").read_text())
    assert claim["name"] == "rare-word gain"
    assert not claim["passed"]


def test_profile_flag(tmp_path, config_path, capsys):
    assert main(["--profile", "gen-data", "--config", str(config_path)]) == 0
    assert "Total-Time" in capsys.readouterr().out


@pytest.mark.slow
def test_pipeline_deterministic(tmp_path, config_path):
    codes = [main(["pipeline", "--config", str(config_path), "--out", str(tmp_path / run)]) for run in ("a", "b")]
    assert codes[0] == codes[1]

    a, b = tmp_path / "a", tmp_path / "b"
    claims = json.loads((a / "claims.json").read_text())
    assert claims
    assert codes[0] == (0 if all(c["passed"] for c in claims) else 1)
    assert (a / "report.txt").read_text() == (b / "report.txt").read_text()
    scored = sorted(p.relative_to(a) for p in a.rglob("scores.json"))
    assert len(scored) == 4 + 1 + 2
    for rel in scored:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


@pytest.mark.slow
def test_pipeline_claims_hold(tmp_path):
    config = Path(__file__).parent.parent / "demos" / "claims.json"
    assert main(["pipeline", "--config", str(config), "--out", str(tmp_path)]) == 0
    claims = json.loads((tmp_path / "claims.json").read_text())
    assert {c["name"] for c in claims} == {"rare-word gain", "adaptation stability", "combined training", "ILM perplexity"}
    assert all(c["passed"] for c in claims)

