import csv
import json

import pytest

from echoauth.cli import main
from echoauth.store import read_checkpoint

# 36 one-second sessions a day keep the default protocol's session split intact
SYNTH = ["--users", "5", "--pretrain-users", "3", "--days", "3", "--sessions", "36", "--seconds", "1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", *SYNTH, "--out", str(root / "raw")]) == 0
    assert main(["process", "--manifest", str(root / "raw" / "manifest.json"),
                 "--out", str(root / "inst")]) == 0
    return root


def _run_json(path):
    return json.loads((path / "run.json").read_text())


def test_synth_writes_sessions_and_run_record(corpus):
    recs = list((corpus / "raw" / "recordings").rglob("*.rec"))
    assert len(recs) == 5 * 3 * 36
    run = _run_json(corpus / "raw")
    assert {"seed", "config_digest", "code_version", "manifest_digest"} <= set(run)


def test_synth_digest_stable(corpus, tmp_path):
    small = ["--users", "3", "--pretrain-users", "1", "--days", "1", "--sessions", "2", "--seconds", "1"]
    assert main(["synth", *small, "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", *small, "--out", str(tmp_path / "b")]) == 0
    assert (_run_json(tmp_path / "a")["manifest_digest"] ==
            _run_json(tmp_path / "b")["manifest_digest"])
    assert ((tmp_path / "a" / "manifest.json").read_bytes() ==
            (tmp_path / "b" / "manifest.json").read_bytes())


def test_synth_zero_sessions_is_config_error(tmp_path, capsys):
    assert main(["synth", "--sessions", "0", "--out", str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err


def test_existing_output_needs_force(corpus, tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep").write_text("")
    args = ["synth", "--users", "2", "--pretrain-users", "1", "--days", "1", "--sessions", "1",
            "--seconds", "1", "--out", str(tmp_path / "x")]
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_process_labels(corpus):
    with open(corpus / "inst" / "labels.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 540
    assert len(list((corpus / "inst").glob("*.ept"))) == 540


def test_missing_manifest_is_data_error(tmp_path):
    code = main(["process", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_corrupted_manifest_exits_4(corpus, tmp_path):
    doc = json.loads((corpus / "raw" / "manifest.json").read_text())
    sessions = doc["users"][0]["days"][0]["sessions"]
    sessions[1]["id"] = sessions[0]["id"]
    bad = corpus / "raw" / "manifest_dup.json"
    bad.write_text(json.dumps(doc))
    code = main(["eval", "--manifest", str(bad), "--epochs", "1", "--out", str(tmp_path / "e")])
    assert code == 4


@pytest.fixture(scope="module")
def lodo(corpus):
    out = corpus / "lodo"
    assert main(["eval", "--data", str(corpus / "inst"), "--protocol", "leave-one-day-out",
                 "--epochs", "1", "--deterministic", "--out", str(out)]) == 0
    return out


def test_leave_one_day_out_table_shape(lodo):
    rep = json.loads((lodo / "report.json").read_text())
    pairs = {k.split(":")[0] for k in rep["table"]}
    assert pairs == {f"{a}->{b}" for a in (1, 2, 3) for b in (1, 2, 3)}
    assert _run_json(lodo)["report_digest"] == rep["digest"]


@pytest.fixture(scope="module")
def right(corpus):
    out = corpus / "right"
    assert main(["eval", "--data", str(corpus / "inst"), "--protocol", "channel-ablation",
                 "--channels", "right", "--epochs", "1", "--deterministic", "--out", str(out)]) == 0
    return out


def test_right_channel_eval(right):
    rep = json.loads((right / "report.json").read_text())
    assert rep["protocol"]["channels"] == "right"
    assert rep["protocol"]["kind"] == "channel_ablation"


def test_report_merges_rows(corpus, lodo, right):
    out = corpus / "merged.csv"
    assert main(["report", str(lodo / "report.json"), str(right / "report.json"),
                 "--out", str(out)]) == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    n_lodo = len(json.loads((lodo / "report.json").read_text())["cells"])
    n_right = len(json.loads((right / "report.json").read_text())["cells"])
    assert len(rows) == n_lodo + n_right
    # a cell that appears in both reports gets one row per report
    key = lambda r: (r["user"], r["train_day"], r["test_day"], r["stage"])  # noqa: E731
    both = {key(r) for r in rows if r["channels"] == "right"}
    for k in both:
        assert sum(1 for r in rows if key(r) == k) == 2


def test_pretrain_enroll_finetune_chain(corpus):
    data = ["--data", str(corpus / "inst"), "--epochs", "1", "--deterministic"]
    base = corpus / "models" / "base.ck"
    assert main(["pretrain", *data, "--out", str(base)]) == 0
    user = corpus / "models" / "u03.ck"
    assert main(["enroll", *data, "--base", str(base), "--user", "u03", "--out", str(user)]) == 0
    tuned = corpus / "models" / "u03-d2.ck"
    assert main(["finetune", *data, "--model", str(user), "--user", "u03", "--day", "2",
                 "--out", str(tuned)]) == 0
    params, _ = read_checkpoint(tuned)
    assert params.config.head_dim == 2
    # idempotent given identical inputs and seed
    again = corpus / "models" / "u03-again.ck"
    assert main(["enroll", *data, "--base", str(base), "--user", "u03", "--out", str(again)]) == 0
    assert again.read_bytes() == user.read_bytes()


def test_enroll_unknown_user(corpus, tmp_path):
    code = main(["enroll", "--data", str(corpus / "inst"), "--user", "nobody", "--epochs", "1",
                 "--out", str(tmp_path / "m.ck")])
    assert code == 3


def test_policy_mismatch_is_config_error(corpus, tmp_path):
    code = main(["eval", "--data", str(corpus / "inst"), "--instances", "5", "--epochs", "1",
                 "--out", str(tmp_path / "e")])
    assert code == 2
