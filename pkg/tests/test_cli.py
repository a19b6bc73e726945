import json
import re
import subprocess
import sys

import numpy as np
import pytest

from cagevit.cli import main
from cagevit.data import gen_dataset
from cagevit.experiments import task_for
from cagevit.model import TINY, build, forward, save_checkpoint
from cagevit.salience import ingest_bundle, write_bundle, weighted_salience
from cagevit.serialization import read_tnsr, write_tnsr

ERROR_LINE = re.compile(r'^cagevit: error stage=\S+ type=\w+ msg=".*"$')


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def assert_one_line_error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]), err


def test_select_prints_partition(capsys, tmp_path):
    write_tnsr(tmp_path / "s.tnsr", np.array([5.0, 1.0, 3.0, 2.0]))
    code, out, _ = run(capsys, "select", "--scores", str(tmp_path / "s.tnsr"), "--rho", "0.5")
    assert code == 0
    assert json.loads(out) == {"major": [0, 2], "minor": [1, 3]}


def test_salience_writes_weighted_map(capsys, tmp_path):
    sample = gen_dataset(task_for(TINY, n_maps=3), 1)[0]
    write_bundle(tmp_path / "b.bin", sample.bundle)
    code, _, _ = run(capsys, "salience", "--bundle", str(tmp_path / "b.bin"), "--out", str(tmp_path / "s.tnsr"))
    assert code == 0
    np.testing.assert_array_equal(read_tnsr(tmp_path / "s.tnsr").data, weighted_salience(sample.bundle).values)


def test_forward_prints_checkpoint_logits(capsys, tmp_path):
    params = build(TINY, 0)
    save_checkpoint(tmp_path / "ck", params)
    code, _, _ = run(capsys, "synth", "--index", "3", "--image-out", str(tmp_path / "i.tnsr"),
                     "--bundle-out", str(tmp_path / "b.bin"))
    assert code == 0
    code, out, _ = run(capsys, "forward", "--config", "tiny", "--ckpt", str(tmp_path / "ck"),
                       "--image", str(tmp_path / "i.tnsr"), "--bundle", str(tmp_path / "b.bin"))
    assert code == 0
    logits = [float(v) for v in out.split()]
    expected = forward(params, read_tnsr(tmp_path / "i.tnsr").data, ingest_bundle(tmp_path / "b.bin")).data
    assert logits == expected.tolist()


def test_forward_rejects_config_mismatch(capsys, tmp_path):
    save_checkpoint(tmp_path / "ck", build(TINY, 0))
    run(capsys, "synth", "--image-out", str(tmp_path / "i.tnsr"), "--bundle-out", str(tmp_path / "b.bin"))
    cfg = tmp_path / "other.txt"
    cfg.write_text(TINY.replace(L=1).to_text())
    code, _, err = run(capsys, "forward", "--config", str(cfg), "--ckpt", str(tmp_path / "ck"),
                       "--image", str(tmp_path / "i.tnsr"), "--bundle", str(tmp_path / "b.bin"))
    assert code == 3
    assert_one_line_error(err)
    assert "stage=config" in err


def test_gradcheck_module_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--module", "tensor", "--seed", "1")
    assert code == 0
    assert "worst=" in out and "FAIL" not in out


def test_params_breakdown_sums_to_total(capsys):
    code, out, _ = run(capsys, "params", "--config", "tiny")
    assert code == 0
    rows = dict(line.rsplit(None, 1) for line in out.strip().splitlines())
    total = int(rows.pop("total").replace(",", ""))
    assert total == 51_586 == sum(int(v.replace(",", "")) for v in rows.values())


def test_bench_writes_csv(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--kind", "LinearSRA", "--lengths", "16,32,64,128,256", "--d", "8",
                       "--p", "2", "--csv", str(tmp_path / "b.csv"))
    assert code == 0
    assert (tmp_path / "b.csv").read_text() == out
    assert out.startswith("kind,N,h,w,d,param,flops,median_ns,alpha\n")


def test_train_toy_saves_and_refuses_overwrite(capsys, tmp_path):
    args = ["train-toy", "--steps", "3", "--samples", "16", "--batch", "8", "--log-every", "1",
            "--ckpt-out", str(tmp_path / "ck")]
    code, out, _ = run(capsys, *args)
    assert code == 0
    assert out.count("step ") == 3 and "final_train_accuracy=" in out
    code, _, err = run(capsys, *args)
    assert code == 3
    assert_one_line_error(err)
    code, _, _ = run(capsys, *args, "--overwrite")
    assert code == 0


def test_train_toy_is_reproducible(capsys):
    args = ["train-toy", "--steps", "4", "--samples", "16", "--batch", "8", "--log-every", "2", "--seed", "3"]
    assert run(capsys, *args)[1] == run(capsys, *args)[1]


def test_sweep_prints_table(capsys):
    code, out, _ = run(capsys, "sweep", "--param", "rho", "--values", "0,0.5", "--steps", "2", "--samples", "16",
                       "--holdout", "8")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].split() == ["rho", "params", "train_acc", "holdout_acc", "final_loss"]
    assert len(lines) == 3


@pytest.mark.parametrize("argv", [
    [],
    ["nope"],
    ["select", "--scores", "x"],
    ["select", "--scores", "x", "--rho", "0.5", "--bogus"],
    ["bench", "--kind", "Nope"],
    ["bench", "--kind", "Full", "--lengths", "a,b"],
])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert_one_line_error(err)


def test_data_errors_exit_3(capsys, tmp_path):
    (tmp_path / "bad.tnsr").write_bytes(b"junk")
    code, _, err = run(capsys, "select", "--scores", str(tmp_path / "bad.tnsr"), "--rho", "0.5")
    assert code == 3
    assert_one_line_error(err)
    assert "stage=ingest" in err and "offset" in err
    code, _, err = run(capsys, "select", "--scores", str(tmp_path / "missing.tnsr"), "--rho", "0.5")
    assert code == 3
    code, _, err = run(capsys, "params", "--config", "no-such-preset")
    assert code == 3 and "stage=config" in err


def test_check_failure_exits_4(capsys, monkeypatch):
    from cagevit import gradcheck

    monkeypatch.setitem(gradcheck.SUITE, "tensor", lambda seed: {"broken": 1.0})
    code, _, err = run(capsys, "gradcheck", "--module", "tensor")
    assert code == 4
    assert_one_line_error(err)


def test_installed_entry_point(tmp_path):
    write_tnsr(tmp_path / "s.tnsr", np.array([5.0, 1.0, 3.0, 2.0]))
    proc = subprocess.run([sys.executable, "-m", "cagevit.cli", "select", "--scores", str(tmp_path / "s.tnsr"),
                           "--rho", "0.5"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["major"] == [0, 2]
